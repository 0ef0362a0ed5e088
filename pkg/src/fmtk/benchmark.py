"""End-to-end synthetic benchmark: the full teacher/student protocol over several seeds.

Per seed:

1. render a 3-class phantom set Q (train/val/test) and a disjoint
   detail-labeled set S for the teacher;
2. train the teacher on S, pseudo-label Q, pre-train the single-task (ST)
   model, extend ST for a second schedule, fine-tune the multi-task (MT) model;
3. label-noise control: fine-tune with hard pseudo-labels, then again with a
   fraction of them flipped equal to the teacher's measured error rate;
4. evaluate everything on Q's test split, compare MT against ST, extended ST
   and the teacher, and score GradCAM localization on single-artifact images.

Reports contain no timing so that identical runs give identical bytes.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from fmtk.dataio import fov_bbox, load_manifest, write_manifest
from fmtk.evaluation.report import class_centroids, compare_models, evaluate, format_comparison, write_confusion_csv, write_json
from fmtk.explain import gradcam, upsample
from fmtk.imaging import resize_bilinear
from fmtk.model import DETAIL_NAMES, BackboneConfig
from fmtk.phantom import CLASS_NAMES, REJECT_AT, DefectSeverities, fov_mask, generate_dataset, render_sample
from fmtk.pipeline import (
    TrainConfig,
    extend_st_baseline,
    finetune_multitask,
    pretrain_student,
    pseudo_label,
    train_teacher,
    tune_lambdas,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    seeds: int = 5
    seed: int = 0  # seed k runs with seed + k
    n_train: int = 600
    n_val: int = 60
    n_test: int = 200
    n_teacher: int = 300
    image_size: int = 32
    style: str = "3class"
    epochs: int = 20
    batch_size: int = 8
    lambda_a: float = 1.0
    lambda_b: float = 1.0
    tune: bool = False
    tune_epochs: int = 5
    n_boot: int = 1000
    gradcam_images: int = 50
    dilation: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 1 or self.n_teacher < 20:
            raise ValueError("split sizes must be positive and n_teacher >= 20")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    def train_config(self, seed: int, checkpoint_dir) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lambda_a=self.lambda_a,
            lambda_b=self.lambda_b,
            seed=seed,
            backbone=BackboneConfig(input_size=self.image_size),
            tune_epochs=self.tune_epochs,
            checkpoint_dir=str(checkpoint_dir),
        )


# -- label noise ---------------------------------------------------------------------


def teacher_error_rates(teacher_eval) -> np.ndarray:
    """Per-detail error rate of the teacher's thresholded outputs against oracle labels."""
    pred = teacher_eval.probs_a >= teacher_eval.threshold
    return np.mean(pred != (teacher_eval.detail_truth == 1), axis=0)


def flip_hard_labels(hard: np.ndarray, rates, seed: int) -> np.ndarray:
    """Flip ``round(rate_j * N)`` randomly chosen entries of each detail column."""
    out = hard.copy()
    n = len(hard)
    for j, rate in enumerate(rates):
        k = int(np.floor(rate * n + 0.5))
        rows = np.random.default_rng([seed, 707, j]).permutation(n)[:k]
        out[rows, j] = 1.0 - out[rows, j]
    return out


# -- GradCAM localization ------------------------------------------------------------


def _crop_like(mask: np.ndarray, bbox, size: int) -> np.ndarray:
    top, bottom, left, right = bbox
    m = mask[top:bottom, left:right].astype(np.float64)
    h, w = m.shape
    side = max(h, w)
    ph, pw = side - h, side - w
    m = np.pad(m, [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)])
    return resize_bilinear(m, size) >= 0.5


def localization_case(index: int, seed: int, size: int, dilation: float):
    """A reject-grade phantom with one illumination artifact, preprocessed like training data.

    Returns ``(image, dilated_mask, fov)`` in the model's input frame.
    """
    from fmtk.dataio import fov_crop

    rng = np.random.default_rng([seed, 808, index])
    sev = DefectSeverities(float(rng.uniform(REJECT_AT, 1.0)), 0.0, 0.0)
    smp = render_sample(index, seed, size, "3class", severities=sev)
    bbox = fov_bbox(smp.image)
    image = fov_crop(smp.image, size)
    mask = _crop_like(smp.severities.artifact_mask, bbox, size)
    fov = _crop_like(fov_mask(size), bbox, size)
    dilated = (distance_transform_edt(~mask) <= dilation * size) & fov if mask.any() else mask
    return image, dilated, fov


def gradcam_localization(net, seed: int, n_images: int, size: int, dilation: float,
                         target=("B", 0)) -> dict:
    """Hit rate of the heatmap argmax inside the dilated artifact mask vs. its area fraction."""
    hits, fractions = [], []
    for i in range(n_images):
        image, dilated, fov = localization_case(i, seed, size, dilation)
        if not dilated.any():
            continue
        up = upsample(gradcam(net, image, target), size)
        up = np.where(fov, up, -1.0)
        r, c = np.unravel_index(np.argmax(up), up.shape)
        hits.append(bool(dilated[r, c]))
        fractions.append(float(dilated.sum() / fov.sum()))
    hit_rate = float(np.mean(hits)) if hits else 0.0
    chance = float(np.mean(fractions)) if fractions else 0.0
    return {
        "target": list(target),
        "n": len(hits),
        "hit_rate": hit_rate,
        "chance_rate": chance,
        "ratio": hit_rate / chance if chance > 0 else 0.0,
    }


# -- one seed -------------------------------------------------------------------------


def run_seed(cfg: BenchmarkConfig, seed: int, out_dir) -> dict:
    out = Path(out_dir)
    total = cfg.n_train + cfg.n_val + cfg.n_test
    fractions = (cfg.n_train / total, cfg.n_val / total, cfg.n_test / total)
    q_manifest = generate_dataset(out / "data_q", total, cfg.style, fractions, seed=2 * seed, size=cfg.image_size)
    s_manifest = generate_dataset(out / "data_s", cfg.n_teacher, cfg.style, (1.0, 0.0, 0.0), seed=2 * seed + 1,
                                  size=cfg.image_size)
    q = load_manifest(q_manifest, image_size=cfg.image_size)
    s = load_manifest(s_manifest, image_size=cfg.image_size)
    tc = cfg.train_config(seed, out / "checkpoints")

    teacher = train_teacher(s, tc)
    qp = pseudo_label(teacher.net, q)
    write_manifest(qp, out / "data_q" / "manifest_pseudo.csv")
    st = pretrain_student(q, tc)
    ext = extend_st_baseline(st, q, tc)
    tuned = None
    if cfg.tune:
        best, scores = tune_lambdas(tc.lambda_grid, st.net, qp, tc)
        tuned = {"best": list(best), "scores": [[*k, v] for k, v in sorted(scores.items())]}
        tc = replace(tc, lambda_a=best[0], lambda_b=best[1])
    mt = finetune_multitask(st.net, qp, tc)

    test = q.split("test")
    evals = {
        "teacher": evaluate(teacher.net, test, "teacher"),
        "st": evaluate(st.net, test, "st"),
        "st_extended": evaluate(ext.net, test, "st_extended"),
        "mt": evaluate(mt.net, test, "mt"),
    }

    # Label-noise control on hard pseudo-labels.
    rates = teacher_error_rates(evals["teacher"])
    hard_cfg = replace(tc, hard_pseudo=True)
    train_rows = qp.split("train")
    hard = (train_rows.pseudo() >= 0.5).astype(np.float64)
    mt_hard = finetune_multitask(st.net, qp, hard_cfg, pseudo_override=hard, save_as="finetune_hard")
    flipped = flip_hard_labels(hard, rates, seed)
    mt_flip = finetune_multitask(st.net, qp, hard_cfg, pseudo_override=flipped, save_as="finetune_flipped")
    evals["mt_hard"] = evaluate(mt_hard.net, test, "mt_hard")
    evals["mt_flipped"] = evaluate(mt_flip.net, test, "mt_flipped")

    cmp_st = compare_models(evals["mt"], evals["st"], cfg.n_boot, seed, tail="greater")
    cmp_ext = compare_models(evals["mt"], evals["st_extended"], cfg.n_boot, seed, tail="greater")
    cmp_teacher = compare_models(evals["mt"], evals["teacher"], cfg.n_boot, seed, tail="two")
    for name, doc in (("mt_vs_st", cmp_st), ("mt_vs_st_extended", cmp_ext), ("mt_vs_teacher", cmp_teacher)):
        write_json(out / "reports" / f"{name}.json", doc)
        (out / "reports" / f"{name}.txt").write_text(format_comparison(doc))
    for name, ev in evals.items():
        write_json(out / "reports" / f"eval_{name}.json", ev.to_json())
        if ev.cm is not None:
            write_confusion_csv(ev.cm, out / "reports" / f"confusion_{name}.csv", CLASS_NAMES[cfg.style])

    pseudo_mae = float(np.mean(np.abs(qp.pseudo() - q.details())))
    loc = gradcam_localization(mt.net, seed, cfg.gradcam_images, cfg.image_size, cfg.dilation)
    centroids = class_centroids(mt.net, test)
    good, reject = CLASS_NAMES[cfg.style].index("good"), 0
    centroid_gap = (float(np.linalg.norm(centroids[good] - centroids[reject]))
                    if good in centroids and reject in centroids else None)

    f1 = {k: (ev.report.headline_f1 if ev.report is not None else None) for k, ev in evals.items()}
    return {
        "seed": seed,
        "overall_f1": f1,
        "detail_f1": {
            k: [m.f1 for m in ev.detail_reports()] for k, ev in evals.items() if ev.has_details
        },
        "best_epoch": {"teacher": teacher.record.best_epoch, "st": st.record.best_epoch,
                       "st_extended": ext.record.best_epoch, "mt": mt.record.best_epoch},
        "st_phase_one_epochs": len(st.record.val_score),
        "lambdas": [tc.lambda_a, tc.lambda_b],
        "tuning": tuned,
        "teacher_error_rates": rates.tolist(),
        "pseudo_label_mae": pseudo_mae,
        "mt_vs_st_p": cmp_st["overall"]["wilcoxon"]["p_value"],
        "mt_vs_st_extended_p": cmp_ext["overall"]["wilcoxon"]["p_value"],
        "detail_vs_teacher": {
            name: {"delta": cmp_teacher["details"][name]["delta"], "p": cmp_teacher["details"][name]["wilcoxon"]["p_value"]}
            for name in DETAIL_NAMES
        },
        "gradcam": loc,
        "embedding_centroid_gap": centroid_gap,
    }


# -- aggregation ---------------------------------------------------------------------


def summarize(cfg: BenchmarkConfig, per_seed: list[dict]) -> dict:
    """Aggregate per-seed results into the benchmark criteria."""
    mt = np.array([r["overall_f1"]["mt"] for r in per_seed])
    st = np.array([r["overall_f1"]["st"] for r in per_seed])
    ext = np.array([r["overall_f1"]["st_extended"] for r in per_seed])
    wins = int(np.sum(mt >= st))
    need = int(np.ceil(0.8 * len(per_seed)))

    gaps = np.array([[abs(r["detail_vs_teacher"][d]["delta"]) for d in DETAIL_NAMES] for r in per_seed])
    comparable = np.array([sum(r["detail_vs_teacher"][d]["p"] > 0.05 for d in DETAIL_NAMES) for r in per_seed])
    noise_drop = np.array([r["overall_f1"]["mt_hard"] - r["overall_f1"]["mt_flipped"] for r in per_seed])
    ratios = np.array([r["gradcam"]["ratio"] for r in per_seed])

    criteria = {
        "mt_vs_st": {
            "mt_wins": wins,
            "required_wins": need,
            "median_mt": float(np.median(mt)),
            "median_st": float(np.median(st)),
            "median_st_extended": float(np.median(ext)),
            "passed": bool(wins >= need and np.median(ext) <= np.median(mt)),
        },
        "detail_fidelity": {
            "median_abs_gap": dict(zip(DETAIL_NAMES, np.median(gaps, axis=0).tolist())),
            "median_comparable_details": float(np.median(comparable)),
            "passed": bool(np.all(np.median(gaps, axis=0) <= 0.05) and np.median(comparable) >= 2),
        },
        "noise_tolerance": {
            "median_drop": float(np.median(noise_drop)),
            "passed": bool(np.median(noise_drop) <= 0.03),
        },
        "gradcam_localization": {
            "median_ratio": float(np.median(ratios)),
            "passed": bool(np.median(ratios) >= 2.0),
        },
    }
    return {"config": cfg.to_json(), "seeds": [r["seed"] for r in per_seed], "per_seed": per_seed,
            "criteria": criteria}


def format_summary(summary: dict) -> str:
    lines = ["seed   ST      ST-ext  MT      MT-hard MT-flip  gradcam x-chance"]
    for r in summary["per_seed"]:
        f = r["overall_f1"]
        lines.append(f"{r['seed']:<6} {f['st']:.4f}  {f['st_extended']:.4f}  {f['mt']:.4f}  "
                     f"{f['mt_hard']:.4f}  {f['mt_flipped']:.4f}   {r['gradcam']['ratio']:.2f}")
    lines.append("")
    for name, c in summary["criteria"].items():
        detail = ", ".join(f"{k}={v}" for k, v in c.items() if k != "passed")
        lines.append(f"[{'PASS' if c['passed'] else 'FAIL'}] {name}: {detail}")
    return "\n".join(lines) + "\n"


def _run_one(args):
    cfg, seed, out = args
    return run_seed(cfg, seed, out)


def run_benchmark(cfg: BenchmarkConfig, out_dir) -> dict:
    """Run every seed (optionally in worker processes) and write ``report.json``/``report.txt``."""
    out = Path(out_dir)
    jobs = [(cfg, cfg.seed + k, out / f"seed_{cfg.seed + k}") for k in range(cfg.seeds)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            per_seed = list(pool.map(_run_one, jobs))
    else:
        per_seed = [_run_one(j) for j in jobs]
    per_seed.sort(key=lambda r: r["seed"])
    summary = summarize(cfg, per_seed)
    write_json(out / "report.json", summary)
    (out / "report.txt").write_text(format_summary(summary))
    return summary

"""Teacher -> pseudo-labels -> single-task pre-training -> multi-task fine-tuning.

Every stage trains with SGD + momentum under the step schedule, evaluates
on a validation split after each epoch and keeps the checkpoint with the
highest validation score (earliest epoch on ties). Randomness is keyed by
``(seed, stage, epoch[, sample])`` so a run is reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from fmtk.augment import DEFAULT_BOUNDS, AugmentBounds, apply_plan, sample_plan
from fmtk.dataio import Dataset, split_holdout
from fmtk.diffcore import SgdState, sgd_step
from fmtk.errors import DataError
from fmtk.evaluation.metrics import classification_metrics, confusion_matrix, detail_metrics
from fmtk.model import BackboneConfig, MultiTaskNet
from fmtk.objectives import LossWeights, Schedule, bce_multilabel, ce_multiclass, lr_at_epoch, one_hot

log = logging.getLogger(__name__)

STAGE_CODES = {"teacher": 1, "pretrain": 2, "extend": 3, "finetune": 4}
DEFAULT_LAMBDA_GRID = ((0.25, 1.0), (0.5, 1.0), (1.0, 1.0), (2.0, 1.0))


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    epochs: int | None = None  # None -> full schedule; otherwise a proportionally shortened one
    batch_size: int = 32
    lambda_a: float = 1.0
    lambda_b: float = 1.0
    seed: int = 0
    augment: bool = True
    augment_finetune: bool = True
    bounds: AugmentBounds = field(default_factory=lambda: DEFAULT_BOUNDS)
    hard_pseudo: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    teacher_widths: tuple[int, ...] | None = None
    holdout_fraction: float = 0.1
    tune_epochs: int | None = None
    lambda_grid: tuple[tuple[float, float], ...] = DEFAULT_LAMBDA_GRID
    checkpoint_dir: str | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        LossWeights(self.lambda_a, self.lambda_b)

    @property
    def effective_schedule(self) -> Schedule:
        return self.schedule if self.epochs is None else self.schedule.shortened(self.epochs)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_a, self.lambda_b)

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.to_json()
        d["bounds"] = self.bounds.to_json()
        d["backbone"] = self.backbone.to_json()
        d["teacher_widths"] = list(self.teacher_widths) if self.teacher_widths else None
        d["lambda_grid"] = [list(p) for p in self.lambda_grid]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "schedule" in d:
            d["schedule"] = Schedule(**{**d["schedule"], "milestones": tuple(d["schedule"].get("milestones", (30, 60, 80)))})
        if "bounds" in d:
            d["bounds"] = AugmentBounds(**d["bounds"])
        if "backbone" in d:
            d["backbone"] = BackboneConfig.from_json(d["backbone"])
        if d.get("teacher_widths"):
            d["teacher_widths"] = tuple(d["teacher_widths"])
        if "lambda_grid" in d:
            d["lambda_grid"] = tuple(tuple(float(x) for x in p) for p in d["lambda_grid"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    stage: str
    train_loss: list[float] = field(default_factory=list)
    val_score: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("-inf")
    checkpoints: dict[str, str] = field(default_factory=dict)
    metric: str = "macro_f1"

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    net: MultiTaskNet  # best checkpoint
    last: MultiTaskNet  # final-epoch weights
    record: RunRecord


# -- inference helpers ------------------------------------------------------------


def predict(net: MultiTaskNet, images: np.ndarray, batch_size: int = 128):
    """Probabilities for both heads over ``images``; absent heads give None."""
    outs_b, outs_a = [], []
    for s in range(0, len(images), batch_size):
        pb, pa = net.forward(images[s:s + batch_size])
        if pb is not None:
            outs_b.append(pb.copy())
        if pa is not None:
            outs_a.append(pa.copy())
    pb = np.concatenate(outs_b) if outs_b else None
    pa = np.concatenate(outs_a) if outs_a else None
    if len(images) == 0:
        pb = np.zeros((0, net.n_classes)) if net.head_b is not None else None
        pa = np.zeros((0, 3)) if net.head_a is not None else None
    return pb, pa


def overall_score(truth, probs_b, n_classes) -> float:
    cm = confusion_matrix(truth, np.argmax(probs_b, axis=1), n_classes)
    return classification_metrics(cm).macro_f1


def detail_score(truth, probs_a) -> float:
    return float(np.mean([m.f1 for m in detail_metrics(truth, probs_a)]))


# -- the training loop ------------------------------------------------------------


def _split_train_val(dataset: Dataset, config: TrainConfig):
    train = dataset.split("train")
    val = dataset.split("val")
    if len(val) == 0:
        train, val = split_holdout(dataset, config.holdout_fraction, config.seed)
    if len(train) == 0:
        raise DataError("dataset has no training rows")
    return train, val


def _fit(net: MultiTaskNet, stage: str, images: np.ndarray, targets_b, targets_a,
         val_fn, config: TrainConfig, augment: bool, weights: LossWeights,
         record: RunRecord | None = None, epoch_offset: int = 0) -> TrainResult:
    schedule = config.effective_schedule
    code = STAGE_CODES[stage]
    params = net.parameters()
    state = SgdState(momentum=schedule.momentum, lr=schedule.base_lr)
    record = record or RunRecord(stage=stage)
    best_state = net.state_dict() if record.best_epoch >= 0 else None
    n = len(images)
    dtype = np.dtype(config.dtype)
    images = images.astype(dtype, copy=False)
    for epoch in range(schedule.max_epochs):
        lr = lr_at_epoch(schedule, epoch)
        order = np.random.default_rng([config.seed, code, epoch_offset + epoch]).permutation(n)
        total_loss = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = images[idx]
            if augment:
                batch = np.stack([
                    apply_plan(images[i], sample_plan(
                        np.random.default_rng([config.seed, code, epoch_offset + epoch, int(i)]), config.bounds))
                    for i in idx
                ]).astype(dtype, copy=False)
            net.zero_grad()
            probs_b, probs_a = net.forward(batch)
            loss, grad_b, grad_a = 0.0, None, None
            if targets_b is not None:
                ce, g = ce_multiclass(targets_b[idx], probs_b, with_grad=True)
                loss += weights.lambda_b * ce
                grad_b = weights.lambda_b * g
            if targets_a is not None:
                bce, g = bce_multilabel(targets_a[idx], probs_a, with_grad=True)
                loss += weights.lambda_a * bce
                grad_a = weights.lambda_a * g
            net.backward(grad_b, grad_a)
            sgd_step(params, state, lr)
            total_loss += loss * len(idx)
        score = float(val_fn(net))
        record.train_loss.append(total_loss / n)
        record.val_score.append(score)
        record.lr.append(lr)
        if score > record.best_score:
            record.best_score = score
            record.best_epoch = len(record.val_score) - 1
            best_state = net.state_dict()
        log.info("%s epoch %d lr %.5f loss %.4f val %.4f", stage, epoch, lr, total_loss / n, score)
    last = net.copy()
    best = net.copy()
    best.load_state_dict(best_state)
    return TrainResult(best, last, record)


def _save(result: TrainResult, config: TrainConfig, stage: str) -> None:
    if not config.checkpoint_dir:
        return
    d = Path(config.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    result.net.save(d / f"{stage}_best.fmtk")
    result.last.save(d / f"{stage}_last.fmtk")
    result.record.checkpoints = {"best": f"{stage}_best.fmtk", "last": f"{stage}_last.fmtk"}
    result.record.save(d / f"{stage}_record.json")


# -- the four steps ---------------------------------------------------------------


def train_teacher(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Multilabel detail classifier trained with BCE and no augmentation."""
    train, val = _split_train_val(dataset, config)
    for part in (train, val):
        if not all(r.has_details for r in part.rows):
            raise DataError("teacher training requires detail labels on every row")
    backbone = config.backbone
    if config.teacher_widths:
        backbone = replace(backbone, widths=tuple(config.teacher_widths))
    net = MultiTaskNet.create(backbone, None, seed=config.seed, with_head_a=True, dtype=np.dtype(config.dtype))
    x_train = train.images()
    net.set_input_stats(x_train)
    x_val, y_val = val.images(), val.details()

    def val_fn(m):
        return detail_score(y_val, predict(m, x_val)[1])

    result = _fit(net, "teacher", x_train, None, train.details(), val_fn, config,
                  augment=False, weights=LossWeights(1.0, 0.0), record=RunRecord("teacher", metric="mean_detail_f1"))
    _save(result, config, "teacher")
    return result


def pseudo_label(teacher: MultiTaskNet, dataset: Dataset) -> Dataset:
    """Dataset with p_* columns set to the teacher's sigmoid outputs (all splits)."""
    if teacher.head_a is None:
        raise ValueError("teacher has no detail head")
    bad = []
    for r in dataset.rows:
        p = dataset.image_path(r)
        if not p.is_file():
            bad.append(str(p))
    if bad:
        raise DataError("unreadable images: " + ", ".join(bad))
    images = dataset.images()
    _, probs = predict(teacher, images)
    rows = [replace(r, pseudo=tuple(float(v) for v in p)) for r, p in zip(dataset.rows, probs)]
    return dataset.with_rows(rows)


def _overall_val_fn(val: Dataset):
    x_val, y_val = val.images(), val.overall()

    def val_fn(m):
        return overall_score(y_val, predict(m, x_val)[0], val.n_classes)

    return val_fn


def pretrain_student(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Single-task overall-quality model trained with cross-entropy."""
    train, val = _split_train_val(dataset, config)
    net = MultiTaskNet.create(config.backbone, dataset.n_classes, seed=config.seed, dtype=np.dtype(config.dtype))
    x_train = train.images()
    net.set_input_stats(x_train)
    result = _fit(net, "pretrain", x_train, one_hot(train.overall(), dataset.n_classes), None,
                  _overall_val_fn(val), config, augment=config.augment, weights=LossWeights(0.0, 1.0))
    _save(result, config, "pretrain")
    return result


def extend_st_baseline(st: TrainResult, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Continue single-task training from the last phase-one weights for another schedule.

    The learning rate restarts at its base value and momentum starts at
    zero. The returned record concatenates both phases, so its best epoch
    is the best over both.
    """
    train, val = _split_train_val(dataset, config)
    record = RunRecord(
        stage="extend",
        train_loss=list(st.record.train_loss),
        val_score=list(st.record.val_score),
        lr=list(st.record.lr),
        best_epoch=st.record.best_epoch,
        best_score=st.record.best_score,
    )
    net = st.last.copy()
    phase_one_best = st.net.state_dict()
    result = _fit(net, "extend", train.images(), one_hot(train.overall(), dataset.n_classes), None,
                  _overall_val_fn(val), config, augment=config.augment, weights=LossWeights(0.0, 1.0),
                  record=record, epoch_offset=len(st.record.val_score))
    if result.record.best_epoch < len(st.record.val_score):
        result.net.load_state_dict(phase_one_best)
    _save(result, config, "extend")
    return result


def _pseudo_targets(train: Dataset, config: TrainConfig) -> np.ndarray:
    if not all(r.has_pseudo for r in train.rows):
        raise DataError("fine-tuning requires pseudo-labels on every training row")
    y = train.pseudo()
    return (y >= 0.5).astype(np.float64) if config.hard_pseudo else y


def finetune_multitask(st_net: MultiTaskNet, dataset: Dataset, config: TrainConfig,
                       pseudo_override: np.ndarray | None = None, save_as: str | None = "finetune") -> TrainResult:
    """Attach the detail head and minimize the weighted BCE + CE objective.

    Model selection uses validation macro-F1 on overall quality only.
    ``pseudo_override`` replaces the train-split pseudo-label targets (the
    label-noise experiment); runs differing only in targets share their
    shuffling and augmentation streams. ``save_as`` names the checkpoint
    files (None skips saving).
    """
    if st_net.head_a is not None:
        raise ValueError("fine-tuning expects a single-task model")
    train, val = _split_train_val(dataset, config)
    if pseudo_override is None:
        targets_a = _pseudo_targets(train, config)
    else:
        targets_a = np.asarray(pseudo_override, dtype=np.float64)
        if targets_a.shape != (len(train), 3):
            raise ValueError(f"pseudo_override must have shape ({len(train)}, 3), got {targets_a.shape}")
    net = st_net.attach_head_a(config.seed)
    result = _fit(net, "finetune", train.images(), one_hot(train.overall(), dataset.n_classes), targets_a,
                  _overall_val_fn(val), config, augment=config.augment and config.augment_finetune,
                  weights=config.weights, record=RunRecord(stage=save_as or "tune"))
    if save_as:
        _save(result, config, save_as)
    return result


def tune_lambdas(grid, st_net: MultiTaskNet, dataset: Dataset, config: TrainConfig):
    """Grid search over (lambda_a, lambda_b) by validation macro-F1.

    Each point fine-tunes under a shortened schedule (``tune_epochs``).
    Ties go to the smaller lambda_a. Returns ``(best_point, scores)``.
    """
    grid = [tuple(float(v) for v in p) for p in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    short = replace(config, epochs=config.tune_epochs or config.epochs, checkpoint_dir=None)
    scores = {}
    for la, lb in grid:
        res = finetune_multitask(st_net, dataset, replace(short, lambda_a=la, lambda_b=lb), save_as=None)
        scores[(la, lb)] = res.record.best_score
    best = None
    for point in sorted(scores):
        if best is None or scores[point] > scores[best]:
            best = point
    return best, scores

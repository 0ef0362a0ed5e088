"""Command-line entry point: ``fmtk <command> [options]``.

Every option can also come from ``--config file.json`` (an object keyed by
option name, or a run manifest written by an earlier run). Precedence is
flags > config file > built-in defaults. Each successful run writes
``run_manifest.json`` into ``--out``; passing that file back via
``--config`` replays the run.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from fmtk import __version__
from fmtk.errors import DataError, ShapeError

log = logging.getLogger("fmtk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- option tables -------------------------------------------------------------------


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(","))


def _grid(text):
    # "0.25:1,0.5:1" or [[0.25, 1], [0.5, 1]]
    if isinstance(text, (list, tuple)):
        return tuple((float(a), float(b)) for a, b in text)
    pairs = []
    for item in str(text).split(","):
        a, _, b = item.partition(":")
        pairs.append((float(a), float(b or 1.0)))
    return tuple(pairs)


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _optional_int(v):
    return None if v is None or v == "" else int(v)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object = str
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


SEED = Opt("seed", int, 0, "seed for every random stream")
OUT = Opt("out", str, None, "output directory", required=True)
EPOCHS = Opt("epochs", _optional_int, None, "epochs per stage (default: the full 115-epoch schedule)")
BATCH = Opt("batch", int, 32, "minibatch size")
IMAGE_SIZE = Opt("image_size", int, 32, "model input size in pixels")
MANIFEST = Opt("manifest", str, None, "dataset manifest CSV", required=True)
MODEL = Opt("model", str, None, "model checkpoint (.fmtk)", required=True)
AUGMENT = Opt("augment", _bool, True, "bounded random augmentation during training")
THRESHOLD = Opt("threshold", float, 0.5, "detail probability threshold")
SPLIT = Opt("split", str, "test", "manifest split to use", choices=("train", "val", "test", "all"))

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-data": ("render a synthetic phantom dataset", [
        Opt("count", int, None, "number of images", required=True),
        Opt("style", str, "3class", "overall-quality label style", choices=("2class", "3class")),
        Opt("fractions", _floats, (0.8, 0.1, 0.1), "train,val,test fractions"),
        IMAGE_SIZE, SEED, OUT]),
    "train-teacher": ("train the detail (teacher) model", [
        MANIFEST, EPOCHS, BATCH, IMAGE_SIZE, Opt("holdout", float, 0.1, "validation holdout fraction"), SEED, OUT]),
    "pseudo-label": ("write teacher pseudo-labels into a manifest copy", [
        Opt("teacher", str, None, "teacher checkpoint", required=True), MANIFEST, IMAGE_SIZE, SEED, OUT]),
    "pretrain": ("train the single-task overall-quality model", [
        MANIFEST, EPOCHS, BATCH, IMAGE_SIZE, AUGMENT, Opt("holdout", float, 0.1, "validation holdout fraction"),
        SEED, OUT]),
    "finetune": ("fine-tune a single-task model into the multi-task model", [
        MODEL, MANIFEST, Opt("lambda_a", float, 1.0, "detail loss weight"),
        Opt("lambda_b", float, 1.0, "overall loss weight"),
        Opt("hard_pseudo", _bool, False, "threshold pseudo-labels at 0.5"),
        EPOCHS, BATCH, IMAGE_SIZE, AUGMENT, Opt("holdout", float, 0.1, "validation holdout fraction"), SEED, OUT]),
    "tune-lambdas": ("grid-search the loss weights", [
        MODEL, MANIFEST, Opt("grid", _grid, ((0.25, 1.0), (0.5, 1.0), (1.0, 1.0), (2.0, 1.0)),
                             "lambda_a:lambda_b pairs, comma separated"),
        Opt("tune_epochs", _optional_int, 10, "epochs per grid point"), Opt("hard_pseudo", _bool, False, ""),
        BATCH, IMAGE_SIZE, AUGMENT, Opt("holdout", float, 0.1, "validation holdout fraction"), SEED, OUT]),
    "evaluate": ("score a model on a labeled split", [MODEL, MANIFEST, SPLIT, THRESHOLD, IMAGE_SIZE, SEED, OUT]),
    "compare": ("paired comparison of two models on one split", [
        Opt("model_a", str, None, "first checkpoint", required=True),
        Opt("model_b", str, None, "second checkpoint", required=True),
        MANIFEST, SPLIT, THRESHOLD, IMAGE_SIZE, Opt("n_boot", int, 1000, "bootstrap replicates"),
        Opt("tail", str, "two", "alternative hypothesis for a vs b", choices=("two", "one", "greater", "less")),
        SEED, OUT]),
    "gradcam": ("GradCAM heatmap for one image", [
        MODEL, Opt("image", str, None, "PNG image", required=True),
        Opt("target", str, None, "B:<class> or A:<detail>; default: predicted class"),
        Opt("alpha", float, 0.4, "overlay opacity"), IMAGE_SIZE, SEED, OUT]),
    "export-embeddings": ("write shared embeddings as CSV", [
        MODEL, MANIFEST, Opt("split", str, "all", "manifest split", choices=("train", "val", "test", "all")),
        IMAGE_SIZE, SEED, OUT]),
    "benchmark": ("run the whole synthetic protocol over several seeds", [
        Opt("seeds", int, 5, "number of seeds"), SEED,
        Opt("epochs", int, 20, "epochs per stage (shortened schedule)"),
        Opt("batch", int, 8, "minibatch size"), IMAGE_SIZE,
        Opt("n_train", int, 600, ""), Opt("n_val", int, 60, ""), Opt("n_test", int, 200, ""),
        Opt("n_teacher", int, 300, "size of the teacher's detail-labeled set"),
        Opt("lambda_a", float, 1.0, "detail loss weight"), Opt("lambda_b", float, 1.0, "overall loss weight"),
        Opt("tune", _bool, False, "grid-search loss weights per seed"),
        Opt("tune_epochs", int, 5, "epochs per grid point"),
        Opt("n_boot", int, 1000, "bootstrap replicates"),
        Opt("gradcam_images", int, 50, "localization images per seed"),
        Opt("workers", int, 1, "worker processes (capped by FMTK_THREADS)"), OUT]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmtk", description="Fundus image quality toolkit: multi-task training on synthetic phantoms.")
    parser.add_argument("--version", action="version", version=f"fmtk {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config or run manifest; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for opt in opts:
            kw = {"dest": opt.name, "default": argparse.SUPPRESS, "help": opt.help or None}
            if opt.type is _bool:
                p.add_argument(opt.flag, action=argparse.BooleanOptionalAction, **kw)
            else:
                p.add_argument(opt.flag, type=opt.type, choices=opt.choices, **kw)
    return parser


# -- config resolution ---------------------------------------------------------------


def _read_config(path, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    if "command" in data and "config" in data:  # a run manifest
        if data["command"] != command:
            raise UsageError(f"run manifest is for '{data['command']}', not '{command}'")
        data = data["config"]
    return data


def resolve(command: str, flags: dict, config_path=None) -> dict:
    """Merge defaults, config file and flags (in increasing priority)."""
    opts = {o.name: o for o in COMMANDS[command][1]}
    resolved = {name: o.default for name, o in opts.items()}
    if config_path:
        from_file = _read_config(config_path, command)
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise DataError(f"unknown config keys for {command}: {unknown}")
        for k, v in from_file.items():
            o = opts[k]
            try:
                resolved[k] = None if v is None else o.type(v)
            except (TypeError, ValueError) as exc:
                raise DataError(f"config key {k}: {exc}") from None
            if o.choices and resolved[k] not in o.choices:
                raise DataError(f"config key {k}: {v!r} not in {list(o.choices)}")
    resolved.update(flags)
    missing = [opts[k].flag for k in opts if opts[k].required and resolved[k] is None]
    if missing:
        raise UsageError(f"fmtk {command}: missing required option(s): {', '.join(missing)}")
    return resolved


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": self.command,
            "config": {k: _jsonable(v) for k, v in self.config.items()},
            "seed": self.seed,
            "version": self.version,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "duration_s": self.duration_s,
        }
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1) + "\n")
        os.replace(tmp, path)
        return path


# -- commands ------------------------------------------------------------------------


def _train_config(cfg: dict, out: Path, **extra):
    from fmtk.model import BackboneConfig
    from fmtk.pipeline import TrainConfig

    return TrainConfig(
        epochs=cfg.get("epochs"),
        batch_size=cfg["batch"],
        seed=cfg["seed"],
        augment=cfg.get("augment", True),
        holdout_fraction=cfg.get("holdout", 0.1),
        backbone=BackboneConfig(input_size=cfg["image_size"]),
        checkpoint_dir=str(out),
        **extra,
    )


def _load_dataset(cfg: dict, split: str | None = None):
    from fmtk.dataio import load_manifest

    ds = load_manifest(cfg["manifest"], image_size=cfg["image_size"])
    if split and split != "all":
        ds = ds.split(split)
        if len(ds) == 0:
            raise DataError(f"manifest has no rows in split {split!r}")
    return ds


def _load_model(path, image_size: int):
    from fmtk.model import MultiTaskNet

    try:
        net = MultiTaskNet.load(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if net.config.input_size != image_size:
        raise DataError(f"checkpoint expects {net.config.input_size}px inputs, --image-size is {image_size}")
    return net


def cmd_gen_data(cfg, out: Path, run: RunManifest):
    from fmtk.phantom import generate_dataset

    path = generate_dataset(out, cfg["count"], cfg["style"], cfg["fractions"], seed=cfg["seed"], size=cfg["image_size"])
    run.outputs += [str(path), str(out / "dataset.json"), str(out / "images")]
    print(f"wrote {cfg['count']} images and {path}")


def cmd_train_teacher(cfg, out, run):
    from fmtk.pipeline import train_teacher

    run.inputs["manifest"] = cfg["manifest"]
    res = train_teacher(_load_dataset(cfg), _train_config(cfg, out))
    run.outputs += [str(out / f"teacher_{k}") for k in ("best.fmtk", "last.fmtk", "record.json")]
    print(f"teacher: best epoch {res.record.best_epoch}, validation mean detail F1 {res.record.best_score:.4f}")


def cmd_pseudo_label(cfg, out, run):
    from fmtk.dataio import write_manifest
    from fmtk.pipeline import pseudo_label

    run.inputs.update(teacher=cfg["teacher"], manifest=cfg["manifest"])
    teacher = _load_model(cfg["teacher"], cfg["image_size"])
    ds = pseudo_label(teacher, _load_dataset(cfg))
    path = write_manifest(ds, out / "manifest.csv")
    run.outputs.append(str(path))
    print(f"pseudo-labeled {len(ds)} rows -> {path}")


def cmd_pretrain(cfg, out, run):
    from fmtk.pipeline import pretrain_student

    run.inputs["manifest"] = cfg["manifest"]
    res = pretrain_student(_load_dataset(cfg), _train_config(cfg, out))
    run.outputs += [str(out / f"pretrain_{k}") for k in ("best.fmtk", "last.fmtk", "record.json")]
    print(f"pretrain: best epoch {res.record.best_epoch}, validation macro F1 {res.record.best_score:.4f}")


def cmd_finetune(cfg, out, run):
    from fmtk.pipeline import finetune_multitask

    run.inputs.update(model=cfg["model"], manifest=cfg["manifest"])
    st = _load_model(cfg["model"], cfg["image_size"])
    tc = _train_config(cfg, out, lambda_a=cfg["lambda_a"], lambda_b=cfg["lambda_b"], hard_pseudo=cfg["hard_pseudo"])
    res = finetune_multitask(st, _load_dataset(cfg), tc)
    run.outputs += [str(out / f"finetune_{k}") for k in ("best.fmtk", "last.fmtk", "record.json")]
    print(f"finetune: best epoch {res.record.best_epoch}, validation macro F1 {res.record.best_score:.4f}")


def cmd_tune_lambdas(cfg, out, run):
    from fmtk.evaluation.report import write_json
    from fmtk.pipeline import tune_lambdas

    run.inputs.update(model=cfg["model"], manifest=cfg["manifest"])
    st = _load_model(cfg["model"], cfg["image_size"])
    tc = _train_config(cfg, out, tune_epochs=cfg["tune_epochs"], hard_pseudo=cfg["hard_pseudo"])
    best, scores = tune_lambdas(cfg["grid"], st, _load_dataset(cfg), tc)
    doc = {"best": list(best), "scores": [{"lambda_a": a, "lambda_b": b, "val_macro_f1": v}
                                          for (a, b), v in sorted(scores.items())]}
    run.outputs.append(str(write_json(out / "lambdas.json", doc)))
    print(f"best lambda_a={best[0]} lambda_b={best[1]}")


def cmd_evaluate(cfg, out, run):
    from fmtk.evaluation.report import evaluate, write_confusion_csv, write_json
    from fmtk.phantom import CLASS_NAMES

    run.inputs.update(model=cfg["model"], manifest=cfg["manifest"])
    net = _load_model(cfg["model"], cfg["image_size"])
    ds = _load_dataset(cfg, cfg["split"])
    ev = evaluate(net, ds, Path(cfg["model"]).stem, cfg["threshold"])
    doc = ev.to_json()
    run.outputs.append(str(write_json(out / "evaluation.json", doc)))
    if ev.cm is not None:
        names = CLASS_NAMES[ds.style]
        run.outputs.append(str(write_confusion_csv(ev.cm, out / "confusion.csv", names)))
        run.outputs.append(str(write_confusion_csv(ev.cm, out / "confusion_normalized.csv", names, normalized=True)))
        print(f"overall: macro F1 {ev.report.macro_f1:.4f}, accuracy {ev.report.accuracy:.4f}, n={ev.n}")
    for name, m in doc.get("details", {}).items():
        if name != "threshold":
            print(f"{name}: F1 {m['f1']:.4f} Pr {m['precision']:.4f} Re {m['recall']:.4f}")


def cmd_compare(cfg, out, run):
    from fmtk.evaluation.report import compare_models, evaluate, format_comparison, write_json

    run.inputs.update(model_a=cfg["model_a"], model_b=cfg["model_b"], manifest=cfg["manifest"])
    ds = _load_dataset(cfg, cfg["split"])
    evs = [evaluate(_load_model(cfg[k], cfg["image_size"]), ds, Path(cfg[k]).stem, cfg["threshold"])
           for k in ("model_a", "model_b")]
    doc = compare_models(*evs, n_boot=cfg["n_boot"], seed=cfg["seed"], tail=cfg["tail"])
    run.outputs.append(str(write_json(out / "comparison.json", doc)))
    text = format_comparison(doc)
    (out / "comparison.txt").write_text(text)
    run.outputs.append(str(out / "comparison.txt"))
    print(text, end="")


def _parse_target(text):
    if text is None:
        return None
    task, sep, index = str(text).partition(":")
    if not sep:
        raise UsageError(f"--target must look like B:<class> or A:<detail>, got {text!r}")
    try:
        return task.upper(), int(index)
    except ValueError:
        raise UsageError(f"--target index must be an integer, got {index!r}") from None


def cmd_gradcam(cfg, out, run):
    from fmtk.dataio import fov_crop
    from fmtk.evaluation.report import write_json
    from fmtk.explain import gradcam, save_heatmap_csv, save_overlay_png
    from fmtk.imaging import read_png

    run.inputs.update(model=cfg["model"], image=cfg["image"])
    net = _load_model(cfg["model"], cfg["image_size"])
    try:
        image = fov_crop(read_png(cfg["image"]), cfg["image_size"])
    except OSError as exc:
        raise DataError(f"cannot read image {cfg['image']}: {exc}") from None
    try:
        hm = gradcam(net, image, _parse_target(cfg["target"]))
    except IndexError as exc:
        raise DataError(str(exc)) from None
    run.outputs.append(str(save_heatmap_csv(hm, out / "heatmap.csv")))
    run.outputs.append(str(save_overlay_png(image, hm, out / "overlay.png", cfg["alpha"])))
    run.outputs.append(str(write_json(out / "heatmap.json", {"target": list(hm.target), "shape": list(hm.shape),
                                                            "argmax": list(hm.argmax()), "raw_max": hm.raw_max})))
    print(f"target {hm.target[0]}:{hm.target[1]}, heatmap {hm.shape[0]}x{hm.shape[1]}, argmax {hm.argmax()}")


def cmd_export_embeddings(cfg, out, run):
    from fmtk.evaluation.report import export_embeddings

    run.inputs.update(model=cfg["model"], manifest=cfg["manifest"])
    net = _load_model(cfg["model"], cfg["image_size"])
    ds = _load_dataset(cfg, cfg["split"])
    path = export_embeddings(net, ds, out / "embeddings.csv")
    run.outputs.append(str(path))
    print(f"wrote {len(ds)} embeddings -> {path}")


def worker_cap(requested: int) -> int:
    """Requested worker count, capped by FMTK_THREADS when set."""
    env = os.environ.get("FMTK_THREADS")
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise DataError(f"FMTK_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise DataError("FMTK_THREADS must be >= 1")
        return max(1, min(requested, cap))
    return max(1, requested)


def cmd_benchmark(cfg, out, run):
    from fmtk.benchmark import BenchmarkConfig, format_summary, run_benchmark

    bc = BenchmarkConfig(
        seeds=cfg["seeds"], seed=cfg["seed"], n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        n_teacher=cfg["n_teacher"], image_size=cfg["image_size"], epochs=cfg["epochs"], batch_size=cfg["batch"],
        lambda_a=cfg["lambda_a"], lambda_b=cfg["lambda_b"], tune=cfg["tune"], tune_epochs=cfg["tune_epochs"],
        n_boot=cfg["n_boot"], gradcam_images=cfg["gradcam_images"],
    )
    bc = replace(bc, workers=worker_cap(cfg["workers"]))
    summary = run_benchmark(bc, out)
    run.outputs += [str(out / "report.json"), str(out / "report.txt")]
    print(format_summary(summary), end="")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "pseudo-label": cmd_pseudo_label,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "tune-lambdas": cmd_tune_lambdas,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gradcam": cmd_gradcam,
    "export-embeddings": cmd_export_embeddings,
    "benchmark": cmd_benchmark,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        ns = vars(parser.parse_args(argv))
        command = ns.pop("command")
        if command is None:
            raise UsageError(parser.format_help())
        config_path = ns.pop("config", None)
        verbose = ns.pop("verbose", False)
        if verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve(command, ns, config_path)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        run = RunManifest(command, cfg, cfg.get("seed", 0))
        t0 = time.perf_counter()
        HANDLERS[command](cfg, out, run)
        run.duration_s = round(time.perf_counter() - t0, 3)
        run.write(out)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, ValueError, IndexError, OSError) as exc:
        print(f"fmtk: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("internal error", exc_info=True)
        print(f"fmtk: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())

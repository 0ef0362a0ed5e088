"""CSV manifests, image loading with FOV cropping, and stratified holdout splits.

Manifest columns (UTF-8, comma separated, header required)::

    image,split,overall,illum,clarity,contrast,p_illum,p_clarity,p_contrast

``image`` is a path relative to the manifest's directory. ``split`` is one of
train/val/test. Label columns may be empty. Detail labels are 1 (good) or
0 (bad); pseudo-label columns hold probabilities in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fmtk.errors import DataError
from fmtk.imaging import read_png, resize_bilinear

HEADER = ("image", "split", "overall", "illum", "clarity", "contrast", "p_illum", "p_clarity", "p_contrast")
SPLITS = ("train", "val", "test")
N_CLASSES = {"2class": 2, "3class": 3}
FOV_THRESHOLD = 0.02


@dataclass(frozen=True)
class ManifestRow:
    image: str
    split: str
    overall: int | None = None
    details: tuple = (None, None, None)
    pseudo: tuple = (None, None, None)

    @property
    def has_details(self) -> bool:
        return all(d is not None for d in self.details)

    @property
    def has_pseudo(self) -> bool:
        return all(p is not None for p in self.pseudo)


@dataclass(frozen=True)
class Dataset:
    rows: tuple[ManifestRow, ...]
    style: str = "3class"
    image_size: int = 32
    root: Path = field(default=Path("."), compare=False)
    fov_threshold: float = field(default=FOV_THRESHOLD, compare=False)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_classes(self) -> int:
        return N_CLASSES[self.style]

    def with_rows(self, rows) -> "Dataset":
        # Keep the pixel cache when rows only lose or gain label columns.
        return replace(self, rows=tuple(rows), _cache=self._cache)

    def split(self, tag: str) -> "Dataset":
        return self.with_rows(r for r in self.rows if r.split == tag)

    def image_path(self, row: ManifestRow) -> Path:
        return self.root / row.image

    def images(self, dtype=np.float64) -> np.ndarray:
        """Preprocessed (FOV-cropped, resized) images, shape (N, S, S, 3)."""
        out = np.empty((len(self.rows), self.image_size, self.image_size, 3), dtype=dtype)
        for i, row in enumerate(self.rows):
            key = str(self.image_path(row))
            img = self._cache.get(key)
            if img is None:
                try:
                    raw = read_png(self.image_path(row))
                except (OSError, ValueError) as exc:
                    raise DataError(f"cannot read image {key}: {exc}") from exc
                img = fov_crop(raw, self.image_size, self.fov_threshold)
                self._cache[key] = img
            out[i] = img
        return out

    def overall(self) -> np.ndarray:
        if any(r.overall is None for r in self.rows):
            raise DataError("dataset has rows without an overall label")
        return np.array([r.overall for r in self.rows], dtype=np.int64)

    def details(self) -> np.ndarray:
        if not all(r.has_details for r in self.rows):
            raise DataError("dataset has rows without detail labels")
        return np.array([r.details for r in self.rows], dtype=np.float64).reshape(-1, 3)

    def pseudo(self) -> np.ndarray:
        if not all(r.has_pseudo for r in self.rows):
            raise DataError("dataset has rows without pseudo-labels")
        return np.array([r.pseudo for r in self.rows], dtype=np.float64).reshape(-1, 3)


# -- manifest I/O ---------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dest = path.parent.resolve()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in dataset.rows:
            src = (dataset.root / r.image).resolve()
            rel = os.path.relpath(src, dest).replace(os.sep, "/")
            w.writerow([rel, r.split, _fmt(r.overall), *(_fmt(d) for d in r.details), *(_fmt(p) for p in r.pseudo)])
    os.replace(tmp, path)
    return path


def _read_style(manifest: Path) -> str | None:
    meta = manifest.parent / "dataset.json"
    if meta.exists():
        try:
            return json.loads(meta.read_text()).get("style")
        except (OSError, ValueError):
            return None
    return None


def load_manifest(path, style: str | None = None, image_size: int = 32, check_files: bool = True,
                  fov_threshold: float = FOV_THRESHOLD) -> Dataset:
    """Parse and validate a manifest.

    ``style`` defaults to the ``dataset.json`` written next to generated
    manifests, else ``3class``. Errors name the offending line (header is
    line 1).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    style = style or _read_style(path) or "3class"
    if style not in N_CLASSES:
        raise DataError(f"unknown style {style!r}")
    n_classes = N_CLASSES[style]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise DataError(f"{path}: bad header, expected {','.join(HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(HEADER):
                raise DataError(f"{path} line {lineno}: expected {len(HEADER)} columns, got {len(rec)}")
            rows.append(_parse_row(rec, lineno, path, n_classes))
    ds = Dataset(rows=tuple(rows), style=style, image_size=image_size, root=path.parent,
                 fov_threshold=fov_threshold)
    if check_files:
        for lineno, r in enumerate(ds.rows, start=2):
            if not ds.image_path(r).is_file():
                raise DataError(f"{path} line {lineno}: image file missing: {r.image}")
    return ds


def _parse_row(rec, lineno, path, n_classes) -> ManifestRow:
    where = f"{path} line {lineno}"
    image, split = rec[0].strip(), rec[1].strip()
    if not image:
        raise DataError(f"{where}: empty image path")
    if split not in SPLITS:
        raise DataError(f"{where}: unknown split tag {split!r}")

    def as_int(s, lo, hi, col):
        s = s.strip()
        if s == "":
            return None
        try:
            v = int(s)
        except ValueError:
            raise DataError(f"{where}: column {col} is not an integer: {s!r}") from None
        if not lo <= v <= hi:
            raise DataError(f"{where}: column {col} value {v} out of range [{lo}, {hi}]")
        return v

    def as_prob(s, col):
        s = s.strip()
        if s == "":
            return None
        try:
            v = float(s)
        except ValueError:
            raise DataError(f"{where}: column {col} is not a number: {s!r}") from None
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise DataError(f"{where}: column {col} value {v} outside [0, 1]")
        return v

    overall = as_int(rec[2], 0, n_classes - 1, "overall")
    details = tuple(as_int(rec[3 + j], 0, 1, HEADER[3 + j]) for j in range(3))
    pseudo = tuple(as_prob(rec[6 + j], HEADER[6 + j]) for j in range(3))
    return ManifestRow(image=image, split=split, overall=overall, details=details, pseudo=pseudo)


# -- preprocessing --------------------------------------------------------------


def fov_bbox(image: np.ndarray, threshold: float = FOV_THRESHOLD):
    """(top, bottom, left, right) of pixels whose max channel exceeds ``threshold``; bounds exclusive."""
    img = np.asarray(image)
    bright = img.max(axis=2) > threshold if img.ndim == 3 else img > threshold
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    if rows.size == 0:
        raise DataError("no FOV detected")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def fov_crop(image: np.ndarray, size: int | None = None, threshold: float = FOV_THRESHOLD) -> np.ndarray:
    """Crop to the FOV bounding box, pad to a square with black, resize to ``size``."""
    img = np.asarray(image, dtype=np.float64)
    top, bottom, left, right = fov_bbox(img, threshold)
    img = img[top:bottom, left:right]
    h, w = img.shape[:2]
    side = max(h, w)
    pad_h, pad_w = side - h, side - w
    pads = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)] + [(0, 0)] * (img.ndim - 2)
    img = np.pad(img, pads)
    if size is not None:
        img = resize_bilinear(img, size)
    return img


def _apportion(sizes, fraction) -> list[int]:
    # Largest-remainder split of round(fraction * total) across groups, each
    # getting floor or ceil of its exact quota and at least one row.
    quotas = [fraction * n for n in sizes]
    total = max(len(sizes), int(math.floor(fraction * sum(sizes) + 0.5)))
    counts = [max(1, int(math.floor(q))) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    for i in order:
        if sum(counts) >= total:
            break
        if counts[i] < sizes[i] - 1 and counts[i] < math.ceil(quotas[i]):
            counts[i] += 1
    return counts


def split_holdout(dataset: Dataset, fraction: float, seed: int):
    """Stratified holdout of the train rows: returns ``(train, val)``.

    ``round(fraction * n)`` rows go to validation, shared among the
    overall-label classes in proportion to their size (largest remainder,
    at least one per class). Rows without an overall label are stratified
    as their own group.
    """
    if not 0 < fraction <= 0.5:
        raise ValueError(f"fraction must lie in (0, 0.5], got {fraction}")
    train_rows = [r for r in dataset.rows if r.split == "train"]
    if len(train_rows) < 10:
        raise DataError(f"need at least 10 train rows for a holdout, got {len(train_rows)}")
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(train_rows):
        groups.setdefault(-1 if r.overall is None else r.overall, []).append(i)
    keys = sorted(groups)
    for key in keys:
        if len(groups[key]) < 2:
            raise DataError(f"class {key} has a single sample; use a larger dataset for a stratified holdout")
    counts = _apportion([len(groups[k]) for k in keys], fraction)
    rng = np.random.default_rng([seed, 505])
    held = set()
    for key, k in zip(keys, counts):
        idx = groups[key]
        picks = rng.permutation(len(idx))[:k]
        held.update(idx[p] for p in picks)
    train = [replace(r, split="train") for i, r in enumerate(train_rows) if i not in held]
    val = [replace(r, split="val") for i, r in enumerate(train_rows) if i in held]
    return dataset.with_rows(train), dataset.with_rows(val)

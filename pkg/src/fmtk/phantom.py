"""Procedural synthetic fundus images with controlled capture defects.

Each phantom is an orange circular field of view (FOV) on black, with a
bright optic disc, a darker fovea and a branching vessel tree. Three defect
severities in [0, 1] are then applied (illumination, clarity, contrast) and
the quality labels are derived from the severities, so every image carries
oracle labels for both the detail task and the overall-quality task.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from fmtk.imaging import write_png

MIN_SIZE, MAX_SIZE = 16, 128

# Label oracle thresholds on severity.
DETAIL_BAD_AT = 0.5
GOOD_BELOW = 0.35
REJECT_AT = 0.65

# Severity mixture used by generate_dataset: a pristine component where all
# three severities are small, otherwise independent uniform severities.
MIXTURE = {"pristine_prob": 0.4, "pristine_max": 0.1}

STYLES = ("2class", "3class")
CLASS_NAMES = {"3class": ("reject", "usable", "good"), "2class": ("bad", "good")}


@dataclass(frozen=True)
class PhantomLayout:
    """Image size, seed and anatomy. Coordinates are pixels, origin top-left."""

    size: int
    seed: int
    disc_center: tuple[float, float]
    disc_radius: float
    fovea_center: tuple[float, float]
    fovea_radius: float
    n_branches: int = 4
    vessel_width: float = 1.0

    @property
    def fov_radius(self) -> float:
        return self.size / 2.0

    @property
    def fov_center(self) -> tuple[float, float]:
        return (self.size / 2.0, self.size / 2.0)

    def validate(self) -> None:
        if not MIN_SIZE <= self.size <= MAX_SIZE:
            raise ValueError(f"image size must lie in [{MIN_SIZE}, {MAX_SIZE}], got {self.size}")
        cx, cy = self.fov_center
        r = self.fov_radius
        if self.disc_radius >= r / 4:
            raise ValueError("disc radius must be below a quarter of the FOV radius")
        for (x, y), rad in ((self.disc_center, self.disc_radius), (self.fovea_center, self.fovea_radius)):
            if math.hypot(x - cx, y - cy) + rad > r:
                raise ValueError("disc and fovea must lie inside the FOV")

    @classmethod
    def random(cls, size: int, seed: int) -> "PhantomLayout":
        """Draw plausible anatomy: disc and fovea on opposite sides of centre."""
        rng = np.random.default_rng([seed, 101])
        r = size / 2.0
        side = rng.choice([-1.0, 1.0])
        tilt = rng.uniform(-0.15, 0.15) * r
        disc = (r + side * rng.uniform(0.28, 0.4) * r, r + tilt)
        fovea = (r - side * rng.uniform(0.15, 0.25) * r, r - 0.5 * tilt)
        return cls(
            size=size,
            seed=seed,
            disc_center=disc,
            disc_radius=rng.uniform(0.13, 0.2) * r,
            fovea_center=fovea,
            fovea_radius=rng.uniform(0.12, 0.18) * r,
            n_branches=int(rng.integers(3, 7)),
            vessel_width=max(0.8, size / 32.0) * rng.uniform(0.8, 1.2),
        )


@dataclass(frozen=True)
class DefectSeverities:
    illumination: float = 0.0
    clarity: float = 0.0
    contrast: float = 0.0
    artifact_mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for v in self.values:
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"severities must be finite and within [0, 1], got {self.values}")

    @property
    def values(self) -> tuple[float, float, float]:
        return (self.illumination, self.clarity, self.contrast)


@dataclass(frozen=True)
class OracleLabels:
    details: tuple[int, int, int]  # 1 = good, 0 = bad
    overall: int
    style: str


def _grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # xx, yy


def fov_mask(size: int) -> np.ndarray:
    xx, yy = _grid(size)
    r = size / 2.0
    return (xx - r) ** 2 + (yy - r) ** 2 <= r * r


def _segment_distance(xx, yy, p, q):
    px, py = p
    dx, dy = q[0] - px, q[1] - py
    L2 = dx * dx + dy * dy
    t = np.clip(((xx - px) * dx + (yy - py) * dy) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(xx - (px + t * dx), yy - (py + t * dy))


def _vessel_tree(layout: PhantomLayout, rng: np.random.Generator):
    """Polyline segments growing out of the disc, each branch forking once."""
    r = layout.fov_radius
    cx, cy = layout.fov_center
    step = r / 6.0
    segments = []
    stack = []
    base = rng.uniform(0, 2 * np.pi)
    for b in range(layout.n_branches):
        ang = base + 2 * np.pi * b / layout.n_branches + rng.uniform(-0.3, 0.3)
        stack.append((layout.disc_center, ang, 1.0, 0))
    while stack:
        (x, y), ang, width, depth = stack.pop()
        for k in range(9 - 3 * depth):
            ang += rng.normal(0, 0.25)
            nx, ny = x + step * np.cos(ang), y + step * np.sin(ang)
            if math.hypot(nx - cx, ny - cy) > r * 0.97:
                break
            segments.append(((x, y), (nx, ny), width))
            x, y = nx, ny
            if depth == 0 and k == 2:
                stack.append(((x, y), ang + rng.choice([-1, 1]) * rng.uniform(0.5, 0.9), 0.7, 1))
    return segments


def generate_clean(layout: PhantomLayout) -> np.ndarray:
    """Render an (H, W, 3) defect-free phantom in [0, 1]; deterministic in the seed."""
    layout.validate()
    n = layout.size
    rng = np.random.default_rng([layout.seed, 202])
    xx, yy = _grid(n)
    cx, cy = layout.fov_center
    r = layout.fov_radius
    rho = np.hypot(xx - cx, yy - cy) / r
    fov = fov_mask(n)

    base = np.array([0.85, 0.45, 0.2]) * rng.uniform(0.85, 1.1, size=3)
    shade = 1.0 - 0.35 * rho**2
    img = shade[..., None] * base

    # optic disc: soft-edged bright ellipse
    dx, dy = layout.disc_center
    aspect = rng.uniform(0.85, 1.0)
    d = np.hypot((xx - dx) / aspect, yy - dy) / layout.disc_radius
    a = np.clip(1.5 - d, 0.0, 1.0)[..., None]
    img = (1 - a) * img + a * np.array([0.98, 0.9, 0.6])

    # fovea: darker blob
    fx, fy = layout.fovea_center
    d = np.hypot(xx - fx, yy - fy) / layout.fovea_radius
    a = np.clip(1.5 - d, 0.0, 1.0)[..., None]
    img = img * (1 - 0.4 * a)

    # vessels: darkening along polylines, anti-aliased over one pixel
    vess = np.zeros((n, n))
    for p, q, wscale in _vessel_tree(layout, rng):
        half = 0.5 * layout.vessel_width * wscale
        dist = _segment_distance(xx, yy, p, q)
        vess = np.maximum(vess, np.clip(half + 0.5 - dist, 0.0, 1.0))
    img = img * (1 - vess[..., None] * np.array([0.45, 0.6, 0.5]))

    img = np.clip(img, 0.01, 1.0)
    img[~fov] = 0.0
    return img


def _box_kernel(radius: float) -> np.ndarray:
    # Box of half-width floor(radius) plus fractional end taps, so the blur
    # strength grows continuously with the radius.
    full = int(np.floor(radius))
    frac = radius - full
    k = np.ones(2 * full + 3)
    k[0] = k[-1] = frac
    return k / k.sum()


def degrade(image: np.ndarray, severities: DefectSeverities, seed: int):
    """Apply the three defects; return ``(degraded, artifact_mask)``.

    * illumination ``s``: an elliptical bright or dark patch of opacity ``s``
      inside the FOV, then a global gain of ``1 - 0.4 s``;
    * clarity ``s``: separable box blur of radius ``s * size / 16`` (fractional
      radii weight the outermost taps);
    * contrast ``s``: every channel compressed toward its mean by
      ``1 - 0.8 s``.

    The FOV is taken as the pixels with any non-zero channel. Output is
    clamped to [0, 1]; with all severities zero the input comes back
    bit-for-bit.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    s_ill, s_cla, s_con = severities.values
    n = image.shape[0]
    mask = np.zeros(image.shape[:2], dtype=bool)
    out = image.copy()
    if s_ill == s_cla == s_con == 0:
        return out, mask

    rng = np.random.default_rng([seed, 303])
    if s_ill > 0:
        fov = image.max(axis=2) > 0
        xx, yy = _grid(n)
        r = n / 2.0
        ang, rad = rng.uniform(0, 2 * np.pi), r * np.sqrt(rng.uniform(0, 0.36))
        ex, ey = r + rad * np.cos(ang), r + rad * np.sin(ang)
        a_ax, b_ax = rng.uniform(0.22, 0.34, size=2) * r
        phi = rng.uniform(0, np.pi)
        u = (xx - ex) * np.cos(phi) + (yy - ey) * np.sin(phi)
        v = -(xx - ex) * np.sin(phi) + (yy - ey) * np.cos(phi)
        mask = ((u / a_ax) ** 2 + (v / b_ax) ** 2 <= 1.0) & fov
        target = np.array([1.0, 0.95, 0.85]) if rng.random() < 0.5 else np.array([0.02, 0.01, 0.01])
        out[mask] = (1 - s_ill) * out[mask] + s_ill * target
        out *= 1.0 - 0.4 * s_ill
    if s_cla > 0:
        k = _box_kernel(s_cla * n / 16.0)
        out = convolve1d(out, k, axis=0, mode="nearest")
        out = convolve1d(out, k, axis=1, mode="nearest")
    if s_con > 0:
        m = out.mean(axis=(0, 1), keepdims=True)
        out = m + (1.0 - 0.8 * s_con) * (out - m)
    return np.clip(out, 0.0, 1.0), mask


def derive_labels(severities: DefectSeverities, style: str = "3class") -> OracleLabels:
    """Threshold severities into detail labels (1 good / 0 bad) and an overall grade.

    3-class grades are 0 reject / 1 usable / 2 good; 2-class are 0 bad / 1 good.
    """
    if style not in STYLES:
        raise ValueError(f"unknown label style {style!r}")
    vals = severities.values
    details = tuple(0 if s >= DETAIL_BAD_AT else 1 for s in vals)
    worst = max(vals)
    if style == "3class":
        overall = 2 if worst < GOOD_BELOW else (0 if worst >= REJECT_AT else 1)
    else:
        overall = 0 if worst >= DETAIL_BAD_AT else 1
    return OracleLabels(details=details, overall=overall, style=style)


def sample_severities(rng: np.random.Generator, mixture: dict = MIXTURE) -> DefectSeverities:
    if rng.random() < mixture["pristine_prob"]:
        vals = rng.uniform(0.0, mixture["pristine_max"], size=3)
    else:
        vals = rng.uniform(0.0, 1.0, size=3)
    return DefectSeverities(*(float(v) for v in vals))


@dataclass
class Sample:
    image: np.ndarray
    clean: np.ndarray
    severities: DefectSeverities
    labels: OracleLabels
    layout: PhantomLayout


def render_sample(index: int, seed: int, size: int = 32, style: str = "3class",
                  severities: DefectSeverities | None = None) -> Sample:
    """Render sample ``index`` of the stream keyed by ``seed``.

    Each sample draws from its own generator seeded by ``(seed, index)``, so
    rendering order and parallelism never change the output.
    """
    rng = np.random.default_rng([seed, index])
    sev = sample_severities(rng) if severities is None else severities
    layout = PhantomLayout.random(size, int(rng.integers(2**31)))
    clean = generate_clean(layout)
    degraded, mask = degrade(clean, sev, int(rng.integers(2**31)))
    sev = DefectSeverities(*sev.values, artifact_mask=mask)
    return Sample(degraded, clean, sev, derive_labels(sev, style), layout)


def _split_counts(count: int, fractions) -> list[int]:
    raw = [count * f for f in fractions]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: -(raw[i] - counts[i]))
    for i in order[: count - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(labels, fractions, seed: int) -> list[str]:
    """Stratified split tags with exact per-split totals.

    Samples are ordered by class (shuffled within class) and dealt to the
    split with the largest quota deficit, which keeps every class spread
    across splits in proportion to the fractions.
    """
    names = ("train", "val", "test")
    counts = _split_counts(len(labels), fractions)
    rng = np.random.default_rng([seed, 404])
    labels = np.asarray(labels)
    order = np.lexsort((rng.permutation(len(labels)), labels))
    total = len(labels)
    assigned = [0] * len(counts)
    tags = [""] * total
    for pos, idx in enumerate(order):
        deficits = [counts[j] * (pos + 1) / total - assigned[j] if assigned[j] < counts[j] else -np.inf
                    for j in range(len(counts))]
        j = int(np.argmax(deficits))
        assigned[j] += 1
        tags[idx] = names[j]
    return tags


def generate_dataset(out_dir, count: int, style: str = "3class", fractions=(0.8, 0.1, 0.1),
                     seed: int = 0, size: int = 32):
    """Render ``count`` phantoms, write PNGs plus ``manifest.csv``; return the manifest path."""
    from fmtk.dataio import Dataset, ManifestRow, write_manifest

    if count < 10:
        raise ValueError("count must be at least 10")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    if style not in STYLES:
        raise ValueError(f"unknown label style {style!r}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to output directory {out_dir}: {exc}") from exc

    samples = [render_sample(i, seed, size, style) for i in range(count)]
    tags = assign_splits([s.labels.overall for s in samples], fractions, seed)
    rows = []
    for i, (smp, tag) in enumerate(zip(samples, tags)):
        rel = f"images/img_{i:05d}.png"
        write_png(out_dir / rel, smp.image)
        rows.append(ManifestRow(image=rel, split=tag, overall=smp.labels.overall,
                                details=smp.labels.details, pseudo=(None, None, None)))
    ds = Dataset(rows=tuple(rows), style=style, image_size=size, root=out_dir)
    manifest = out_dir / "manifest.csv"
    write_manifest(ds, manifest)
    meta = {"style": style, "count": count, "seed": seed, "size": size,
            "fractions": list(fractions), "mixture": MIXTURE,
            "severities": [list(s.severities.values) for s in samples]}
    (out_dir / "dataset.json").write_text(json.dumps(meta, indent=1))
    return manifest

"""Bounded RandAugment-style augmentation.

A plan holds 0-7 mild transforms drawn with replacement; strengths come
from fixed intervals chosen so that no transform can change a quality label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import rotate

KINDS = ("rotate", "hflip", "vflip", "brightness", "saturation", "channel_mix")


@dataclass(frozen=True)
class AugmentBounds:
    max_ops: int = 7
    rotate_deg: float = 15.0
    brightness: float = 0.1
    saturation: float = 0.1
    channel_mix: float = 0.05

    def interval(self, kind: str) -> tuple[float, float]:
        return {
            "rotate": (-self.rotate_deg, self.rotate_deg),
            "hflip": (0.0, 0.0),
            "vflip": (0.0, 0.0),
            "brightness": (-self.brightness, self.brightness),
            "saturation": (1.0 - self.saturation, 1.0 + self.saturation),
            "channel_mix": (0.0, self.channel_mix),
        }[kind]

    def to_json(self) -> dict:
        return asdict(self)


DEFAULT_BOUNDS = AugmentBounds()


@dataclass(frozen=True)
class AugmentPlan:
    ops: tuple[tuple[str, float], ...] = ()

    def __len__(self) -> int:
        return len(self.ops)


class _CallCounter:
    """Counts apply_plan invocations; lets tests prove a code path never augments."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


CALLS = _CallCounter()


def sample_plan(rng: np.random.Generator, bounds: AugmentBounds = DEFAULT_BOUNDS) -> AugmentPlan:
    n = int(rng.integers(0, bounds.max_ops + 1))
    ops = []
    for _ in range(n):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        lo, hi = bounds.interval(kind)
        ops.append((kind, float(rng.uniform(lo, hi)) if hi > lo else 0.0))
    return AugmentPlan(tuple(ops))


def _apply_one(img: np.ndarray, kind: str, strength: float) -> np.ndarray:
    if kind == "hflip":
        return img[:, ::-1]
    if kind == "vflip":
        return img[::-1]
    if kind == "rotate":
        if strength == 0.0:
            return img
        return rotate(img, strength, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    if kind == "brightness":
        return img + strength
    if kind == "saturation":
        gray = img.mean(axis=2, keepdims=True)
        return gray + strength * (img - gray)
    if kind == "channel_mix":
        return (1.0 - strength) * img + strength * img[..., [1, 2, 0]]
    raise ValueError(f"unknown transform {kind!r}")


def apply_plan(image: np.ndarray, plan: AugmentPlan) -> np.ndarray:
    """Apply ``plan`` in order; the result is clamped to [0, 1] after each step."""
    CALLS.count += 1
    if not plan.ops:
        return image
    out = np.asarray(image, dtype=np.float64)
    for kind, strength in plan.ops:
        out = np.clip(_apply_one(out, kind, strength), 0.0, 1.0)
    return np.ascontiguousarray(out)

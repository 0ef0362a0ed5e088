"""Training losses and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 1.0
    lambda_b: float = 1.0

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_b < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_a == 0 and self.lambda_b == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.01
    milestones: tuple[int, ...] = (30, 60, 80)
    max_epochs: int = 115
    momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] < 1 or ms[-1] >= self.max_epochs):
            raise ValueError("milestones must lie in [1, max_epochs)")
        if self.base_lr <= 0 or self.max_epochs < 1:
            raise ValueError("base_lr must be positive and max_epochs >= 1")

    def shortened(self, max_epochs: int) -> "Schedule":
        """Same shape compressed to ``max_epochs``: milestones scale proportionally.

        Milestones that collide after rounding are merged, and any that would
        land at or beyond the end are dropped.
        """
        if max_epochs == self.max_epochs:
            return self
        scaled = []
        for m in self.milestones:
            s = max(1, round(m * max_epochs / self.max_epochs))
            if s < max_epochs and (not scaled or s > scaled[-1]):
                scaled.append(s)
        return Schedule(self.base_lr, tuple(scaled), max_epochs, self.momentum)

    def to_json(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    """Learning rate for ``epoch``; a halving takes effect AT each milestone."""
    if not 0 <= epoch < schedule.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.max_epochs})")
    n = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * 2.0 ** (-n)


def _check_same_shape(targets, probs):
    targets = np.asarray(targets, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if targets.shape != probs.shape or targets.ndim != 2:
        raise ValueError(f"targets {targets.shape} and probs {probs.shape} must be matching 2-D arrays")
    return targets, probs


def bce_multilabel(targets, probs, with_grad: bool = False):
    """Binary cross-entropy summed over labels and averaged over samples.

    Accepts soft targets in [0, 1]. Probabilities are clamped to
    ``[1e-7, 1 - 1e-7]`` before the logs; the returned gradient (w.r.t.
    ``probs``) is zero where the clamp is active.
    """
    y, p = _check_same_shape(targets, probs)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n
    if not with_grad:
        return float(loss)
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    grad[(p < PROB_EPS) | (p > 1.0 - PROB_EPS)] = 0.0
    return float(loss), grad


def ce_multiclass(targets, probs, with_grad: bool = False):
    """Categorical cross-entropy against one-hot targets, averaged over samples."""
    y, p = _check_same_shape(targets, probs)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.sum(y * np.log(pc)) / n
    if not with_grad:
        return float(loss)
    grad = -(y / pc) / n
    grad[(p < PROB_EPS) | (p > 1.0 - PROB_EPS)] = 0.0
    return float(loss), grad


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def multitask_loss(weights: LossWeights, bce: float | None, ce: float) -> float:
    if weights.lambda_a > 0 and bce is None:
        raise ValueError("lambda_a > 0 requires a detail (BCE) loss value")
    total = weights.lambda_b * ce
    if weights.lambda_a > 0:
        total += weights.lambda_a * bce
    return float(total)

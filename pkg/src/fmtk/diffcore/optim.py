"""SGD with classic momentum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fmtk.diffcore.tensor import Tensor


@dataclass
class SgdState:
    momentum: float = 0.9
    lr: float = 0.01
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], state: SgdState, lr: float) -> None:
    """One momentum update: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Velocities start at zero and are keyed by parameter name.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameter(s): {', '.join(missing)}")
    state.lr = lr
    for name, t in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        elif v.shape != t.data.shape:
            raise ValueError(f"velocity shape {v.shape} != parameter shape {t.data.shape} for {name}")
        v = state.momentum * v + t.grad
        state.velocity[name] = v
        t.data -= lr * v

"""GradCAM heatmaps from the last backbone feature map.

For a target logit ``y`` and feature map ``A`` (h, w, k) taken right before
global pooling, channel weights are ``w_k = mean_ij dy/dA_ijk`` and the map
is ``relu(sum_k w_k A_k)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fmtk.imaging import resize_bilinear, write_png
from fmtk.model import N_DETAILS, MultiTaskNet

TASKS = ("B", "A")


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (h, w), non-negative
    normalized: bool
    target: tuple[str, int]  # ("B", class) or ("A", detail)
    raw_max: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def argmax(self) -> tuple[int, int]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.values), self.values.shape))


def cam(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Raw GradCAM map from ``(h, w, k)`` activations and their gradients."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {a.shape} and gradients {g.shape} must be matching (h, w, k) arrays")
    weights = g.mean(axis=(0, 1))
    return np.maximum(a @ weights, 0.0)


def max_normalize(raw: np.ndarray) -> np.ndarray:
    m = float(raw.max()) if raw.size else 0.0
    return raw / m if m > 0 else np.zeros_like(raw)


def _parse_target(net: MultiTaskNet, target) -> tuple[str, int]:
    task, index = target
    task = str(task).upper()
    if task not in TASKS:
        raise ValueError(f"target task must be 'A' or 'B', got {task!r}")
    if task == "B":
        if net.head_b is None:
            raise ValueError("model has no overall-quality head")
        limit = net.n_classes
    else:
        if net.head_a is None:
            raise ValueError("model has no detail head")
        limit = N_DETAILS
    index = int(index)
    if not 0 <= index < limit:
        raise IndexError(f"target index {index} out of range for head {task} with {limit} outputs")
    return task, index


def default_target(net: MultiTaskNet, image: np.ndarray) -> tuple[str, int]:
    """The predicted overall class, or the worst-scored detail for a detail-only model."""
    probs_b, probs_a = net.forward(np.asarray(image)[None])
    if probs_b is not None:
        return "B", int(np.argmax(probs_b[0]))
    return "A", int(np.argmin(probs_a[0]))


def gradcam(net: MultiTaskNet, image: np.ndarray, target=None, normalize: bool = True,
            grad_scale: float = 1.0) -> Heatmap:
    """Heatmap for one ``(S, S, 3)`` image and target ``("B", c)`` or ``("A", j)``.

    The target is the pre-activation logit. Work happens on a private copy,
    so the caller's parameters and gradients are untouched. ``grad_scale``
    multiplies the upstream gradient (a positive scale leaves the
    normalized map unchanged).
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a single (S, S, 3) image, got shape {image.shape}")
    target = default_target(net, image) if target is None else target
    task, index = _parse_target(net, target)
    net = net.copy()
    backbone = net.backbone
    if backbone.final_conv is None:
        raise ValueError("backbone exposes no final feature map")
    z = net.forward_shared(image[None])
    head = net.head_b if task == "B" else net.head_a
    head.forward(z)
    g = np.zeros((1, head.node("logits").shape[0]), dtype=net.dtype)
    g[0, index] = grad_scale
    dz = head.backward(g, start="logits")
    backbone.backward(dz, need_input_grad=False)
    acts = backbone.values[backbone.final_conv][0]
    grads = backbone.grads.get(backbone.final_conv)
    grads = np.zeros_like(acts) if grads is None else grads[0]
    raw = cam(acts, grads)
    values = max_normalize(raw) if normalize else raw
    return Heatmap(values, normalize, (task, index), float(raw.max()))


# -- rendering ----------------------------------------------------------------------


def colormap(t: np.ndarray) -> np.ndarray:
    """Fixed jet-style blue -> cyan -> yellow -> red map on [0, 1]."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)[..., None]
    centers = np.array([0.75, 0.5, 0.25])  # r, g, b
    return np.clip(1.5 - np.abs(4.0 * (t - centers)), 0.0, 1.0)


def upsample(heatmap: Heatmap, size: int) -> np.ndarray:
    return np.clip(resize_bilinear(heatmap.values, size, size), 0.0, None)


def overlay(image: np.ndarray, heatmap: Heatmap, alpha: float = 0.4) -> np.ndarray:
    """Blend the color-mapped, upsampled heatmap over ``image``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    up = resize_bilinear(heatmap.values, h, w)
    top = up.max()
    colors = colormap(up / top if top > 0 else up)
    return np.clip((1.0 - alpha) * image + alpha * colors, 0.0, 1.0)


def save_heatmap_csv(heatmap: Heatmap, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in heatmap.values:
            w.writerow([repr(float(v)) for v in row])
    return path


def save_overlay_png(image: np.ndarray, heatmap: Heatmap, path, alpha: float = 0.4) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_png(path, overlay(image, heatmap, alpha))
    return path

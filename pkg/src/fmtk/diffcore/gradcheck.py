"""Central finite-difference oracle for graph gradients."""

from __future__ import annotations

import numpy as np

from fmtk.diffcore.graph import Graph


def _patterns(graph: Graph) -> tuple:
    return tuple(node.op.pattern() for node in graph.nodes)


def finite_diff_check(
    graph: Graph,
    x,
    eps: float = 1e-6,
    output_weights=None,
    max_coords: int | None = None,
    include_input: bool = False,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(output_weights * graph(x))`` (plain sum of
    outputs when no weights are given). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-12)``.

    Coordinates whose +eps and -eps evaluations land on different pieces of
    a piecewise op (a ReLU gate flips, a max-pool winner changes) are skipped:
    the function is not differentiable there, so there is nothing to compare.

    ``max_coords`` caps the coordinates tested per tensor (chosen with
    ``seed``); ``None`` tests every coordinate.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    x = np.array(x, dtype=graph.dtype, copy=True)
    out = graph.forward(x)
    w = np.ones_like(out) if output_weights is None else np.asarray(output_weights, dtype=graph.dtype)
    params = graph.parameters()
    graph.zero_grad()
    gx = graph.backward(w, need_input_grad=include_input)

    targets = []
    for name, t in params.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        targets.append((t.data, grad.copy()))
    if include_input:
        targets.append((x, gx.copy()))

    def objective():
        y = graph.forward(x)
        return float(np.sum(w * y)), _patterns(graph)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, analytic in targets:
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp, pp = objective()
            flat[idx] = orig - eps
            fm, pm = objective()
            flat[idx] = orig
            if pp != pm:
                continue
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    graph.forward(x)
    return worst

import math

import numpy as np
import pytest

from fmtk.model import BackboneConfig, MultiTaskNet
from fmtk.objectives import (
    LossWeights,
    Schedule,
    bce_multilabel,
    ce_multiclass,
    lr_at_epoch,
    multitask_loss,
    one_hot,
)


def scalar_bce(y, p, eps=1e-7):
    total = 0.0
    for yi, pi in zip(y, p):
        for a, b in zip(yi, pi):
            b = min(max(b, eps), 1 - eps)
            total += a * math.log(b) + (1 - a) * math.log(1 - b)
    return -total / len(y)


def scalar_ce(y, p, eps=1e-7):
    total = 0.0
    for yi, pi in zip(y, p):
        for a, b in zip(yi, pi):
            if a:
                total += a * math.log(min(max(b, eps), 1 - eps))
    return -total / len(y)


def test_bce_examples():
    assert bce_multilabel([[1, 1, 1]], [[1 - 1e-7] * 3]) <= 1e-6
    assert bce_multilabel([[1, 0, 1]], [[0.5, 0.5, 0.5]]) == pytest.approx(3 * math.log(2), abs=1e-12)
    y, p = [[0.9, 0.1, 0.5]], [[0.8, 0.2, 0.5]]
    assert bce_multilabel(y, p) == pytest.approx(scalar_bce(y, p), abs=1e-12)


def test_ce_examples():
    assert ce_multiclass([[0, 1, 0]], [[1e-8, 1 - 2e-8, 1e-8]]) <= 1e-6
    assert ce_multiclass([[1, 0, 0]], [[1 / 3] * 3]) == pytest.approx(math.log(3), abs=1e-12)
    y = one_hot([0, 2], 3)
    p = [[0.7, 0.2, 0.1], [0.5, 0.3, 0.2]]
    assert ce_multiclass(y, p) == pytest.approx((-math.log(0.7) - math.log(0.2)) / 2, abs=1e-12)


def test_losses_match_scalar_oracles_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        y = rng.random((n, 3))
        p = rng.random((n, 3))
        assert abs(bce_multilabel(y, p) - scalar_bce(y, p)) <= 1e-10
        c = int(rng.integers(2, 5))
        logits = rng.normal(size=(n, c))
        q = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        t = one_hot(rng.integers(0, c, n), c)
        assert abs(ce_multiclass(t, q) - scalar_ce(t, q)) <= 1e-10


def test_losses_nonnegative_finite_at_extremes():
    y = np.array([[1, 0, 1], [0, 1, 0]], dtype=float)
    for p in (np.zeros((2, 3)), np.ones((2, 3)), y):
        v = bce_multilabel(y, p)
        assert np.isfinite(v) and v >= 0
    assert ce_multiclass(one_hot([1], 3), [[1.0, 0.0, 0.0]]) == pytest.approx(-math.log(1e-7))


def test_loss_errors():
    with pytest.raises(ValueError):
        bce_multilabel(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="one-hot"):
        ce_multiclass([[0.5, 0.5]], [[0.5, 0.5]])


def test_bce_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    y, p = rng.random((4, 3)), rng.uniform(0.1, 0.9, (4, 3))
    _, g = bce_multilabel(y, p, with_grad=True)
    h = 1e-6
    for i, j in [(0, 0), (2, 1), (3, 2)]:
        up, dn = p.copy(), p.copy()
        up[i, j] += h
        dn[i, j] -= h
        num = (bce_multilabel(y, up) - bce_multilabel(y, dn)) / (2 * h)
        assert g[i, j] == pytest.approx(num, rel=1e-6)


def test_multitask_loss_examples_and_linearity():
    assert multitask_loss(LossWeights(0.0, 2.5), None, 0.4) == 2.5 * 0.4
    assert multitask_loss(LossWeights(1.0, 1.0), 2.0, 1.0) == 3.0
    base = multitask_loss(LossWeights(0.0, 1.0), 0.3, 0.7)
    one = multitask_loss(LossWeights(1.5, 1.0), 0.3, 0.7)
    two = multitask_loss(LossWeights(3.0, 1.0), 0.3, 0.7)
    assert two - base == 2 * (one - base)
    with pytest.raises(ValueError):
        multitask_loss(LossWeights(1.0, 1.0), None, 1.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0)


def test_combined_gradient_on_shared_parameter():
    cfg = BackboneConfig(input_size=8, widths=(3, 4), blocks=1, embed_dim=5)
    net = MultiTaskNet.create(cfg, 3, seed=0, with_head_a=True)
    rng = np.random.default_rng(2)
    x = rng.random((3, 8, 8, 3))
    ya, yb = rng.random((3, 3)), one_hot([0, 2, 1], 3)
    la, lb = 0.7, 1.3

    def losses():
        pb, pa = net.forward(x)
        return bce_multilabel(ya, pa), ce_multiclass(yb, pb)

    def grad_of(ga_w, gb_w):
        net.zero_grad()
        pb, pa = net.forward(x)
        ga = bce_multilabel(ya, pa, with_grad=True)[1] * ga_w if ga_w else None
        gb = ce_multiclass(yb, pb, with_grad=True)[1] * gb_w if gb_w else None
        net.backward(gb, ga)
        return net.parameters()["shared.embed.w"].grad.copy()

    combined = grad_of(la, lb)
    separate = la * grad_of(1.0, 0.0) + lb * grad_of(0.0, 1.0)
    assert np.allclose(combined, separate, rtol=1e-12, atol=1e-15)
    w = net.parameters()["shared.embed.w"].data
    h = 1e-6
    for idx in [(0, 0), (2, 1), (4, 3)]:
        orig = w[idx]
        w[idx] = orig + h
        up = multitask_loss(LossWeights(la, lb), *losses())
        w[idx] = orig - h
        dn = multitask_loss(LossWeights(la, lb), *losses())
        w[idx] = orig
        num = (up - dn) / (2 * h)
        assert combined[idx] == pytest.approx(num, rel=1e-5, abs=1e-10)


def test_lr_schedule_values():
    s = Schedule()
    assert [lr_at_epoch(s, e) for e in (0, 29, 30, 60, 80, 114)] == [0.01, 0.01, 0.005, 0.0025, 0.00125, 0.00125]
    lrs = [lr_at_epoch(s, e) for e in range(s.max_epochs)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for bad in (-1, 115):
        with pytest.raises(ValueError):
            lr_at_epoch(s, bad)


def test_schedule_validation_and_shortening():
    with pytest.raises(ValueError):
        Schedule(milestones=(30, 30))
    with pytest.raises(ValueError):
        Schedule(milestones=(30, 115))
    short = Schedule().shortened(20)
    assert short.max_epochs == 20 and short.milestones == (5, 10, 14)
    assert Schedule().shortened(2).milestones == (1,)

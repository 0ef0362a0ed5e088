import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtk.dataio import load_manifest
from fmtk.errors import DataError
from fmtk.evaluation import (
    Evaluation,
    InsufficientPairs,
    bootstrap_ci,
    classification_metrics,
    compare_models,
    confusion_matrix,
    detail_metrics,
    evaluate,
    export_embeddings,
    format_comparison,
    wilcoxon_signed_rank,
    write_confusion_csv,
)
from fmtk.model import BackboneConfig, MultiTaskNet
from fmtk.phantom import generate_dataset

# -- independent oracles ----------------------------------------------------------


def oracle_class_metrics(truth, pred, c):
    f1s, prs, res = [], [], []
    for k in range(c):
        tp = sum(1 for t, p in zip(truth, pred) if t == k and p == k)
        fp = sum(1 for t, p in zip(truth, pred) if t != k and p == k)
        fn = sum(1 for t, p in zip(truth, pred) if t == k and p != k)
        pr = tp / (tp + fp) if tp + fp else 0.0
        re = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * pr * re / (pr + re) if pr + re else 0.0
        prs.append(pr)
        res.append(re)
        f1s.append(f1)
    acc = sum(t == p for t, p in zip(truth, pred)) / len(truth) if truth else 0.0
    return prs, res, f1s, sum(f1s) / c, acc


def oracle_wilcoxon(a, b, tail):
    d = [x - y for x, y in zip(a, b) if x != y]
    n = len(d)
    order = sorted(range(n), key=lambda i: abs(d[i]))
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and abs(d[order[j + 1]]) == abs(d[order[i]]):
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    w = sum(r for r, x in zip(ranks, d) if x > 0)
    ge = le = 0
    for signs in itertools.product((0, 1), repeat=n):
        s = sum(r for r, on in zip(ranks, signs) if on)
        ge += s >= w - 1e-9
        le += s <= w + 1e-9
    total = 2**n
    if tail == "greater":
        return ge / total
    if tail == "less":
        return le / total
    return min(1.0, 2 * min(ge, le) / total)


# -- confusion / metrics ----------------------------------------------------------


def test_confusion_examples():
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3))
    cm = confusion_matrix([0, 1, 2], [0, 2, 2], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 0, 1], [0, 0, 1]]
    assert not confusion_matrix([], [], 3).counts.any()
    with pytest.raises(ValueError, match="range"):
        confusion_matrix([0, 3], [0, 1], 3)


def test_metric_examples():
    rep = classification_metrics(confusion_matrix([0, 1, 2], [0, 1, 2], 3))
    assert rep.macro_f1 == 1.0 and rep.accuracy == 1.0 and np.all(rep.precision == 1)
    rep = classification_metrics(confusion_matrix([0, 1, 2], [0, 2, 2], 3))
    assert np.allclose(rep.f1, [1.0, 0.0, 2 / 3]) and rep.macro_f1 == pytest.approx(5 / 9)
    # Class 2 has no support and no predictions: F1 0, still averaged.
    rep = classification_metrics(confusion_matrix([0, 1], [0, 1], 3))
    assert rep.f1[2] == 0.0 and rep.macro_f1 == pytest.approx(2 / 3)


def test_binary_style_reports_bad_class():
    rep = classification_metrics(confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2), positive_class=0)
    assert rep.headline_f1 == pytest.approx(2 / 3)


@settings(max_examples=200, deadline=None)
@given(data=st.data(), c=st.integers(2, 5))
def test_metrics_match_counting_oracle(data, c):
    n = data.draw(st.integers(0, 40))
    truth = data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    pred = data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    rep = classification_metrics(confusion_matrix(truth, pred, c))
    prs, res, f1s, macro, acc = oracle_class_metrics(truth, pred, c)
    assert np.allclose(rep.precision, prs, atol=1e-12) and np.allclose(rep.recall, res, atol=1e-12)
    assert np.allclose(rep.f1, f1s, atol=1e-12)
    assert rep.macro_f1 == pytest.approx(macro, abs=1e-12) and rep.accuracy == pytest.approx(acc, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_macro_f1_permutation_invariant(data):
    truth = data.draw(st.lists(st.integers(0, 2), min_size=1, max_size=30))
    pred = data.draw(st.lists(st.integers(0, 2), min_size=len(truth), max_size=len(truth)))
    perm = data.draw(st.permutations([0, 1, 2]))
    base = classification_metrics(confusion_matrix(truth, pred, 3)).macro_f1
    moved = classification_metrics(confusion_matrix([perm[t] for t in truth], [perm[p] for p in pred], 3)).macro_f1
    assert moved == pytest.approx(base, abs=1e-12)


def test_normalized_rows():
    rng = np.random.default_rng(0)
    cm = confusion_matrix(rng.integers(0, 2, 50), rng.integers(0, 3, 50), 3)
    norm = cm.normalized()
    assert np.allclose(norm[:2].sum(axis=1), 1.0, atol=1e-12) and not norm[2].any()


def test_detail_metric_examples():
    truth = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]], dtype=float)
    assert all(m.f1 == 1.0 for m in detail_metrics(truth, truth))
    half = detail_metrics(truth, np.full((3, 3), 0.5))
    for j, m in enumerate(half):
        assert m.recall == 1.0 and m.precision == pytest.approx(truth[:, j].mean())
    with pytest.raises(ValueError):
        detail_metrics(truth, np.zeros((3, 2)))


def test_detail_metrics_match_oracle():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 2, (1000, 3))
    probs = rng.random((1000, 3))
    for j, m in enumerate(detail_metrics(truth, probs, 0.4)):
        pred = [int(p >= 0.4) for p in probs[:, j]]
        prs, res, f1s, _, acc = oracle_class_metrics(list(truth[:, j]), pred, 2)
        assert m.precision == pytest.approx(prs[1], abs=1e-12)
        assert m.recall == pytest.approx(res[1], abs=1e-12)
        assert m.f1 == pytest.approx(f1s[1], abs=1e-12) and m.accuracy == pytest.approx(acc, abs=1e-12)


# -- statistics -------------------------------------------------------------------


def test_wilcoxon_examples():
    a, b = [1.5, 2.4, 3.3, 4.2, 5.1], [1, 2, 3, 4, 5]
    assert wilcoxon_signed_rank(a, b, "greater").p_value == pytest.approx(1 / 32, abs=1e-15)
    assert wilcoxon_signed_rank(a, b, "one").p_value == pytest.approx(1 / 32, abs=1e-15)
    assert wilcoxon_signed_rank(a, b, "two").p_value == pytest.approx(1 / 16, abs=1e-15)
    with pytest.raises(InsufficientPairs, match="insufficient pairs"):
        wilcoxon_signed_rank(a, a)


def test_exact_wilcoxon_matches_enumeration():
    rng = np.random.default_rng(2)
    for i in range(200):
        n = 8 if i < 100 else int(rng.integers(5, 11))
        a = rng.integers(0, 6, n) / 2.0  # coarse values force ties and zeros
        b = rng.integers(0, 6, n) / 2.0
        tail = ("two", "greater", "less")[i % 3]
        if np.count_nonzero(a - b) < 5:
            continue
        assert wilcoxon_signed_rank(a, b, tail).p_value == pytest.approx(oracle_wilcoxon(a, b, tail), abs=1e-12)


def test_normal_approximation_agrees_with_scipy():
    from scipy.stats import wilcoxon

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=40), rng.normal(0.3, size=40)
    ours = wilcoxon_signed_rank(a, b, "two")
    ref = wilcoxon(a, b, correction=True, method="approx")
    assert ours.method == "normal" and ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_bootstrap_ci_basics():
    assert bootstrap_ci(np.full(20, 0.3)) == pytest.approx((0.3, 0.3, 0.3))
    x = np.random.default_rng(4).random(50)
    assert bootstrap_ci(x, seed=5) == bootstrap_ci(x, seed=5)
    with pytest.raises(ValueError):
        bootstrap_ci(np.array([]))
    with pytest.raises(ValueError):
        bootstrap_ci(x, n_boot=10)


def test_bootstrap_coin_coverage():
    hits = 0
    for rep in range(100):
        coins = np.random.default_rng([rep, 1]).integers(0, 2, 1000)
        lo, hi, _ = bootstrap_ci(coins, n_boot=2000, alpha=0.05, seed=rep)
        hits += lo <= 0.5 <= hi
    assert hits >= 93


# -- comparisons ------------------------------------------------------------------


def _evaluation(name, truth, pred, c=3, details=None, probs_a=None):
    probs = np.eye(c)[pred]
    ids = tuple(f"i{k}" for k in range(len(truth)))
    return Evaluation(name, "3class", ids, np.asarray(truth), probs, details, probs_a)


def test_compare_with_self():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 3, 60)
    pred = np.where(rng.random(60) < 0.7, truth, rng.integers(0, 3, 60))
    e = _evaluation("m", truth, pred)
    doc = compare_models(e, e, n_boot=200)
    ov = doc["overall"]
    assert ov["delta"] == 0.0 and all(v["delta"] == 0 for v in ov["per_class_f1"].values())
    assert ov["wilcoxon"]["p_value"] == 1.0 and "note" in ov["wilcoxon"]


def test_domination_gives_minimum_p():
    truth = np.arange(90) % 3
    good = _evaluation("good", truth, truth)
    wrong = truth.copy()
    wrong[::3] = (truth[::3] + 1) % 3
    doc = compare_models(good, _evaluation("bad", truth, wrong), n_boot=200, tail="greater")
    w = doc["overall"]["wilcoxon"]
    n = w["n"]
    assert n == 200 and doc["overall"]["ci_delta"][0] > 0
    # The smallest attainable one-tailed p, from the normal approximation at W- = 0.
    from scipy.stats import norm

    mean, sd = n * (n + 1) / 4, math.sqrt(n * (n + 1) * (2 * n + 1) / 24)
    assert w["p_value"] == pytest.approx(norm.sf((n * (n + 1) / 2 - mean - 0.5) / sd), rel=1e-6)


def test_compare_rejects_mismatched_sets():
    a = _evaluation("a", [0, 1, 2, 0], [0, 1, 2, 0])
    b = _evaluation("b", [0, 1, 2, 1], [0, 1, 2, 0])
    with pytest.raises(DataError):
        compare_models(a, b, n_boot=100)
    c = Evaluation("c", "3class", ("x", "y", "z", "w"), np.array([0, 1, 2, 0]), np.eye(3)[[0, 1, 2, 0]])
    with pytest.raises(DataError, match="different test sets"):
        compare_models(a, c, n_boot=100)


def test_compare_details_and_text():
    rng = np.random.default_rng(6)
    truth = rng.integers(0, 3, 50)
    dt = rng.integers(0, 2, (50, 3)).astype(float)
    a = _evaluation("mt", truth, truth, details=dt, probs_a=np.clip(dt + rng.normal(0, 0.3, dt.shape), 0, 1))
    b = _evaluation("teacher", truth, truth, details=dt, probs_a=np.clip(dt + rng.normal(0, 0.3, dt.shape), 0, 1))
    doc = compare_models(a, b, n_boot=100)
    assert set(doc["details"]) == {"illumination", "clarity", "contrast"}
    text = format_comparison(doc)
    assert "bootstrap replicates" in text and "F1 clarity" in text


# -- exports ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("ev")
    return load_manifest(generate_dataset(root, 24, seed=3, size=16), image_size=16)


def test_evaluate_and_export(small_set, tmp_path):
    cfg = BackboneConfig(input_size=16, widths=(4, 8), blocks=1, embed_dim=8)
    net = MultiTaskNet.create(cfg, 3, seed=0, with_head_a=True)
    ev = evaluate(net, small_set, "m")
    assert ev.n == 24 and ev.has_details and ev.cm.total == 24
    path = export_embeddings(net, small_set, tmp_path / "e.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(small_set)
    assert sum(k.startswith("z") for k in rows[0]) == cfg.embed_dim
    assert {"overall", "pred_overall", "pred_illum"} <= set(rows[0])
    write_confusion_csv(ev.cm, tmp_path / "c.csv", names=("reject", "usable", "good"))
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("truth")

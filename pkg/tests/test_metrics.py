import itertools
import logging
import math
from fractions import Fraction

import numpy as np
import pytest

from ontoclr.errors import (
    EmptySample,
    MetricError,
    MissingClass,
    NoPositives,
    ShapeMismatch,
    SingleClass,
)
from ontoclr.metrics import (
    MannWhitneyResult,
    auprc,
    auroc,
    average_ranks,
    bootstrap_ci,
    format_delimited,
    format_table,
    macro_ovr,
    mann_whitney_u,
    report_rows,
    score_report,
)


def auroc_oracle(scores, labels) -> Fraction:
    """Exact pairwise P(pos > neg) + half ties."""
    pos = [Fraction(s).limit_denominator(10**9) for s, l in zip(scores, labels) if l == 1]
    neg = [Fraction(s).limit_denominator(10**9) for s, l in zip(scores, labels) if l == 0]
    total = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                total += 1
            elif p == q:
                total += Fraction(1, 2)
    return total / (len(pos) * len(neg))


def auprc_oracle(scores, labels) -> Fraction:
    """Threshold sweep over distinct scores, exact arithmetic."""
    n_pos = sum(labels)
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for t in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= t]
        tp = sum(sel)
        recall = Fraction(tp, n_pos)
        ap += (recall - prev_recall) * Fraction(tp, len(sel))
        prev_recall = recall
    return ap


# -- ranks --------------------------------------------------------------------

def test_average_ranks_ties():
    np.testing.assert_array_equal(
        average_ranks(np.array([3.0, 1.0, 3.0, 2.0])),
        np.array([3.5, 1.0, 3.5, 2.0]))


def test_average_ranks_all_equal():
    np.testing.assert_array_equal(average_ranks(np.zeros(5)), np.full(5, 3.0))


# -- auroc --------------------------------------------------------------------

def test_auroc_fixed_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_perfect_and_ties():
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_auroc_single_class():
    with pytest.raises(SingleClass):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        scores = rng.integers(0, 5, size=n) / 4.0
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        want = auroc_oracle(scores.tolist(), labels.tolist())
        assert abs(auroc(scores, labels) - float(want)) < 1e-12


def test_auroc_flip_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores = rng.permutation(20) + rng.random(20)  # tie-free
        labels = rng.integers(0, 2, size=20)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=40)
    labels = rng.integers(0, 2, size=40)
    labels[0], labels[1] = 0, 1
    base = auroc(scores, labels)
    for f in (np.exp, np.arctan, lambda s: 3 * s + 7, lambda s: s ** 3):
        assert auroc(f(scores), labels) == pytest.approx(base, abs=1e-12)


def test_auroc_equals_u_statistic():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(4, 25))
        scores = rng.integers(0, 6, size=n).astype(float)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        res = mann_whitney_u(pos, neg)
        assert auroc(scores, labels) == pytest.approx(
            res.u / (pos.size * neg.size), abs=1e-12)


def test_auroc_validation():
    with pytest.raises(ShapeMismatch):
        auroc([1, 2], [0, 1, 1])
    with pytest.raises(MetricError):
        auroc([1, 2], [0, 2])
    with pytest.raises(EmptySample):
        auroc([], [])


# -- auprc --------------------------------------------------------------------

def test_auprc_perfect():
    assert auprc([0.1, 0.9, 0.8], [0, 1, 1]) == 1.0


def test_auprc_single_positive_last():
    for n in (2, 5, 9):
        scores = np.arange(n, dtype=float)
        labels = np.zeros(n, dtype=int)
        labels[np.argmin(scores)] = 1
        assert auprc(scores, labels) == pytest.approx(1.0 / n, abs=1e-12)


def test_auprc_no_positives():
    with pytest.raises(NoPositives):
        auprc([0.4, 0.6], [0, 0])


def test_auprc_matches_threshold_sweep():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 25))
        scores = rng.integers(0, 4, size=n) / 3.0
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        want = auprc_oracle(scores.tolist(), labels.tolist())
        assert abs(auprc(scores, labels) - float(want)) < 1e-12


def test_auprc_tie_grouping_fixed_case():
    # scores 0.5,0.5 hold one positive: the tied block contributes its
    # whole-block precision, not the optimistic within-block ordering
    got = auprc([0.5, 0.5, 0.1], [1, 0, 0])
    assert got == pytest.approx(0.5, abs=1e-12)


# -- macro --------------------------------------------------------------------

def test_macro_complementary_columns_equal_binary():
    rng = np.random.default_rng(5)
    p = rng.random(30)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    report = macro_ovr(np.c_[1 - p, p], labels)
    assert report.auroc == pytest.approx(auroc(p, labels), abs=1e-12)


def test_macro_onehot_perfect():
    labels = np.array([0, 1, 2, 0, 1, 2])
    scores = np.eye(3)[labels]
    report = macro_ovr(scores, labels)
    assert report.auroc == 1.0
    assert report.auprc == 1.0
    assert len(report.per_class) == 3


def test_macro_fixed_case_is_mean_of_binary():
    scores = np.array([
        [0.7, 0.2, 0.1],
        [0.1, 0.6, 0.3],
        [0.2, 0.3, 0.5],
        [0.5, 0.4, 0.1],
        [0.3, 0.3, 0.4],
        [0.1, 0.8, 0.1],
    ])
    labels = np.array([0, 1, 2, 1, 2, 0])
    per = [auroc(scores[:, c], (labels == c).astype(int)) for c in range(3)]
    report = macro_ovr(scores, labels)
    assert report.auroc == pytest.approx(np.mean(per), abs=1e-12)
    for c in range(3):
        assert report.per_class[c].auroc == pytest.approx(per[c], abs=1e-12)


def test_macro_missing_class():
    with pytest.raises(MissingClass):
        macro_ovr(np.random.default_rng(0).random((4, 3)), [0, 1, 0, 1])


def test_macro_shape_checks():
    with pytest.raises(ShapeMismatch):
        macro_ovr(np.zeros(4), [0, 1, 0, 1])
    with pytest.raises(ShapeMismatch):
        macro_ovr(np.zeros((4, 1)), [0, 0, 0, 0])


def test_macro_permutation_consistency():
    rng = np.random.default_rng(6)
    scores = rng.random((40, 4))
    labels = rng.integers(0, 4, size=40)
    for c in range(4):
        labels[c] = c
    base = macro_ovr(scores, labels)
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    permuted = macro_ovr(scores[:, perm], inv[labels])
    assert permuted.auroc == pytest.approx(base.auroc, abs=1e-12)
    for c in range(4):
        assert permuted.per_class[inv[c]].auroc == pytest.approx(
            base.per_class[c].auroc, abs=1e-12)


# -- bootstrap ----------------------------------------------------------------

def test_bootstrap_contains_point_estimate():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 2, size=200)
    scores = labels + rng.normal(scale=1.0, size=200)
    point = auroc(scores, labels)
    lo, hi = bootstrap_ci(auroc, scores, labels, n_resamples=200, seed=0)
    assert lo <= point <= hi


def test_bootstrap_deterministic():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 2, size=50)
    labels[:2] = [0, 1]
    scores = rng.random(50)
    a = bootstrap_ci(auroc, scores, labels, n_resamples=100, seed=3)
    b = bootstrap_ci(auroc, scores, labels, n_resamples=100, seed=3)
    assert a == b


def test_bootstrap_constant_metric_zero_width():
    lo, hi = bootstrap_ci(lambda s, l: 0.42, np.zeros(10),
                          np.r_[np.zeros(5), np.ones(5)], n_resamples=50)
    assert (lo, hi) == (0.42, 0.42)


def test_bootstrap_redraws_degenerate(caplog):
    # one positive among three: many resamples drop it and get redrawn
    scores = np.array([0.2, 0.9, 0.4])
    labels = np.array([0, 1, 0])
    with caplog.at_level(logging.INFO):
        lo, hi = bootstrap_ci(auroc, scores, labels, n_resamples=50, seed=1)
    assert 0.0 <= lo <= hi <= 1.0
    assert any("redrew" in r.getMessage() for r in caplog.records)


def test_bootstrap_width_shrinks_with_data():
    for seed in range(5):
        rng = np.random.default_rng(seed)

        def widths(n):
            labels = (rng.random(n) < 0.5).astype(int)
            labels[:2] = [0, 1]
            scores = labels + rng.normal(scale=2.0, size=n)
            lo, hi = bootstrap_ci(auroc, scores, labels, n_resamples=300,
                                  seed=seed)
            return hi - lo

        assert widths(1000) <= widths(100)


def test_score_report_binary_and_macro():
    rng = np.random.default_rng(9)
    labels = rng.integers(0, 2, size=60)
    labels[:2] = [0, 1]
    scores = labels + rng.normal(scale=0.8, size=60)
    rep = score_report(scores, labels, n_resamples=50, seed=0)
    assert rep.auroc_ci[0] <= rep.auroc <= rep.auroc_ci[1]
    assert rep.n_resamples == 50

    labels3 = rng.integers(0, 3, size=60)
    labels3[:3] = [0, 1, 2]
    scores3 = rng.random((60, 3))
    rep3 = score_report(scores3, labels3, n_resamples=20, seed=0)
    assert len(rep3.per_class) == 3


# -- rank-sum test -------------------------------------------------------------

def test_mwu_fixed_exact_example():
    res = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert res.u == 0.0
    assert res.method == "exact"
    assert res.p_value == 0.1


def test_mwu_identical_multisets():
    res = mann_whitney_u([3, 1, 2], [1, 2, 3])
    assert res.u == 4.5  # n1*n2/2
    assert res.z == 0.0
    assert res.p_value == 1.0


def test_mwu_separated():
    assert mann_whitney_u([10, 11], [1, 2, 3]).u == 6.0
    assert mann_whitney_u([1, 2, 3], [10, 11]).u == 0.0


def test_mwu_symmetric_p():
    x = [0.3, 1.2, 2.2, 5.0]
    y = [0.9, 1.8, 2.5]
    a = mann_whitney_u(x, y)
    b = mann_whitney_u(y, x)
    assert a.p_value == pytest.approx(b.p_value, abs=1e-12)
    assert a.u + b.u == len(x) * len(y)


def test_mwu_exact_matches_brute_enumeration():
    # enumerate all rank assignments directly and compare tails
    x = [2.0, 7.0, 9.0]
    y = [1.0, 3.0, 4.0, 8.0]
    res = mann_whitney_u(x, y)
    assert res.method == "exact"
    n1, n2 = 3, 4
    n = n1 + n2
    u_obs = res.u
    us = []
    for positions in itertools.combinations(range(n), n1):
        ranks = [p + 1 for p in positions]
        us.append(sum(ranks) - n1 * (n1 + 1) / 2)
    us = np.array(us)
    u_low = min(u_obs, n1 * n2 - u_obs)
    want = 2 * np.mean(us <= u_low)
    assert res.p_value == pytest.approx(min(1.0, want), abs=1e-12)


def test_mwu_ties_use_normal_path():
    res = mann_whitney_u([1, 1, 2], [1, 2, 2])
    assert res.method == "normal"
    assert 0.0 <= res.p_value <= 1.0


def test_mwu_large_uses_normal():
    rng = np.random.default_rng(10)
    res = mann_whitney_u(rng.random(30), rng.random(30))
    assert res.method == "normal"


def test_mwu_normal_hand_check():
    # U, tie-corrected variance, and continuity correction computed by hand
    x = [1.0, 2.0, 2.0, 5.0, 7.0, 8.0, 9.0, 11.0]
    y = [2.0, 3.0, 4.0, 6.0, 10.0, 12.0, 13.0, 14.0]
    res = mann_whitney_u(x, y)
    pooled = np.array(x + y)
    ranks = np.empty(16)
    order = np.argsort(pooled, kind="stable")
    sv = pooled[order]
    i = 0
    while i < 16:
        j = i
        while j + 1 < 16 and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[:8].sum() - 8 * 9 / 2
    assert res.u == u
    ties = np.array([3])  # three 2.0s pooled
    var = 64 / 12 * (17 - ((ties ** 3 - ties).sum()) / (16 * 15))
    z = (u - 32 - 0.5 * np.sign(u - 32)) / math.sqrt(var)
    assert res.z == pytest.approx(z, abs=1e-12)
    assert res.p_value == pytest.approx(math.erfc(abs(z) / math.sqrt(2)), abs=1e-12)


def test_mwu_empty():
    with pytest.raises(EmptySample):
        mann_whitney_u([], [1.0])


def test_mwu_result_type():
    assert isinstance(mann_whitney_u([1.0], [2.0]), MannWhitneyResult)


# -- report rendering -----------------------------------------------------------

def test_report_formats():
    rep = score_report([0.1, 0.9, 0.4, 0.6], [0, 1, 0, 1], n_resamples=0)
    rows = report_rows(rep)
    table = format_table(rows)
    assert table.splitlines()[0].startswith("metric")
    text = format_delimited(rows)
    lines = text.splitlines()
    assert lines[0] == "metric\tvalue\tci_low\tci_high"
    name, value, lo, hi = lines[1].split("\t")
    assert name == "auroc"
    assert float(value) == pytest.approx(rep.auroc, abs=1e-6)

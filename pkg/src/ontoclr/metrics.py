"""Ranking metrics, bootstrap intervals, and the rank-sum test.

AUROC is rank-based with average ranks for ties, so it coincides with
U/(n1*n2) from mann_whitney_u on the same data. AUPRC is average precision
with tied scores grouped into one block.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import (
    EmptySample,
    MetricError,
    MissingClass,
    NoPositives,
    ShapeMismatch,
    SingleClass,
)

log = logging.getLogger(__name__)

DEGENERATE = (SingleClass, NoPositives, MissingClass)


def _as_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeMismatch(f"scores {s.shape} vs labels {y.shape}")
    if s.size == 0:
        raise EmptySample("no examples")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return s, y.astype(np.int64)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    starts = np.r_[True, sv[1:] != sv[:-1]]
    group = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    counts = np.diff(np.r_[first, v.size])
    avg = first + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(v.size)
    ranks[order] = avg[group]
    return ranks


def auroc(scores, labels) -> float:
    s, y = _as_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("need both classes for AUROC")
    ranks = average_ranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    s, y = _as_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("need at least one positive for AUPRC")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    k = np.arange(1, y.size + 1)
    # last index of each tied-score block
    block_end = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    prec = tp[block_end] / k[block_end]
    pos_in_block = np.diff(np.r_[0, tp[block_end]])
    return float((prec * pos_in_block).sum() / n_pos)


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    auroc: float
    auprc: float


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    auprc: float
    auroc_ci: tuple[float, float] | None = None
    auprc_ci: tuple[float, float] | None = None
    n_resamples: int = 0
    per_class: tuple[ClassMetrics, ...] | None = None


def macro_ovr(scores, labels) -> MetricReport:
    """One-vs-rest AUROC/AUPRC per class column, unweighted macro mean."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if s.ndim != 2 or s.shape[1] < 2:
        raise ShapeMismatch(f"macro scores must be n×k with k ≥ 2, got {s.shape}")
    if s.shape[0] != y.size:
        raise ShapeMismatch(f"{s.shape[0]} score rows vs {y.size} labels")
    k = s.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise MetricError(f"labels outside [0, {k})")
    per = []
    for c in range(k):
        mask = (y == c).astype(np.int64)
        if mask.sum() == 0:
            raise MissingClass(f"class {c} absent from labels")
        per.append(ClassMetrics(c, auroc(s[:, c], mask), auprc(s[:, c], mask)))
    return MetricReport(
        auroc=float(np.mean([m.auroc for m in per])),
        auprc=float(np.mean([m.auprc for m in per])),
        per_class=tuple(per),
    )


def bootstrap_ci(metric_fn, scores, labels, n_resamples: int = 1000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap over example-level resamples.

    Resamples that break the metric's preconditions (e.g. a single class)
    are redrawn on a fresh counter stream; the redraw count is logged.
    """
    s = np.asarray(scores)
    y = np.asarray(labels)
    n = y.shape[0]
    if n == 0:
        raise EmptySample("cannot bootstrap an empty dataset")
    metric_fn(s, y)  # surface precondition failures on the full data first
    stats = np.empty(n_resamples)
    redraws = 0
    for r in range(n_resamples):
        for attempt in range(1000):
            rng = np.random.default_rng(np.random.SeedSequence((seed, r, attempt)))
            idx = rng.integers(0, n, size=n)
            try:
                stats[r] = metric_fn(s[idx], y[idx])
                break
            except DEGENERATE:
                redraws += 1
        else:
            raise MetricError("resampling cannot produce a valid subsample")
    if redraws:
        log.info("bootstrap: redrew %d degenerate resamples", redraws)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [tail, 1.0 - tail])
    return float(lo), float(hi)


def score_report(scores, labels, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> MetricReport:
    """Point metrics plus bootstrap intervals; macro when scores are 2-D."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        base = macro_ovr(s, labels)
        roc_fn = lambda sc, lb: macro_ovr(sc, lb).auroc  # noqa: E731
        prc_fn = lambda sc, lb: macro_ovr(sc, lb).auprc  # noqa: E731
    else:
        base = MetricReport(auroc=auroc(s, labels), auprc=auprc(s, labels))
        roc_fn, prc_fn = auroc, auprc
    if n_resamples <= 0:
        return base
    return MetricReport(
        auroc=base.auroc,
        auprc=base.auprc,
        auroc_ci=bootstrap_ci(roc_fn, s, labels, n_resamples, level, seed),
        auprc_ci=bootstrap_ci(prc_fn, s, labels, n_resamples, level, seed),
        n_resamples=n_resamples,
        per_class=base.per_class,
    )


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    z: float
    p_value: float
    method: str  # "exact" or "normal"


def _exact_two_sided_p(u: float, n1: int, n2: int) -> float:
    """P over all C(n1+n2, n1) tie-free rank assignments, doubled lower tail."""
    max_u = n1 * n2
    # counts[m][v] = number of assignments of m sample-1 ranks with statistic v,
    # built up one sample-2 member at a time
    counts = [[0] * (max_u + 1) for _ in range(n1 + 1)]
    for m in range(n1 + 1):
        counts[m][0] = 1
    for n in range(1, n2 + 1):
        new = [[0] * (max_u + 1) for _ in range(n1 + 1)]
        new[0][0] = 1
        for m in range(1, n1 + 1):
            row, shifted, prev = new[m], new[m - 1], counts[m]
            for v in range(max_u + 1):
                row[v] = prev[v] + (shifted[v - n] if v >= n else 0)
        counts = new
    dist = counts[n1]
    u_low = min(u, max_u - u)
    tail = sum(dist[v] for v in range(int(math.floor(u_low)) + 1))
    total = math.comb(n1 + n2, n1)
    return float(min(Fraction(2 * tail, total), Fraction(1)))


def mann_whitney_u(x, y) -> MannWhitneyResult:
    """Two-sided rank-sum test; U is for the first sample.

    Exact enumeration when n1*n2 <= 400 and the pooled values are tie-free,
    otherwise a normal approximation with tie and continuity corrections.
    """
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise EmptySample("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)

    _, tie_counts = np.unique(pooled, return_counts=True)
    n = n1 + n2
    tie_term = float((tie_counts.astype(np.float64) ** 3 - tie_counts).sum())
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        z = 0.0
    else:
        shift = u - mu
        cc = 0.5 * np.sign(shift)
        z = float((shift - cc) / math.sqrt(var)) if shift != 0 else 0.0

    tie_free = tie_counts.size == n
    if n1 * n2 <= 400 and tie_free:
        return MannWhitneyResult(u, z, _exact_two_sided_p(u, n1, n2), "exact")
    p = float(min(1.0, math.erfc(abs(z) / math.sqrt(2.0))))
    return MannWhitneyResult(u, z, p, "normal")


# -- report rendering ---------------------------------------------------------

def report_rows(report: MetricReport, prefix: str = "") -> list[tuple]:
    rows = [(prefix + "auroc", report.auroc, report.auroc_ci),
            (prefix + "auprc", report.auprc, report.auprc_ci)]
    for m in report.per_class or ():
        rows.append((f"{prefix}class{m.label}_auroc", m.auroc, None))
        rows.append((f"{prefix}class{m.label}_auprc", m.auprc, None))
    return rows


def format_table(rows: list[tuple]) -> str:
    """Aligned human-readable metric table."""
    width = max((len(r[0]) for r in rows), default=6)
    lines = [f"{'metric'.ljust(width)}  {'value':>10}  {'ci_low':>10}  {'ci_high':>10}"]
    for name, value, ci in rows:
        lo = f"{ci[0]:.6f}" if ci else "-"
        hi = f"{ci[1]:.6f}" if ci else "-"
        lines.append(f"{name.ljust(width)}  {value:>10.6f}  {lo:>10}  {hi:>10}")
    return "\n".join(lines) + "\n"


def format_delimited(rows: list[tuple]) -> str:
    """Tab-separated metrics; first line is the header row."""
    lines = ["metric\tvalue\tci_low\tci_high"]
    for name, value, ci in rows:
        lo = f"{ci[0]:.6f}" if ci else ""
        hi = f"{ci[1]:.6f}" if ci else ""
        lines.append(f"{name}\t{value:.6f}\t{lo}\t{hi}")
    return "\n".join(lines) + "\n"

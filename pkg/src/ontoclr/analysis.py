"""Embedding-quality analyses: linear probing and neighbor similarity.

Both operate on frozen embeddings. The probe fits a logistic classifier by
full-batch gradient descent; the neighbor analysis compares diagnosis
similarity of embedding-space nearest neighbors against random pairs with a
rank-sum test.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientLabels,
    InvalidFractions,
    KTooLarge,
    ShapeMismatch,
)
from .metrics import MetricReport, auprc, auroc, macro_ovr, mann_whitney_u
from .ontology import OntologyTree
from .similarity import DiagnosisSet, patient_similarity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 400
    lr: float = 0.5
    l2: float = 1e-3
    seed: int = 0


def _stratified_subsample(labels: np.ndarray, fraction: float,
                          seed: int) -> np.ndarray:
    """Per-class round(fraction*n) indices, drawn on a fixed stream."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xb105)))
    chosen = []
    for c in np.unique(labels):
        pool = np.flatnonzero(labels == c)
        take = int(round(fraction * pool.size))
        if take == 0:
            raise InsufficientLabels(
                f"class {c}: fraction {fraction} of {pool.size} examples is 0")
        chosen.append(rng.permutation(pool)[:take])
    return np.sort(np.concatenate(chosen))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_embeddings, train_labels, test_embeddings, test_labels,
                 label_fraction: float = 1.0,
                 cfg: ProbeConfig = ProbeConfig()) -> MetricReport:
    """Fit a logistic classifier on a stratified labeled subsample and
    report ranking metrics on the held-out set."""
    if not 0.0 < label_fraction <= 1.0:
        raise InvalidFractions(f"label_fraction {label_fraction} outside (0, 1]")
    x = np.asarray(train_embeddings, dtype=np.float64)
    y = np.asarray(train_labels).ravel().astype(np.int64)
    xt = np.asarray(test_embeddings, dtype=np.float64)
    yt = np.asarray(test_labels).ravel().astype(np.int64)
    if x.ndim != 2 or xt.ndim != 2 or x.shape[1] != xt.shape[1]:
        raise ShapeMismatch(f"embeddings {x.shape} vs {xt.shape}")
    if np.unique(y).size < 2:
        raise InsufficientLabels("training labels contain a single class")

    idx = _stratified_subsample(y, label_fraction, cfg.seed)
    log.debug("probe subsample (fraction=%s, seed=%d): %s",
              label_fraction, cfg.seed, idx.tolist())
    xs, ys = x[idx], y[idx]

    # standardize features with subsample statistics
    mean = xs.mean(axis=0)
    std = np.maximum(xs.std(axis=0), 1e-6)
    xs = (xs - mean) / std
    xe = (xt - mean) / std

    n, d = xs.shape
    k = int(max(y.max(), yt.max())) + 1
    binary = k <= 2
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x9a0be)))

    if binary:
        w = rng.normal(scale=0.01, size=d)
        bias = 0.0
        for _ in range(cfg.steps):
            p = 1.0 / (1.0 + np.exp(-(xs @ w + bias)))
            g = p - ys
            w -= cfg.lr * (xs.T @ g / n + cfg.l2 * w)
            bias -= cfg.lr * g.mean()
        scores = 1.0 / (1.0 + np.exp(-(xe @ w + bias)))
        return MetricReport(auroc=auroc(scores, yt), auprc=auprc(scores, yt))

    w = rng.normal(scale=0.01, size=(d, k))
    bias = np.zeros(k)
    onehot = np.eye(k)[ys]
    for _ in range(cfg.steps):
        p = _softmax(xs @ w + bias)
        g = (p - onehot) / n
        w -= cfg.lr * (xs.T @ g + cfg.l2 * w)
        bias -= cfg.lr * g.sum(axis=0)
    return macro_ovr(_softmax(xe @ w + bias), yt)


@dataclass(frozen=True)
class NeighborAnalysis:
    k: int
    knn_mean: float
    random_mean: float
    u: float
    p_value: float
    effect_size_r: float
    n_knn_pairs: int
    n_random_pairs: int


def _cosine_neighbors(embeddings: np.ndarray, k: int) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = np.divide(embeddings, norms, out=np.zeros_like(embeddings),
                     where=norms > 0)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def neighbor_analysis(embeddings, diagnoses: list[DiagnosisSet],
                      tree: OntologyTree, k: int = 5,
                      n_random_pairs: int | None = None,
                      seed: int = 0) -> NeighborAnalysis:
    """Diagnosis similarity of embedding nearest neighbors vs random pairs.

    The KNN population holds every directed (patient, neighbor) pair once;
    the random population samples distinct unordered non-self pairs.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    n = e.shape[0]
    if len(diagnoses) != n:
        raise ShapeMismatch(f"{n} embeddings vs {len(diagnoses)} diagnosis sets")
    if not 1 <= k < n:
        raise KTooLarge(f"K={k} needs 1 <= K < cohort size {n}")

    neighbors = _cosine_neighbors(e, k)
    knn_sims = np.array([
        patient_similarity(tree, diagnoses[i], diagnoses[j])
        for i in range(n) for j in neighbors[i]
    ])

    want = n * k if n_random_pairs is None else int(n_random_pairs)
    total = n * (n - 1) // 2
    if want > total:
        log.info("random-pair request %d exceeds %d distinct pairs; clamping",
                 want, total)
        want = total
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7a1d)))
    seen: set[tuple[int, int]] = set()
    pairs = []
    while len(pairs) < want:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        pairs.append(key)
    random_sims = np.array([
        patient_similarity(tree, diagnoses[i], diagnoses[j]) for i, j in pairs
    ])

    res = mann_whitney_u(knn_sims, random_sims)
    r = abs(res.z) / np.sqrt(knn_sims.size + random_sims.size)
    return NeighborAnalysis(
        k=k,
        knn_mean=float(knn_sims.mean()),
        random_mean=float(random_sims.mean()),
        u=res.u,
        p_value=res.p_value,
        effect_size_r=float(r),
        n_knn_pairs=int(knn_sims.size),
        n_random_pairs=int(random_sims.size),
    )

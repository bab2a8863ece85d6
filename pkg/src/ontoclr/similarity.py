"""Patient-level similarity, Φ weight transforms, and cohort weight caching.

Patient similarity is symmetric best-match aggregation over code pairs:
avg(A→B) takes each code's best ontology similarity into the other set and
averages; Sim(A,B) is the mean of the two directions. A weight family Φ maps
similarity to a negative-pair weight in [0,1].

The O(N²) cohort precomputation is the package hot path. It runs on the
kernel backend (numba by default, numpy fallback) and persists a row-major
packed lower triangle of float32 weights keyed by ontology, cohort, and
weight-spec hashes, so training gathers batch matrices in O(B²) instead of
recomputing best-match aggregation per epoch.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .errors import (
    BudgetExceeded,
    CacheCorrupt,
    DegenerateConfig,
    EmptySet,
    OutOfRangeSimilarity,
    ZeroBins,
)
from .ontology import OntologyTree

log = logging.getLogger(__name__)

WEIGHT_FAMILIES = ("power", "exponential", "threshold", "uniform")

_MAGIC = b"OWCACHE1"
_HEADER = struct.Struct("<8s32s32s32sQ")
DEFAULT_BUDGET_BYTES = 1 << 31


@dataclass(frozen=True)
class DiagnosisSet:
    """Deduplicated diagnosis codes for one patient."""

    patient_id: str
    codes: frozenset[str]

    @classmethod
    def from_codes(cls, patient_id: str, codes) -> "DiagnosisSet":
        return cls(patient_id=patient_id, codes=frozenset(codes))

    def __len__(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class WeightSpec:
    """Negative-pair weight transform w = Φ(s).

    power: (1−s)^γ, exponential: exp(−γs), threshold: 1 if s<δ else 0,
    uniform: 1 (plain NT-Xent reduction). γ defaults to the power-family
    setting that performed best in the ablation.
    """

    family: str = "power"
    gamma: float = 5.0
    delta: float = 0.5

    def __post_init__(self):
        if self.family not in WEIGHT_FAMILIES:
            raise DegenerateConfig(
                f"unknown weight family {self.family!r}; expected one of {WEIGHT_FAMILIES}"
            )
        if self.family in ("power", "exponential") and not self.gamma > 0:
            raise DegenerateConfig(f"gamma must be positive, got {self.gamma}")
        if self.family == "threshold" and not 0.0 <= self.delta <= 1.0:
            raise DegenerateConfig(f"delta must lie in [0,1], got {self.delta}")

    def key(self) -> str:
        """Canonical serialization used in cache hashing."""
        if self.family == "power":
            return f"power:gamma={float(self.gamma)!r}"
        if self.family == "exponential":
            return f"exponential:gamma={float(self.gamma)!r}"
        if self.family == "threshold":
            return f"threshold:delta={float(self.delta)!r}"
        return "uniform"


@dataclass(frozen=True)
class WeightMatrix:
    """Dense symmetric weight matrix over a patient batch.

    float32, entries in [0,1]. The diagonal is stored as 1 by convention and
    never consumed: the contrastive loss excludes j=i.
    """

    order: tuple[str, ...]
    values: np.ndarray


def _phi(spec: WeightSpec, s: np.ndarray) -> np.ndarray:
    if spec.family == "power":
        return (1.0 - s) ** spec.gamma
    if spec.family == "exponential":
        return np.exp(-spec.gamma * s)
    if spec.family == "threshold":
        return (s < spec.delta).astype(np.float64)
    return np.ones_like(s)


def weight(spec: WeightSpec, s: float) -> float:
    if not 0.0 <= s <= 1.0:
        raise OutOfRangeSimilarity(f"similarity {s} outside [0,1]")
    return float(_phi(spec, np.float64(s)))


def _interned(tree: OntologyTree, ds: DiagnosisSet) -> np.ndarray:
    """Sorted dense ids; sorting pins summation order for bitwise replay."""
    ids = tree.indices_of(ds.codes)
    ids.sort()
    return ids


def _cross_sims(tree: OntologyTree, a_ids: np.ndarray, b_ids: np.ndarray) -> np.ndarray:
    m, n = a_ids.size, b_ids.size
    flat = kernels().code_sim_many(
        np.repeat(a_ids, n), np.tile(b_ids, m), tree.depth, tree.up
    )
    return flat.reshape(m, n)


def directional_avg(tree: OntologyTree, frm: DiagnosisSet, to: DiagnosisSet) -> float:
    """Mean over codes in `frm` of the best similarity to any code in `to`."""
    if len(frm) == 0 or len(to) == 0:
        raise EmptySet(
            f"directional_avg needs non-empty sets "
            f"({frm.patient_id!r}: {len(frm)}, {to.patient_id!r}: {len(to)})"
        )
    sims = _cross_sims(tree, _interned(tree, frm), _interned(tree, to))
    return float(sims.max(axis=1).mean())


def patient_similarity(tree: OntologyTree, a: DiagnosisSet, b: DiagnosisSet) -> float:
    """Symmetric best-match similarity: ½(avg(A→B) + avg(B→A))."""
    if len(a) == 0 or len(b) == 0:
        raise EmptySet(
            f"patient_similarity needs non-empty sets "
            f"({a.patient_id!r}: {len(a)}, {b.patient_id!r}: {len(b)})"
        )
    return float(
        kernels().pair_sim(_interned(tree, a), _interned(tree, b), tree.depth, tree.up)
    )


def flat_match_similarity(a: DiagnosisSet, b: DiagnosisSet) -> float:
    """Ontology-blind baseline: shared codes over total codes of both patients."""
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("flat_match_similarity needs non-empty sets")
    return len(a.codes & b.codes) / (len(a) + len(b))


def _pack_cohort(tree: OntologyTree, sets) -> tuple[np.ndarray, np.ndarray]:
    interned = [_interned(tree, s) for s in sets]
    offsets = np.zeros(len(interned) + 1, dtype=np.int64)
    np.cumsum([ids.size for ids in interned], out=offsets[1:])
    flat = (
        np.concatenate(interned)
        if interned and offsets[-1] > 0
        else np.empty(0, dtype=np.int64)
    )
    return flat, offsets


def _packed_weights(tree: OntologyTree, sets, spec: WeightSpec) -> np.ndarray:
    """Packed lower triangle of pair weights, float32.

    Pairs touching a patient with no (known) codes carry similarity NaN from
    the kernel and get uniform weight 1 so they act as plain negatives.
    """
    flat, offsets = _pack_cohort(tree, sets)
    sims = kernels().cohort_pair_sims(flat, offsets, tree.depth, tree.up)
    w = _phi(spec, sims)
    w[np.isnan(sims)] = 1.0
    return w.astype(np.float32)


def _unpack_symmetric(packed: np.ndarray, n: int) -> np.ndarray:
    values = np.ones((n, n), dtype=np.float32)
    rows, cols = np.tril_indices(n, k=-1)
    values[rows, cols] = packed
    values[cols, rows] = packed
    return values


def batch_weight_matrix(tree: OntologyTree, sets, spec: WeightSpec) -> WeightMatrix:
    """Weight matrix for a batch; w[i,j] = Φ(Sim(A_i, A_j)) for i≠j.

    Pure in (tree, sets, spec): repeated calls are bitwise identical, and
    entries match a cohort cache gather bitwise.
    """
    sets = list(sets)
    packed = _packed_weights(tree, sets, spec)
    return WeightMatrix(
        order=tuple(s.patient_id for s in sets),
        values=_unpack_symmetric(packed, len(sets)),
    )


def cohort_content_hash(sets) -> str:
    h = hashlib.sha256()
    for ds in sets:
        record = ds.patient_id + "\t" + ",".join(sorted(ds.codes)) + "\n"
        h.update(record.encode("utf-8"))
    return h.hexdigest()


@dataclass(frozen=True)
class CohortWeightCache:
    """Precomputed pair weights for a fixed cohort ordering.

    `packed[i*(i-1)/2 + j]` holds w(i, j) for i > j (row-major packed lower
    triangle).
    """

    order: tuple[str, ...]
    packed: np.ndarray
    ontology_hash: str
    cohort_hash: str
    spec_key: str
    path: str | None = field(default=None, compare=False)

    def pair_weight(self, i: int, j: int) -> float:
        if i == j:
            return 1.0
        if i < j:
            i, j = j, i
        return float(self.packed[i * (i - 1) // 2 + j])

    def gather(self, indices) -> WeightMatrix:
        """Batch weight matrix for cohort positions `indices`, O(B²)."""
        idx = np.asarray(indices, dtype=np.int64)
        b = idx.size
        values = np.ones((b, b), dtype=np.float32)
        rows, cols = np.tril_indices(b, k=-1)
        gi, gj = idx[rows], idx[cols]
        lo = np.minimum(gi, gj)
        hi = np.maximum(gi, gj)
        same = gi == gj  # repeated patient in a batch: weight 1 convention
        if self.packed.size:
            pair_idx = hi * (hi - 1) // 2 + lo
            pair_idx[same] = 0
            w = self.packed[pair_idx]
        else:
            w = np.ones(rows.size, dtype=np.float32)
        w[same] = 1.0
        values[rows, cols] = w
        values[cols, rows] = w
        return WeightMatrix(order=tuple(self.order[k] for k in idx), values=values)


def cache_spec_digest(spec_key: str) -> str:
    return hashlib.sha256(spec_key.encode("utf-8")).hexdigest()


def _write_cache_file(path: str, cache: CohortWeightCache) -> None:
    header = _HEADER.pack(
        _MAGIC,
        bytes.fromhex(cache.ontology_hash),
        bytes.fromhex(cache.cohort_hash),
        bytes.fromhex(cache_spec_digest(cache.spec_key)),
        len(cache.order),
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cache.packed, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_cache_file(path: str, order, ontology_hash: str, cohort_hash: str,
                     spec_key: str) -> CohortWeightCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CacheCorrupt(f"{path}: truncated header")
    magic, ont, coh, spc, n = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CacheCorrupt(f"{path}: bad magic {magic!r}")
    if ont.hex() != ontology_hash or coh.hex() != cohort_hash \
            or spc.hex() != cache_spec_digest(spec_key):
        raise CacheCorrupt(f"{path}: key hashes do not match its filename key")
    if n != len(order):
        raise CacheCorrupt(f"{path}: cohort size {n} != expected {len(order)}")
    n_pairs = n * (n - 1) // 2
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * n_pairs:
        raise CacheCorrupt(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * n_pairs}"
        )
    packed = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return CohortWeightCache(
        order=tuple(order),
        packed=packed,
        ontology_hash=ontology_hash,
        cohort_hash=cohort_hash,
        spec_key=spec_key,
        path=path,
    )


def cohort_weight_cache(tree: OntologyTree, cohort, spec: WeightSpec,
                        cache_dir: str,
                        budget_bytes: int = DEFAULT_BUDGET_BYTES) -> CohortWeightCache:
    """Load or build the persisted pair-weight cache for a cohort.

    The file name encodes (ontology hash, cohort hash, spec); content with
    mismatched header at that name raises CacheCorrupt rather than being
    silently recomputed.
    """
    cohort = list(cohort)
    n = len(cohort)
    n_pairs = n * (n - 1) // 2
    if n_pairs * 4 > budget_bytes:
        raise BudgetExceeded(
            f"{n} patients need {n_pairs * 4} cache bytes, budget is {budget_bytes}"
        )
    order = tuple(ds.patient_id for ds in cohort)
    coh_hash = cohort_content_hash(cohort)
    key = hashlib.sha256(
        f"{tree.content_hash}|{coh_hash}|{spec.key()}".encode("utf-8")
    ).hexdigest()[:16]
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"weights-{key}.owc")
    if os.path.exists(path):
        cache = _read_cache_file(path, order, tree.content_hash, coh_hash, spec.key())
        log.info("loaded cohort weight cache %s (%d pairs)", path, n_pairs)
        return cache

    packed = _packed_weights(tree, cohort, spec)
    cache = CohortWeightCache(
        order=order,
        packed=packed,
        ontology_hash=tree.content_hash,
        cohort_hash=coh_hash,
        spec_key=spec.key(),
        path=path,
    )
    _write_cache_file(path, cache)
    log.info("built cohort weight cache %s (%d pairs)", path, n_pairs)
    return cache


@dataclass(frozen=True)
class WeightHistogram:
    counts: np.ndarray
    edges: np.ndarray
    fraction_below_one: float


def weight_histogram(matrix: WeightMatrix, bins: int) -> WeightHistogram:
    """Histogram of off-diagonal weights plus the fraction strictly below 1."""
    if bins <= 0:
        raise ZeroBins(f"bins must be positive, got {bins}")
    n = matrix.values.shape[0]
    off = matrix.values[~np.eye(n, dtype=bool)].astype(np.float64)
    counts, edges = np.histogram(off, bins=bins, range=(0.0, 1.0))
    frac = float((off < 1.0).mean()) if off.size else 0.0
    return WeightHistogram(counts=counts, edges=edges, fraction_below_one=frac)

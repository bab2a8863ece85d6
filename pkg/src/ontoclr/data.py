"""Cohort ingestion, hourly binning, synthesis, and splits.

A cohort directory holds plain-text artifacts (vitals events, channel list,
diagnoses, labels, splits), two binary note-embedding files, and a JSON
manifest with per-file content hashes. Everything round-trips exactly:
floats are written with repr so save → load reproduces the bundle hash.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateConfig,
    EmptyCohort,
    FormatError,
    InvalidFractions,
    OffsetOutOfRange,
    UnknownChannel,
)
from .ontology import OntologyTree, load_ontology
from .similarity import DiagnosisSet

log = logging.getLogger(__name__)

_NOTE_MAGIC = b"OCNOTE01"

TASK_BINARY = "binary"
TASK_MULTICLASS = "multiclass"


@dataclass(frozen=True)
class VitalsSeries:
    """Hourly-binned vitals: values plus observed indicators, both (T, c).

    Cells without an observation hold value 0 and indicator 0.
    """

    patient_id: str
    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.observed.shape or self.values.ndim != 2:
            raise FormatError(
                f"{self.patient_id}: values {self.values.shape} vs "
                f"indicators {self.observed.shape}"
            )
        if np.any((self.observed == 0) & (self.values != 0)):
            raise FormatError(
                f"{self.patient_id}: non-zero value in an unobserved cell"
            )

    @property
    def horizon_hours(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def stacked(self) -> np.ndarray:
        """(T, 2c) encoder input: values then indicators."""
        return np.concatenate([self.values, self.observed], axis=1)


def bin_events(patient_id: str, events, horizon_hours: int,
               channels: int) -> VitalsSeries:
    """Mean-pool (hour_offset, channel_index, value) events into hourly cells."""
    sums = np.zeros((horizon_hours, channels), dtype=np.float64)
    counts = np.zeros((horizon_hours, channels), dtype=np.int64)
    for offset, channel, value in events:
        if not 0 <= offset < horizon_hours:
            raise OffsetOutOfRange(
                f"{patient_id}: offset {offset} outside [0, {horizon_hours})"
            )
        if not 0 <= channel < channels:
            raise UnknownChannel(
                f"{patient_id}: channel index {channel} outside [0, {channels})"
            )
        hour = int(offset)
        sums[hour, channel] += value
        counts[hour, channel] += 1
    observed = (counts > 0).astype(np.float64)
    values = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return VitalsSeries(patient_id=patient_id, values=values, observed=observed)


@dataclass(frozen=True)
class CohortBundle:
    patients: tuple[str, ...]
    vitals: dict[str, VitalsSeries]
    diagnoses: dict[str, DiagnosisSet]
    labels: dict[str, dict[str, int]]
    notes_raw: dict[str, np.ndarray]
    notes_summary: dict[str, np.ndarray]
    split: dict[str, str]
    channel_names: tuple[str, ...]
    horizon_hours: int
    note_dim: int
    config_hash: str = ""

    @property
    def channels(self) -> int:
        return len(self.channel_names)

    def ids_for(self, split_name: str) -> list[str]:
        return [p for p in self.patients if self.split.get(p) == split_name]

    def task_classes(self, task: str) -> int:
        return max(self.labels[task].values()) + 1

    def diagnosis_list(self) -> list[DiagnosisSet]:
        return [self.diagnoses[p] for p in self.patients]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for pid in self.patients:
            h.update(pid.encode())
            v = self.vitals[pid]
            h.update(v.values.tobytes())
            h.update(v.observed.tobytes())
            h.update(",".join(sorted(self.diagnoses[pid].codes)).encode())
            for task in sorted(self.labels):
                h.update(f"{task}={self.labels[task].get(pid)}".encode())
            h.update(np.asarray(self.notes_raw[pid], dtype="<f4").tobytes())
            h.update(np.asarray(self.notes_summary[pid], dtype="<f4").tobytes())
            h.update(self.split.get(pid, "").encode())
        h.update(",".join(self.channel_names).encode())
        h.update(str(self.horizon_hours).encode())
        return h.hexdigest()


def write_note_embeddings(path: str, embeddings: dict[str, np.ndarray],
                          dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(_NOTE_MAGIC)
        fh.write(struct.pack("<IQ", dim, len(embeddings)))
        for pid in sorted(embeddings):
            vec = np.ascontiguousarray(embeddings[pid], dtype="<f4")
            if vec.shape != (dim,):
                raise FormatError(f"note embedding for {pid!r} has shape {vec.shape}")
            enc = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(vec.tobytes())


def read_note_embeddings(path: str) -> tuple[dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != _NOTE_MAGIC:
        raise FormatError(f"{path}: not a note-embedding file")
    dim, count = struct.unpack_from("<IQ", blob, 8)
    off = 20
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            pid = blob[off:off + id_len].decode("utf-8")
            off += id_len
            vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            out[pid] = vec.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt ({exc})") from None
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out, int(dim)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_cohort(bundle: CohortBundle, out_dir: str) -> str:
    """Write the bundle archive; returns the bundle content hash."""
    os.makedirs(out_dir, exist_ok=True)

    def path(name):
        return os.path.join(out_dir, name)

    with open(path("channels.txt"), "w") as fh:
        for name in bundle.channel_names:
            fh.write(name + "\n")
    with open(path("vitals.csv"), "w") as fh:
        fh.write("patient_id,hour_offset,channel_name,value\n")
        for pid in bundle.patients:
            v = bundle.vitals[pid]
            for t, ch in zip(*np.nonzero(v.observed)):
                fh.write(f"{pid},{_fmt(t + 0.5)},{bundle.channel_names[ch]},"
                         f"{_fmt(v.values[t, ch])}\n")
    with open(path("diagnoses.tsv"), "w") as fh:
        for pid in bundle.patients:
            fh.write(pid + "\t" + ",".join(sorted(bundle.diagnoses[pid].codes)) + "\n")
    with open(path("labels.csv"), "w") as fh:
        fh.write("patient_id,task_name,label\n")
        for task in sorted(bundle.labels):
            for pid in bundle.patients:
                if pid in bundle.labels[task]:
                    fh.write(f"{pid},{task},{bundle.labels[task][pid]}\n")
    with open(path("splits.csv"), "w") as fh:
        fh.write("patient_id,split\n")
        for pid in bundle.patients:
            fh.write(f"{pid},{bundle.split[pid]}\n")
    write_note_embeddings(path("notes_raw.bin"), bundle.notes_raw, bundle.note_dim)
    write_note_embeddings(path("notes_summary.bin"), bundle.notes_summary,
                          bundle.note_dim)

    def file_hash(name):
        with open(path(name), "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()

    bundle_hash = bundle.content_hash()
    manifest = {
        "format": 1,
        "horizon_hours": bundle.horizon_hours,
        "note_dim": bundle.note_dim,
        "tasks": sorted(bundle.labels),
        "bundle_hash": bundle_hash,
        "config_hash": bundle.config_hash,
        "files": {name: file_hash(name) for name in (
            "channels.txt", "vitals.csv", "diagnoses.tsv", "labels.csv",
            "splits.csv", "notes_raw.bin", "notes_summary.bin")},
    }
    with open(path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return bundle_hash


def load_cohort(cohort_dir: str) -> CohortBundle:
    """Read a bundle archive; drops patients missing any required artifact."""
    def path(name):
        return os.path.join(cohort_dir, name)

    try:
        with open(path("manifest.json")) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{cohort_dir}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{cohort_dir}: bad manifest ({exc})") from None

    for name, want in manifest.get("files", {}).items():
        try:
            with open(path(name), "rb") as fh:
                got = hashlib.sha256(fh.read()).hexdigest()
        except FileNotFoundError:
            raise FormatError(f"{cohort_dir}: missing {name}") from None
        if got != want:
            raise FormatError(f"{cohort_dir}/{name}: content hash mismatch")

    try:
        horizon = int(manifest["horizon_hours"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{cohort_dir}: manifest lacks horizon_hours") from None
    with open(path("channels.txt")) as fh:
        channel_names = tuple(line.strip() for line in fh if line.strip())
    ch_index = {name: i for i, name in enumerate(channel_names)}

    events: dict[str, list] = {}
    with open(path("vitals.csv")) as fh:
        header = fh.readline()
        if not header.startswith("patient_id,"):
            raise FormatError("vitals.csv: missing header row")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"vitals.csv line {lineno}: expected 4 fields")
            pid, offset, ch_name, value = parts
            if ch_name not in ch_index:
                raise UnknownChannel(f"vitals.csv line {lineno}: {ch_name!r}")
            try:
                events.setdefault(pid, []).append(
                    (float(offset), ch_index[ch_name], float(value)))
            except ValueError:
                raise FormatError(
                    f"vitals.csv line {lineno}: non-numeric field") from None
    vitals = {pid: bin_events(pid, evs, horizon, len(channel_names))
              for pid, evs in events.items()}

    diagnoses: dict[str, DiagnosisSet] = {}
    with open(path("diagnoses.tsv")) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"diagnoses.tsv line {lineno}: expected a tab")
            pid, codes = line.split("\t", 1)
            diagnoses[pid] = DiagnosisSet.from_codes(
                pid, (c for c in codes.split(",") if c))

    labels: dict[str, dict[str, int]] = {}
    with open(path("labels.csv")) as fh:
        header = fh.readline()
        if not header.startswith("patient_id,"):
            raise FormatError("labels.csv: missing header row")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"labels.csv line {lineno}: expected 3 fields")
            pid, task, value = parts
            try:
                labels.setdefault(task, {})[pid] = int(value)
            except ValueError:
                raise FormatError(
                    f"labels.csv line {lineno}: non-integer label") from None

    split: dict[str, str] = {}
    with open(path("splits.csv")) as fh:
        fh.readline()
        for line in fh:
            line = line.strip()
            if line:
                pid, name = line.split(",")
                split[pid] = name

    notes_raw, dim_raw = read_note_embeddings(path("notes_raw.bin"))
    notes_summary, dim_sum = read_note_embeddings(path("notes_summary.bin"))
    if dim_raw != dim_sum:
        raise FormatError(
            f"note dims differ: raw {dim_raw} vs summary {dim_sum}")

    complete = [pid for pid in sorted(vitals)
                if pid in diagnoses and pid in notes_raw and pid in notes_summary
                and all(pid in task_labels for task_labels in labels.values())
                and pid in split]
    universe = set(vitals) | set(diagnoses) | set(notes_raw) | set(notes_summary)
    dropped = len(universe) - len(complete)
    if dropped:
        log.warning("dropped %d patients missing required artifacts", dropped)
    if not complete:
        raise EmptyCohort(f"{cohort_dir}: no patient has all required artifacts")

    keep = set(complete)
    return CohortBundle(
        patients=tuple(complete),
        vitals={p: vitals[p] for p in complete},
        diagnoses={p: diagnoses[p] for p in complete},
        labels={t: {p: v for p, v in m.items() if p in keep}
                for t, m in labels.items()},
        notes_raw={p: notes_raw[p] for p in complete},
        notes_summary={p: notes_summary[p] for p in complete},
        split={p: split[p] for p in complete},
        channel_names=channel_names,
        horizon_hours=horizon,
        note_dim=dim_raw,
        config_hash=str(manifest.get("config_hash", "")),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Controlled synthetic cohort: latent clusters drive codes, vitals,
    notes, and labels.

    Higher signal strengths mean cleaner modalities (noise scales as
    1/strength). The distillation-friendly regime keeps
    notes_signal_strength above vitals_signal_strength.
    """

    n_patients: int = 200
    n_clusters: int = 2
    tree_depth: int = 4
    tree_branching: int = 3
    codes_per_patient: int = 5
    vitals_signal_strength: float = 1.0
    notes_signal_strength: float = 3.0
    label_noise: float = 1.0
    seed: int = 0
    horizon_hours: int = 24
    channels: int = 6
    note_dim: int = 16
    observed_rate: float = 0.7
    multiclass_classes: int = 10
    cluster_code_affinity: float = 0.8

    def __post_init__(self):
        if self.n_patients < 2 or self.n_clusters < 1 or self.tree_depth < 2 \
                or self.tree_branching < 2 or self.codes_per_patient < 1:
            raise DegenerateConfig("synthetic cohort dimensions too small")
        if self.n_clusters > self.tree_branching ** 2:
            raise DegenerateConfig(
                f"{self.n_clusters} clusters need anchors among "
                f"{self.tree_branching}² subtrees")
        if min(self.vitals_signal_strength, self.notes_signal_strength) <= 0:
            raise DegenerateConfig("signal strengths must be positive")
        if not 0.0 < self.observed_rate <= 1.0 or not 0.0 <= self.cluster_code_affinity <= 1.0:
            raise DegenerateConfig("rates must lie in (0,1] / [0,1]")
        if self.label_noise < 0:
            raise DegenerateConfig("label_noise must be non-negative")


def _balanced_tree_text(depth: int, branching: int) -> str:
    lines = ["s,,root"]
    prev = ["s"]
    node = 0
    for _ in range(depth):
        nxt = []
        for parent in prev:
            for _ in range(branching):
                name = f"s{node}"
                node += 1
                lines.append(f"{name},{parent},")
                nxt.append(name)
        prev = nxt
    return "\n".join(lines)


def _subtree_nodes(tree: OntologyTree, root_code: str) -> list[str]:
    root_idx = tree.index_of(root_code)
    out = []
    for i, code in enumerate(tree.codes):
        j = i
        while tree.depth[j] > tree.depth[root_idx]:
            j = int(tree.parent[j])
        if j == root_idx and i != root_idx:
            out.append(code)
    return out


def synthesize(cfg: SynthConfig,
               tree: OntologyTree | None = None) -> tuple[CohortBundle, OntologyTree]:
    """Generate a cohort whose clusters align across codes, vitals, and notes."""
    if tree is None:
        tree = load_ontology(_balanced_tree_text(cfg.tree_depth, cfg.tree_branching))
    rng = np.random.default_rng(cfg.seed)

    depth1 = [c for c in tree.codes if tree.depth_of(c) == 1]
    anchors = depth1 if cfg.n_clusters <= len(depth1) else \
        [c for c in tree.codes if tree.depth_of(c) == 2]
    if cfg.n_clusters > len(anchors):
        raise DegenerateConfig(
            f"tree provides {len(anchors)} anchors for {cfg.n_clusters} clusters")
    anchors = anchors[:cfg.n_clusters]
    pools = [_subtree_nodes(tree, a) for a in anchors]
    if any(not pool for pool in pools):
        raise DegenerateConfig("a cluster anchor has no descendants to draw from")
    all_pool = sorted(set().union(*pools))

    T, c, d = cfg.horizon_hours, cfg.channels, cfg.note_dim
    cluster_templates = rng.normal(size=(cfg.n_clusters, T, c))
    severity_pattern = rng.normal(size=(T, c))
    note_centroids = rng.normal(size=(cfg.n_clusters, d)) * 2.0
    severity_direction = rng.normal(size=d)
    severity_direction /= np.linalg.norm(severity_direction)

    patients = tuple(f"p{i:05d}" for i in range(cfg.n_patients))
    clusters = rng.integers(0, cfg.n_clusters, size=cfg.n_patients)
    severity = rng.normal(size=cfg.n_patients)

    vitals: dict[str, VitalsSeries] = {}
    diagnoses: dict[str, DiagnosisSet] = {}
    notes_raw: dict[str, np.ndarray] = {}
    notes_summary: dict[str, np.ndarray] = {}
    binary: dict[str, int] = {}
    severity_noisy = np.empty(cfg.n_patients)

    cluster_sign = np.where(np.arange(cfg.n_clusters) % 2 == 0, 1.0, -1.0)

    for i, pid in enumerate(patients):
        k = int(clusters[i])
        codes: set[str] = set()
        while len(codes) < cfg.codes_per_patient:
            pool = pools[k] if rng.random() < cfg.cluster_code_affinity else all_pool
            codes.add(pool[int(rng.integers(len(pool)))])
        diagnoses[pid] = DiagnosisSet.from_codes(pid, codes)

        clean = cluster_templates[k] + severity[i] * severity_pattern
        noisy = clean + rng.normal(size=(T, c)) / cfg.vitals_signal_strength
        observed = (rng.random(size=(T, c)) < cfg.observed_rate).astype(np.float64)
        vitals[pid] = VitalsSeries(pid, np.where(observed > 0, noisy, 0.0), observed)

        note_clean = note_centroids[k] + severity[i] * severity_direction
        notes_raw[pid] = (note_clean
                          + rng.normal(size=d) / cfg.notes_signal_strength
                          ).astype(np.float32)
        notes_summary[pid] = (note_clean
                              + rng.normal(size=d) * 0.8 / cfg.notes_signal_strength
                              ).astype(np.float32)

        risk = cluster_sign[k] + cfg.label_noise * (severity[i]
                                                    + 0.5 * rng.normal())
        binary[pid] = int(risk > 0)
        severity_noisy[i] = severity[i] + 0.3 * cfg.label_noise * rng.normal()

    # multiclass labels: equal-probability standard-normal bins of severity
    k = cfg.multiclass_classes
    edges = _normal_quantiles(k)
    multiclass = {pid: int(np.searchsorted(edges, severity_noisy[i], side="right"))
                  for i, pid in enumerate(patients)}

    bundle = CohortBundle(
        patients=patients,
        vitals=vitals,
        diagnoses=diagnoses,
        labels={TASK_BINARY: binary, TASK_MULTICLASS: multiclass},
        notes_raw=notes_raw,
        notes_summary=notes_summary,
        split={pid: "train" for pid in patients},
        channel_names=tuple(f"ch{j}" for j in range(c)),
        horizon_hours=T,
        note_dim=d,
    )
    return bundle, tree


def _normal_quantiles(k: int) -> np.ndarray:
    """Interior k-quantile boundaries of N(0,1) via bisection on erf."""
    from math import erf, sqrt

    def cdf(x):
        return 0.5 * (1.0 + erf(x / sqrt(2.0)))

    edges = []
    for i in range(1, k):
        target, lo, hi = i / k, -10.0, 10.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if cdf(mid) < target:
                lo = mid
            else:
                hi = mid
        edges.append(0.5 * (lo + hi))
    return np.array(edges)


def _split_hash(seed: int, patient_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{patient_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def assign_splits(bundle: CohortBundle, fractions: tuple[float, float, float],
                  seed: int, stratify_task: str | None = None) -> CohortBundle:
    """Deterministic salted-hash split, stratified by label when available.

    fractions = (train, val, test); must be non-negative and sum to 1.
    """
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions {fractions} must be >=0 and sum to 1")

    if stratify_task is None and bundle.labels:
        stratify_task = TASK_BINARY if TASK_BINARY in bundle.labels \
            else sorted(bundle.labels)[0]
    groups: dict[int | None, list[str]] = {}
    for pid in bundle.patients:
        key = bundle.labels[stratify_task].get(pid) if stratify_task else None
        groups.setdefault(key, []).append(pid)

    assignment: dict[str, str] = {}
    for key in sorted(groups, key=lambda x: (x is None, x)):
        members = sorted(groups[key], key=lambda p: (_split_hash(seed, p), p))
        n = len(members)
        n_val = int(round(f_val * n))
        n_test = int(round(f_test * n))
        n_train = n - n_val - n_test
        if n_train < 0:
            n_train, n_val = 0, n - n_test
        for i, pid in enumerate(members):
            if i < n_train:
                assignment[pid] = "train"
            elif i < n_train + n_val:
                assignment[pid] = "val"
            else:
                assignment[pid] = "test"
    return replace(bundle, split=assignment)


def channel_stats(bundle: CohortBundle,
                  patient_ids) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over observed cells of the given patients."""
    ids = list(patient_ids)
    if not ids:
        raise EmptyCohort("channel_stats over an empty id list")
    c = bundle.channels
    total = np.zeros(c)
    total_sq = np.zeros(c)
    count = np.zeros(c)
    for pid in ids:
        v = bundle.vitals[pid]
        total += (v.values * v.observed).sum(axis=0)
        total_sq += (v.values ** 2 * v.observed).sum(axis=0)
        count += v.observed.sum(axis=0)
    safe = np.maximum(count, 1.0)
    mean = total / safe
    var = np.maximum(total_sq / safe - mean ** 2, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    mean[count == 0] = 0.0
    std[count == 0] = 1.0
    return mean, std


def normalized_stack(series: VitalsSeries, mean: np.ndarray,
                     std: np.ndarray) -> np.ndarray:
    """(T, 2c) z-scored values (observed cells only) plus indicators."""
    z = (series.values - mean) / std * series.observed
    return np.concatenate([z, series.observed], axis=1)

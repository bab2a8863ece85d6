"""Rooted diagnosis hierarchy with path-set Jaccard code similarity.

The tree is loaded from an edge-list file (`child_id,parent_id,label`, empty
parent marks the root) and interned to dense integer ids. Similarity between
two codes is the Jaccard overlap of their root-excluded root-paths, which
collapses to an LCA-depth formula:

    s(a, b) = depth(lca) / (depth(a) + depth(b) - depth(lca))

LCA queries use a binary-lifting ancestor table, so deep generated trees cost
O(log depth) per query.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CycleDetected,
    DuplicateNode,
    EmptyOntology,
    FormatError,
    MissingParent,
    MultipleRoots,
    UnknownCode,
)


def _lift_table(parent: np.ndarray, depth: np.ndarray) -> np.ndarray:
    levels = max(1, int(depth.max()).bit_length())
    up = np.empty((parent.size, levels), dtype=np.int64)
    up[:, 0] = parent
    for k in range(1, levels):
        up[:, k] = up[up[:, k - 1], k - 1]
    return up


@dataclass(frozen=True)
class OntologyTree:
    """Immutable rooted tree over diagnosis codes.

    `parent[root] == root` acts as a lifting sentinel; real roots are
    detected by `depth == 0`. All arrays are aligned with `codes`.
    """

    codes: tuple[str, ...]
    labels: tuple[str, ...]
    parent: np.ndarray
    depth: np.ndarray
    up: np.ndarray
    root: str
    content_hash: str
    _index: dict[str, int] = field(repr=False, default_factory=dict)

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def index_of(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise UnknownCode(f"code {code!r} is not in the ontology") from None

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def depth_of(self, code: str) -> int:
        return int(self.depth[self.index_of(code)])

    def label_of(self, code: str) -> str:
        return self.labels[self.index_of(code)]

    def _lca_index(self, a: int, b: int) -> int:
        if self.depth[a] < self.depth[b]:
            a, b = b, a
        diff = int(self.depth[a] - self.depth[b])
        k = 0
        while diff:
            if diff & 1:
                a = int(self.up[a, k])
            diff >>= 1
            k += 1
        if a == b:
            return a
        for k in range(self.up.shape[1] - 1, -1, -1):
            if self.up[a, k] != self.up[b, k]:
                a = int(self.up[a, k])
                b = int(self.up[b, k])
        return int(self.parent[a])

    def lca(self, a: str, b: str) -> str:
        """Deepest node lying on both root-paths."""
        return self.codes[self._lca_index(self.index_of(a), self.index_of(b))]

    def code_similarity(self, a: str, b: str) -> float:
        ia = self.index_of(a)
        ib = self.index_of(b)
        if ia == ib:
            return 1.0
        dl = self.depth[self._lca_index(ia, ib)]
        return float(dl / (self.depth[ia] + self.depth[ib] - dl))

    def code_similarity_batch(self, a: "np.ndarray | list[str]",
                              b: "np.ndarray | list[str]") -> np.ndarray:
        """Vectorised code similarity for aligned id sequences."""
        from .backend import kernels

        ia = self.indices_of(a)
        ib = self.indices_of(b)
        if ia.size == 0:
            return np.empty(0, dtype=np.float64)
        return kernels().code_sim_many(ia, ib, self.depth, self.up)

    def indices_of(self, codes) -> np.ndarray:
        return np.array([self.index_of(c) for c in codes], dtype=np.int64)


def _parse_edge_lines(stream) -> list[tuple[str, str, str]]:
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",", 2)
        if len(parts) < 2:
            raise FormatError(
                f"line {lineno}: expected `child_id,parent_id,label`, got {line!r}"
            )
        child, parent = parts[0].strip(), parts[1].strip()
        label = parts[2].strip() if len(parts) == 3 else ""
        records.append((child, parent, label))
    return records


def load_ontology(source) -> OntologyTree:
    """Build an OntologyTree from an edge-list path, text, or open stream.

    Raises DuplicateNode if a child id appears twice (including the
    multi-parent case), MissingParent for an undefined parent id,
    MultipleRoots for more than one empty-parent record, CycleDetected when
    some node cannot reach the root, and EmptyOntology for no records.
    """
    if hasattr(source, "read"):
        records = _parse_edge_lines(source)
    else:
        text = str(source)
        if "\n" in text or "," in text:
            records = _parse_edge_lines(io.StringIO(text))
        else:
            with open(text, "r", encoding="utf-8") as fh:
                records = _parse_edge_lines(fh)
    if not records:
        raise EmptyOntology("no records in ontology source")

    index: dict[str, int] = {}
    for child, _, _ in records:
        if child in index:
            raise DuplicateNode(f"node {child!r} defined more than once")
        index[child] = len(index)

    n = len(records)
    parent = np.empty(n, dtype=np.int64)
    labels = []
    root_idx = -1
    for i, (child, par, label) in enumerate(records):
        labels.append(label)
        if par == "":
            if root_idx >= 0:
                raise MultipleRoots(
                    f"both {records[root_idx][0]!r} and {child!r} have no parent"
                )
            root_idx = i
            parent[i] = i
        else:
            if par not in index:
                raise MissingParent(f"node {child!r} references undefined parent {par!r}")
            parent[i] = index[par]
    if root_idx < 0:
        raise CycleDetected("no root record; every node has a parent")

    # BFS from the root over child lists; anything unreached sits on a cycle
    children: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        if i != root_idx:
            children[parent[i]].append(i)
    depth = np.full(n, -1, dtype=np.int64)
    depth[root_idx] = 0
    queue = [root_idx]
    seen = 1
    while queue:
        nxt = []
        for u in queue:
            for v in children[u]:
                depth[v] = depth[u] + 1
                seen += 1
                nxt.append(v)
        queue = nxt
    if seen < n:
        bad = records[int(np.flatnonzero(depth < 0)[0])][0]
        raise CycleDetected(f"node {bad!r} cannot reach the root")

    canonical = "\n".join(
        f"{c},{p},{l}" for c, p, l in sorted(records)
    ).encode("utf-8")
    digest = hashlib.sha256(canonical).hexdigest()

    return OntologyTree(
        codes=tuple(r[0] for r in records),
        labels=tuple(labels),
        parent=parent,
        depth=depth,
        up=_lift_table(parent, depth),
        root=records[root_idx][0],
        content_hash=digest,
        _index=index,
    )


def format_ontology(tree: OntologyTree) -> str:
    """Edge-list text for the tree; load_ontology inverts it exactly."""
    lines = []
    for i, code in enumerate(tree.codes):
        par = "" if tree.depth[i] == 0 else tree.codes[tree.parent[i]]
        lines.append(f"{code},{par},{tree.labels[i]}")
    return "\n".join(lines) + "\n"

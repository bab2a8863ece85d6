"""Shared brute-force oracles for the test suite.

Everything here works from the raw parent dictionary with exact Fraction
arithmetic and explicit set operations; nothing touches the package's LCA
machinery, so these serve as independent references.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

FIXED_TREE = """\
root,,all codes
circ,root,circulatory
resp,root,respiratory
hyp,circ,hypertension
ihd,circ,ischemic heart disease
asthma,resp,asthma
hyp-a,hyp,primary hypertension
"""

FIXED_PARENTS: dict[str, str | None] = {
    "root": None,
    "circ": "root",
    "resp": "root",
    "hyp": "circ",
    "ihd": "circ",
    "asthma": "resp",
    "hyp-a": "hyp",
}


def path_to_root(parents, code):
    path = [code]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    return path


def code_sim_oracle(parents, a: str, b: str) -> Fraction:
    root = next(c for c, p in parents.items() if p is None)
    pa = set(path_to_root(parents, a)) - {root}
    pb = set(path_to_root(parents, b)) - {root}
    union = len(pa | pb)
    if union == 0:
        return Fraction(1)
    return Fraction(len(pa & pb), union)


def patient_sim_oracle(parents, a_codes, b_codes) -> Fraction:
    """Symmetric best-match aggregation, exact arithmetic."""
    avg_a = sum(max(code_sim_oracle(parents, a, b) for b in b_codes)
                for a in a_codes) / len(list(a_codes))
    avg_b = sum(max(code_sim_oracle(parents, a, b) for a in a_codes)
                for b in b_codes) / len(list(b_codes))
    return (avg_a + avg_b) / 2


def random_tree(rng: np.random.Generator, n: int):
    parents: dict[str, str | None] = {"n0": None}
    lines = ["n0,,root"]
    for i in range(1, n):
        j = int(rng.integers(0, i))
        parents[f"n{i}"] = f"n{j}"
        lines.append(f"n{i},n{j},node {i}")
    return "\n".join(lines), parents


def random_code_sets(rng: np.random.Generator, parents, n_sets: int,
                     max_codes: int = 6) -> list[list[str]]:
    codes = [c for c, p in parents.items() if p is not None]
    out = []
    for _ in range(n_sets):
        k = int(rng.integers(1, max_codes + 1))
        out.append(list(rng.choice(codes, size=k, replace=False)))
    return out

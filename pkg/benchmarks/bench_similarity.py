"""Time the pairwise patient-similarity kernels: numba vs pure numpy.

The package picks one backend at import time (ONTOCLR_DISABLE_NUMBA=1
forces the numpy fallback); this script imports both kernel modules
directly, checks they agree, and times them on identical packed cohorts.

    python3 benchmarks/bench_similarity.py --sizes 100,200,400 --repeat 3
"""
import argparse
import time

import numpy as np

from ontoclr.backend import active_backend
from ontoclr.data import SynthConfig, synthesize
from ontoclr.similarity import _pack_cohort
from ontoclr import _kernels_numpy

try:
    from ontoclr import _kernels_numba
except ImportError:
    _kernels_numba = None


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="100,200,400",
                    help="comma-separated cohort sizes")
    ap.add_argument("--repeat", type=int, default=3,
                    help="timing repetitions (best is reported)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    print(f"package backend at import time: {active_backend()}")
    if _kernels_numba is None:
        print("numba unavailable; timing the numpy kernels only")

    header = f"{'patients':>8}  {'pairs':>9}  {'numpy_ms':>9}  {'numba_ms':>9}  {'speedup':>7}"
    print(header)
    print("-" * len(header))
    for n in sizes:
        bundle, tree = synthesize(SynthConfig(n_patients=n, seed=args.seed))
        codes_flat, offsets = _pack_cohort(tree, bundle.diagnosis_list())
        depth = tree.depth.astype(np.int64)
        up = tree.up

        ref = _kernels_numpy.cohort_pair_sims(codes_flat, offsets, depth, up)
        t_np = _time(lambda: _kernels_numpy.cohort_pair_sims(
            codes_flat, offsets, depth, up), args.repeat)

        if _kernels_numba is not None:
            got = _kernels_numba.cohort_pair_sims(codes_flat, offsets, depth,
                                                  up)  # first call pays JIT
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
            t_nb = _time(lambda: _kernels_numba.cohort_pair_sims(
                codes_flat, offsets, depth, up), args.repeat)
            ratio = f"{t_np / t_nb:6.1f}x"
            nb_ms = f"{t_nb * 1e3:9.2f}"
        else:
            nb_ms, ratio = "        -", "      -"
        print(f"{n:>8}  {ref.size:>9}  {t_np * 1e3:9.2f}  {nb_ms}  {ratio}")


if __name__ == "__main__":
    main()

"""Time the numba kernels against their numpy fallbacks on realistic sizes.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from seqmim import kernels


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    # negative slates for an evaluation pass: 20k users x 99 negatives, ~50 exclusions each
    n_users, universe = 20_000, 12_000
    excl = [np.unique(rng.integers(1, universe + 1, 50)) for _ in range(n_users)]
    indptr = np.concatenate([[0], np.cumsum([len(e) for e in excl])]).astype(np.int64)
    values = np.concatenate(excl).astype(np.int64)
    u = rng.random((n_users, 99))
    yield "sample_complement", lambda impl: impl(u, indptr, values, universe), (
        kernels.sample_complement_numpy, getattr(kernels, "sample_complement_numba", None))

    users = rng.integers(0, 30_000, 300_000)
    items = (rng.zipf(1.3, 300_000) % 15_000).astype(np.int64)
    yield "kcore_mask", lambda impl: impl(users, items, 5), (
        kernels.kcore_mask_numpy, getattr(kernels, "kcore_mask_numba", None))

    scores = rng.standard_normal((20_000, 100))
    gt = rng.integers(0, 100, 20_000)
    yield "pessimistic_ranks", lambda impl: impl(scores, gt), (
        kernels.pessimistic_ranks_numpy, getattr(kernels, "pessimistic_ranks_numba", None))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s}{'numpy [ms]':>12s}{'numba [ms]':>12s}{'speedup':>10s}")
    for name, call, (np_impl, nb_impl) in cases(rng):
        t_np = _best(lambda: call(np_impl), args.repeat)
        if nb_impl is None:
            print(f"{name:20s}{1e3 * t_np:12.1f}{'n/a':>12s}{'':>10s}")
            continue
        assert np.array_equal(call(np_impl), call(nb_impl)), name
        t_nb = _best(lambda: call(nb_impl), args.repeat)
        print(f"{name:20s}{1e3 * t_np:12.1f}{1e3 * t_nb:12.1f}{t_np / t_nb:9.1f}x")


if __name__ == "__main__":
    main()

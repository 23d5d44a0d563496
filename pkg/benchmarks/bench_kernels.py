"""Grouped-count kernel: numba vs numpy.

    python3 benchmarks/bench_kernels.py [--records 12000000] [--groups 230] [--repeat 5]
"""

import argparse
import time

import numpy as np

from proxyscope.reporting import _kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--records", type=int, default=12_000_000)
    ap.add_argument("--groups", type=int, default=230)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    codes = rng.integers(0, args.groups, args.records, dtype=np.int64)
    flags = rng.random(args.records) < 0.0041

    t_np, ref = best_of(lambda: _kernels.grouped_counts_numpy(codes, flags, args.groups), args.repeat)
    print(f"numpy  {t_np * 1e3:8.1f} ms  ({args.records / t_np / 1e6:.0f} M rec/s)")

    if _kernels.grouped_counts_numba is None:
        print("numba  unavailable (not installed or PROXYSCOPE_DISABLE_NUMBA set)")
        return
    t = time.perf_counter()
    _kernels.warm_up()
    print(f"numba  warm-up {(time.perf_counter() - t) * 1e3:.0f} ms")
    t_nb, out = best_of(lambda: _kernels.grouped_counts_numba(codes, flags, args.groups), args.repeat)
    print(f"numba  {t_nb * 1e3:8.1f} ms  ({args.records / t_nb / 1e6:.0f} M rec/s)  "
          f"speedup x{t_np / t_nb:.1f}")
    assert all(np.array_equal(a, b) for a, b in zip(ref, out)), "backends disagree"


if __name__ == "__main__":
    main()

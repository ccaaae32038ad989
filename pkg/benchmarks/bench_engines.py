#!/usr/bin/env python3
"""Benchmark the compiled replica kernel against the pure-Python fallback.

Runs the same seeded mini-batch simulations through both implementations and
prints per-case wall time plus the speedup. The two must agree bit-for-bit;
this also re-checks that on every case.

Usage: python benchmarks/bench_engines.py [--quick]
"""

import argparse
import time

import numpy as np

from spotpipe.engine import py_kernel
from spotpipe.scheduler import generate_varuna_schedule

try:
    from spotpipe.engine import _kernel
except ImportError:
    _kernel = None


def build_case(p, n, tx_us, seed):
    rng = np.random.default_rng(seed)
    schedule = generate_varuna_schedule(p, n, 1.0, 2.0, 1.0)
    fwd = np.full(p, 100_000, dtype=np.int64)
    bwd = np.full(p, 200_000, dtype=np.int64)
    rec = np.full(p, 100_000, dtype=np.int64)
    act = rng.integers(tx_us // 2, tx_us, size=max(p - 1, 0) * n).astype(np.int64)
    grad = rng.integers(tx_us // 2, tx_us, size=max(p - 1, 0) * n).astype(np.int64)
    expg = np.full(max(p - 1, 1), int(tx_us * 0.75), dtype=np.int64)
    in_act = np.full(p, 1_000_000, dtype=np.int64)
    work = np.full(p, 4_000_000, dtype=np.int64)
    cap = np.array([schedule.in_flight_bound(k + 1) + 4 for k in range(p)],
                   dtype=np.int64)
    return (p, n, schedule.kinds, schedule.mbs, schedule.offsets, fwd, bwd, rec,
            act, grad, expg, in_act, work, cap, True, True)


def timed(fn, args, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true", help="small cases only")
    opts = parser.parse_args()

    cases = [(4, 16), (8, 64), (18, 128)]
    if not opts.quick:
        cases += [(18, 683), (36, 512), (54, 1024)]

    print(f"{'P':>4} {'N_m':>6} {'tasks':>8} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for p, n in cases:
        args = build_case(p, n, 40_000, seed=p * 1000 + n)
        tasks = int(args[4][-1])
        t_py, r_py = timed(py_kernel.run_replica, args, repeats=1)
        if _kernel is None:
            print(f"{p:>4} {n:>6} {tasks:>8} {t_py:>10.3f}s {'n/a':>10} {'-':>8}")
            continue
        t_c, r_c = timed(_kernel.run_replica, args, repeats=3)
        for key in r_py:
            same = (r_py[key] == r_c[key] if key == "makespan"
                    else np.array_equal(r_py[key], r_c[key]))
            assert same, f"engine mismatch on {key} at P={p} N={n}"
        print(f"{p:>4} {n:>6} {tasks:>8} {t_py:>10.3f}s {t_c:>9.4f}s {t_py / t_c:>7.1f}x")
    if _kernel is None:
        print("\ncompiled kernel not built; run `python setup.py build_ext --inplace`")


if __name__ == "__main__":
    main()

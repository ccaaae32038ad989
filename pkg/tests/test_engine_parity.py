"""The compiled kernel must be bit-identical with the pure-Python fallback."""

import numpy as np
import pytest

from spotpipe import engine
from spotpipe.engine import py_kernel
from spotpipe.scheduler import generate_gpipe_schedule, generate_varuna_schedule

compiled = pytest.importorskip("spotpipe.engine._kernel")


def run_both(schedule, P, N, rng, opportunistic, serialize):
    fwd = np.full(P, 1_000_000, dtype=np.int64)
    bwd = np.full(P, 2_000_000, dtype=np.int64)
    rec = np.full(P, 1_000_000, dtype=np.int64)
    act = rng.integers(0, 500_000, size=max(P - 1, 0) * N).astype(np.int64)
    grad = rng.integers(0, 500_000, size=max(P - 1, 0) * N).astype(np.int64)
    expg = rng.integers(0, 500_000, size=max(P - 1, 1)).astype(np.int64)
    in_act = np.full(P, 128, dtype=np.int64)
    work = np.full(P, 1024, dtype=np.int64)
    cap = np.array([schedule.in_flight_bound(k + 1) + 4 for k in range(P)],
                   dtype=np.int64)
    args = (P, N, schedule.kinds, schedule.mbs, schedule.offsets,
            fwd, bwd, rec, act, grad, expg, in_act, work, cap,
            opportunistic, serialize)
    return py_kernel.run_replica(*args), compiled.run_replica(*args)


def test_engine_selected():
    assert engine.ENGINE_NAME in ("compiled", "python")


@pytest.mark.parametrize("opportunistic", [False, True])
@pytest.mark.parametrize("serialize", [False, True])
def test_bit_identical_across_random_cases(opportunistic, serialize):
    rng = np.random.default_rng(20_240 + int(opportunistic) * 2 + int(serialize))
    for trial in range(60):
        P = int(rng.integers(1, 9))
        N = int(rng.integers(1, 13))
        gen = generate_varuna_schedule if trial % 2 else generate_gpipe_schedule
        schedule = gen(P, N, 1.0, 2.0, 1.0)
        a, b = run_both(schedule, P, N, rng, opportunistic, serialize)
        for key in a:
            if key == "makespan":
                assert a[key] == b[key], (trial, P, N, key)
            else:
                assert np.array_equal(a[key], b[key]), (trial, P, N, key)


def test_zero_delay_collapse_to_static_plan():
    # With zero transfers both modes and both kernels replay the plan exactly.
    for P, N in ((4, 5), (1, 4), (7, 9)):
        schedule = generate_varuna_schedule(P, N, 1.0, 2.0, 1.0)
        fwd = np.full(P, 1_000_000, dtype=np.int64)
        bwd = np.full(P, 2_000_000, dtype=np.int64)
        rec = np.full(P, 1_000_000, dtype=np.int64)
        zero = np.zeros(max(P - 1, 0) * N, dtype=np.int64)
        ez = np.zeros(max(P - 1, 1), dtype=np.int64)
        one = np.full(P, 1, dtype=np.int64)
        cap = np.full(P, N, dtype=np.int64)
        results = []
        for impl in (py_kernel, compiled):
            for opp in (False, True):
                r = impl.run_replica(P, N, schedule.kinds, schedule.mbs,
                                     schedule.offsets, fwd, bwd, rec, zero, zero,
                                     ez, one, one, cap, opp, True)
                results.append(r["makespan"])
        assert len(set(results)) == 1

"""Configuration search: pick the micro-batch size once, sweep pipeline
depths, balance stages, simulate each candidate and return the fastest.

For G available GPUs the sweep visits each feasible P from the smallest
memory-feasible depth up to min(K, G) with D = floor(G / P), one balanced
stage assignment per P; the candidate count is therefore at most min(K, G).
Micro-batch selection is a property of the calibration profile alone, so its
result is reused across morphing events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .calibration import CalibrationProfile
from .core import (
    ClusterState,
    ConfigError,
    HardwareSpec,
    InfeasibleError,
    JobSpec,
    ModelSpec,
    ParallelConfig,
    seconds_from_us,
)
from .partitioner import assign_stages, memory_check
from .scheduler import (
    POLICY_VARUNA,
    Schedule,
    generate_gpipe_schedule,
    generate_varuna_schedule,
)
from .simulator import DEFAULT_STASH_PAD, build_placement, simulate_minibatch


@dataclass(frozen=True)
class Candidate:
    config: ParallelConfig
    minibatch_us: int

    @property
    def minibatch_seconds(self) -> float:
        return seconds_from_us(self.minibatch_us)


@dataclass(frozen=True)
class PlanResult:
    chosen: ParallelConfig
    minibatch_us: int
    total_gpus: int
    candidates: Tuple[Candidate, ...]

    @property
    def minibatch_seconds(self) -> float:
        return seconds_from_us(self.minibatch_us)

    def throughput(self, job: JobSpec) -> float:
        """Examples per second."""
        return job.minibatch_examples / self.minibatch_seconds

    def throughput_per_gpu(self, job: JobSpec) -> float:
        """Examples per second per used GPU."""
        return self.throughput(job) / self.chosen.gpus_used

    @property
    def unused_gpus(self) -> int:
        return self.total_gpus - self.chosen.gpus_used


def select_microbatch(
    profile: CalibrationProfile,
    improvement_threshold: float = 0.02,
) -> int:
    """Smallest grid m where per-example forward time stops improving.

    Improvement between consecutive grid sizes is measured on the mean over
    cut-points of F_i(m)/m; once the next grid point improves by no more than
    the threshold, the current m wins. A grid that is still improving at its
    end selects the largest entry (memory permitting, which the planner's
    sweep enforces later).
    """
    grid = profile.m_grid
    if not grid:
        raise ConfigError("select_microbatch: profile has an empty m grid")

    def per_example(m: int) -> float:
        total = sum(profile.forward_us(i, m) for i in range(profile.num_cutpoints))
        return total / (m * profile.num_cutpoints)

    for m, nxt in zip(grid, grid[1:]):
        cur, future = per_example(m), per_example(nxt)
        if future >= cur * (1.0 - improvement_threshold):
            return m
    return grid[-1]


def micro_batches_for(job: JobSpec, m: int, d: int) -> int:
    """N_m with gradient accumulation: the last micro-batch may be partially
    filled on some replicas so that M_total is preserved exactly; simulated
    time conservatively uses full-size micro-batches."""
    return max(1, math.ceil(job.minibatch_examples / (m * d)))


def plan(
    gpus: int,
    model: ModelSpec,
    job: JobSpec,
    profile: CalibrationProfile,
    hw: HardwareSpec,
    cluster: ClusterState,
    seed: int = 0,
    micro_batch_size: Optional[int] = None,
    opportunistic: bool = True,
    improvement_threshold: float = 0.02,
    schedule_policy: str = POLICY_VARUNA,
) -> PlanResult:
    """Sweep pipeline depths for ``gpus`` GPUs and return the fastest
    configuration. ``micro_batch_size`` short-circuits selection (the cached
    once-per-job value during morphing)."""
    if gpus < 1:
        raise InfeasibleError("no feasible configuration: zero GPUs available")
    if profile.num_cutpoints != model.num_cutpoints:
        raise ConfigError(
            f"plan: profile has {profile.num_cutpoints} cut-points, "
            f"model has {model.num_cutpoints}"
        )
    m = micro_batch_size or select_microbatch(profile, improvement_threshold)
    result = _sweep(gpus, model, job, profile, hw, cluster, m, seed,
                    opportunistic, schedule_policy)
    if result is None and micro_batch_size is None:
        # The preferred m fits nowhere; fall back through smaller grid sizes
        # (activation footprints shrink with m) and keep the largest that fits.
        for smaller in sorted((g for g in profile.m_grid if g < m), reverse=True):
            result = _sweep(gpus, model, job, profile, hw, cluster, smaller,
                            seed, opportunistic, schedule_policy)
            if result is not None:
                break
    if result is None:
        raise InfeasibleError(
            "no feasible configuration: the model does not fit at any "
            f"pipeline depth up to {min(model.num_cutpoints, gpus)}"
        )
    return result


def _sweep(gpus, model, job, profile, hw, cluster, m, seed,
           opportunistic, schedule_policy) -> Optional[PlanResult]:
    k = model.num_cutpoints
    p_max = min(k, gpus)

    candidates: List[Candidate] = []
    best: Optional[Candidate] = None
    for p in range(1, p_max + 1):
        d = gpus // p
        if d == 0:
            break
        assignment = assign_stages(model, p, m, profile)
        n_m = micro_batches_for(job, m, d)
        schedule = _make_schedule(schedule_policy, p, n_m)
        report = memory_check(
            assignment, m, n_m, hw,
            in_flight_bound=[
                schedule.in_flight_bound(s + 1) + DEFAULT_STASH_PAD for s in range(p)
            ],
            bytes_per_param=profile.optimizer_bytes_per_param,
        )
        if not report.feasible:
            continue
        config = ParallelConfig(
            pipeline_depth=p,
            data_parallel=d,
            micro_batch_size=m,
            num_micro_batches=n_m,
            stage_map=assignment.stage_map,
        )
        placement = build_placement(cluster, p, d)
        result = simulate_minibatch(
            schedule, config, profile, placement, model,
            seed=seed, opportunistic=opportunistic,
        )
        cand = Candidate(config=config, minibatch_us=result.minibatch_us)
        candidates.append(cand)
        if best is None or _better(cand, best):
            best = cand
    if best is None:
        return None
    return PlanResult(
        chosen=best.config,
        minibatch_us=best.minibatch_us,
        total_gpus=gpus,
        candidates=tuple(candidates),
    )


def _better(a: Candidate, b: Candidate) -> bool:
    """Faster wins; ties prefer a shallower pipeline, then more replicas."""
    ka = (a.minibatch_us, a.config.pipeline_depth, -a.config.data_parallel)
    kb = (b.minibatch_us, b.config.pipeline_depth, -b.config.data_parallel)
    return ka < kb


def _make_schedule(policy: str, p: int, n_m: int) -> Schedule:
    # The schedule family only needs the uniform-model shape; per-stage times
    # come from the profile inside the simulator.
    gen = generate_varuna_schedule if policy == POLICY_VARUNA else generate_gpipe_schedule
    return gen(p, n_m, 1.0, 2.0, 1.0)

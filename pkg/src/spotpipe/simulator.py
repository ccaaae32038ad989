"""Event-driven execution of one mini-batch over a placed configuration.

``simulate_minibatch`` runs each of the D pipeline replicas through the
replica kernel (compiled when available), then starts each stage's gradient
allreduce when the slowest replica of that stage finishes its last backward.
Network jitter on cross-node links is presampled with a counter-based
generator keyed by (seed, replica, boundary, direction, micro-batch), so
results never depend on replica execution order and are bit-identical across
kernels and runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import engine
from .calibration import CalibrationProfile
from .core import (
    KIND_BACKWARD,
    KIND_FORWARD,
    KIND_NAMES,
    KIND_RECOMPUTE,
    ClusterState,
    ConfigError,
    ModelSpec,
    ParallelConfig,
    seconds_from_us,
)
from .scheduler import Schedule

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class Placement:
    """(stage, replica) -> (vm_id, gpu_index, node_id), plus the link class of
    every adjacent stage boundary per replica."""

    assignments: Dict[Tuple[int, int], Tuple[str, int, str]]
    pipeline_depth: int
    data_parallel: int

    def node_of(self, stage: int, replica: int) -> str:
        return self.assignments[(stage, replica)][2]

    def boundary_is_inter(self, boundary: int, replica: int) -> bool:
        """True when the (stage boundary -> boundary+1) link of this replica
        crosses nodes."""
        return self.node_of(boundary, replica) != self.node_of(boundary + 1, replica)


def build_placement(cluster: ClusterState, pipeline_depth: int, data_parallel: int) -> Placement:
    """Deterministic placement: walk VMs GPU by GPU, replica-major, so that
    consecutive stages of one replica land on the same VM when it has several
    GPUs."""
    slots = []
    for vm in cluster.vms:
        for g in range(vm.gpus_on_vm):
            slots.append((vm.vm_id, g, vm.node_id))
    needed = pipeline_depth * data_parallel
    if needed > len(slots):
        raise ConfigError(
            f"placement: need {needed} GPUs, cluster has {len(slots)}"
        )
    assignments = {}
    i = 0
    for replica in range(data_parallel):
        for stage in range(pipeline_depth):
            assignments[(stage, replica)] = slots[i]
            i += 1
    return Placement(
        assignments=assignments,
        pipeline_depth=pipeline_depth,
        data_parallel=data_parallel,
    )


@dataclass(frozen=True)
class SimulationResult:
    minibatch_us: int
    makespan_us: int  # last compute task end, before allreduce completes
    seed: int
    policy: str
    opportunistic: bool
    engine_name: str
    pipeline_depth: int
    data_parallel: int
    num_micro_batches: int
    allreduce_us: Tuple[int, ...]  # per stage
    allreduce_start_us: Tuple[int, ...]
    stage_idle_us: Tuple[Tuple[int, ...], ...]  # [stage][replica]
    peak_memory_bytes: Tuple[int, ...]  # per stage, max over replicas
    peak_stash: Tuple[Tuple[int, ...], ...]  # [stage][replica]
    peak_working_sets: Tuple[Tuple[int, ...], ...]
    replicas: Tuple[dict, ...]  # raw kernel outputs

    @property
    def minibatch_seconds(self) -> float:
        return seconds_from_us(self.minibatch_us)

    @property
    def bubble_fraction(self) -> float:
        busy = 0
        for r in self.replicas:
            busy += int((r["task_end"] - r["task_start"]).sum())
        busy += sum(self.allreduce_us) * self.data_parallel
        total = self.pipeline_depth * self.data_parallel * self.minibatch_us
        return 1.0 - busy / total if total else 0.0

    def gantt_rows(self, replica: int = 0) -> List[Tuple[int, str, int, int, int]]:
        """(stage, kind, micro_batch, start_us, end_us) rows for one replica,
        1-based stage and micro-batch, plus one allreduce row per stage."""
        r = self.replicas[replica]
        rows = [
            (int(s) + 1, KIND_NAMES[int(k)], int(mb) + 1, int(a), int(b))
            for s, k, mb, a, b in zip(
                r["task_stage"], r["task_kind"], r["task_mb"],
                r["task_start"], r["task_end"],
            )
        ]
        for s in range(self.pipeline_depth):
            start = self.allreduce_start_us[s]
            rows.append((s + 1, "A", 0, start, start + self.allreduce_us[s]))
        rows.sort(key=lambda row: (row[0], row[3], row[1]))
        return rows

    def event_log_lines(self, replica: int = 0) -> List[str]:
        """Line-delimited ``time_us,stage,replica,event,detail`` records."""
        r = self.replicas[replica]
        out = []
        for s, k, mb, a, b in zip(r["task_stage"], r["task_kind"], r["task_mb"],
                                  r["task_start"], r["task_end"]):
            name = KIND_NAMES[int(k)]
            out.append(f"{int(a)},{int(s) + 1},{replica},start,{name}{int(mb) + 1}")
            out.append(f"{int(b)},{int(s) + 1},{replica},end,{name}{int(mb) + 1}")
        for send, grant, arrive, boundary, d, mb in zip(
            r["msg_send"], r["msg_grant"], r["msg_arrive"],
            r["msg_boundary"], r["msg_dir"], r["msg_mb"],
        ):
            kind = "grad" if int(d) else "act"
            src = int(boundary) + (2 if int(d) else 1)
            dst = int(boundary) + (1 if int(d) else 2)
            out.append(f"{int(send)},{src},{replica},send,{kind}{int(mb) + 1}->S{dst}")
            out.append(f"{int(arrive)},{dst},{replica},arrive,{kind}{int(mb) + 1}")
        out.sort(key=lambda line: int(line.split(",", 1)[0]))
        return out

    def to_summary_dict(self) -> dict:
        return {
            "minibatch_us": self.minibatch_us,
            "minibatch_seconds": self.minibatch_seconds,
            "makespan_us": self.makespan_us,
            "seed": self.seed,
            "policy": self.policy,
            "opportunistic": self.opportunistic,
            "engine": self.engine_name,
            "pipeline_depth": self.pipeline_depth,
            "data_parallel": self.data_parallel,
            "num_micro_batches": self.num_micro_batches,
            "allreduce_us": list(self.allreduce_us),
            "bubble_fraction": self.bubble_fraction,
            "stage_idle_us": [list(x) for x in self.stage_idle_us],
            "peak_memory_bytes": list(self.peak_memory_bytes),
        }


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + _GOLDEN).astype(np.uint64)
        x = ((x ^ (x >> np.uint64(30))) * _MIX1).astype(np.uint64)
        x = ((x ^ (x >> np.uint64(27))) * _MIX2).astype(np.uint64)
        return x ^ (x >> np.uint64(31))


def _jittered_transfers(
    mean_us: int,
    jitter_us: int,
    n_micro: int,
    seed: int,
    replica: int,
    boundary: int,
    direction: int,
) -> np.ndarray:
    """Per micro-batch transfer times: mean plus one truncated-at-zero normal
    jitter draw per message, keyed by message identity."""
    if jitter_us <= 0:
        return np.full(n_micro, mean_us, dtype=np.int64)
    with np.errstate(over="ignore"):
        base = (
            np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
            ^ (np.uint64(replica + 1) * np.uint64(0xD6E8FEB86659FD93))
            ^ (np.uint64(boundary + 1) * np.uint64(0xA5A5A5A5A5A5A5A5))
            ^ (np.uint64(direction + 1) * np.uint64(0x2545F4914F6CDD1D))
        )
        keys = base + np.arange(n_micro, dtype=np.uint64) * _GOLDEN
    z1 = _splitmix64(keys)
    z2 = _splitmix64(z1)
    u1 = ((z1 >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
    u2 = ((z2 >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
    normal = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    dur = np.rint(mean_us + jitter_us * normal)
    return np.maximum(dur, 0).astype(np.int64)


def _check_structure(schedule: Schedule) -> None:
    """Each stage must run F(j) before R(j) (if any) before B(j), once each;
    the kernels rely on this ordering for dependency tracking."""
    n = schedule.num_micro_batches
    for k in range(schedule.pipeline_depth):
        lo, hi = int(schedule.offsets[k]), int(schedule.offsets[k + 1])
        kinds = schedule.kinds[lo:hi]
        mbs = schedule.mbs[lo:hi]
        pos = np.arange(hi - lo, dtype=np.int64)
        fpos = np.full(n, -1, dtype=np.int64)
        bpos = np.full(n, -1, dtype=np.int64)
        rpos = np.full(n, -1, dtype=np.int64)
        for arr, kind in ((fpos, KIND_FORWARD), (bpos, KIND_BACKWARD),
                          (rpos, KIND_RECOMPUTE)):
            sel = kinds == kind
            if np.unique(mbs[sel]).size != int(sel.sum()):
                raise ConfigError(f"schedule: stage {k + 1} repeats a task")
            arr[mbs[sel]] = pos[sel]
        if (fpos < 0).any() or (bpos < 0).any():
            j = int(np.argmin(np.minimum(fpos, bpos))) + 1
            raise ConfigError(
                f"schedule: stage {k + 1} missing forward or backward for micro-batch {j}"
            )
        has_r = rpos >= 0
        if (fpos > bpos).any() or (has_r & ((rpos < fpos) | (rpos > bpos))).any():
            raise ConfigError(
                f"schedule: stage {k + 1} orders micro-batch tasks inconsistently"
            )


def stage_times_us(
    config: ParallelConfig, profile: CalibrationProfile, recompute_scale: float = 1.0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-stage forward/backward/recompute microseconds for the stage map."""
    p = config.pipeline_depth
    m = config.micro_batch_size
    fwd = np.zeros(p, dtype=np.int64)
    bwd = np.zeros(p, dtype=np.int64)
    for i, stage in enumerate(config.stage_map):
        fwd[stage] += profile.forward_us(i, m)
        bwd[stage] += profile.backward_us(i, m)
    rec = np.rint(fwd * recompute_scale).astype(np.int64)
    return fwd, bwd, rec


DEFAULT_STASH_PAD = 4


def simulate_minibatch(
    schedule: Schedule,
    config: ParallelConfig,
    profile: CalibrationProfile,
    placement: Placement,
    model: ModelSpec,
    seed: int = 0,
    opportunistic: bool = True,
    serialize_links: bool = True,
    allreduce_barrier: bool = False,
    recompute_scale: float = 1.0,
    stash_pad: int = DEFAULT_STASH_PAD,
    extra_minibatch_us: int = 0,
) -> SimulationResult:
    p = config.pipeline_depth
    d = config.data_parallel
    n = config.num_micro_batches
    m = config.micro_batch_size
    if schedule.pipeline_depth != p or schedule.num_micro_batches != n:
        raise ConfigError(
            f"schedule is ({schedule.pipeline_depth}, {schedule.num_micro_batches}), "
            f"config needs ({p}, {n})"
        )
    if placement.pipeline_depth != p or placement.data_parallel != d:
        raise ConfigError("placement does not match the configuration")
    if len(config.stage_map) != model.num_cutpoints:
        raise ConfigError("config stage_map does not cover the model's cut-points")
    _check_structure(schedule)

    fwd, bwd, rec = stage_times_us(config, profile, recompute_scale)
    if int(fwd.min()) <= 0 or int(bwd.min()) <= 0 or int(rec.min()) <= 0:
        raise ConfigError("profile gives a stage zero compute time; times must be > 0")
    kinds, mbs, offsets = schedule.kinds, schedule.mbs, schedule.offsets

    # Boundary cut-point = last cut-point of the upstream stage.
    boundary_cut = [max(i for i, s in enumerate(config.stage_map) if s == k)
                    for k in range(p - 1)]
    ar_us = np.zeros(p, dtype=np.int64)
    for i, stage in enumerate(config.stage_map):
        ar_us[stage] += profile.allreduce_us(i, d)

    in_act = np.zeros(p, dtype=np.int64)
    work = np.zeros(p, dtype=np.int64)
    for k in range(p):
        cuts = [i for i, s in enumerate(config.stage_map) if s == k]
        in_act[k] = m * model.stage_input_bytes(cuts[0])
        work[k] = m * sum(model.cutpoint_activation_bytes[i] for i in cuts)
    # Opportunistic fills may not stash beyond the plan's in-flight bound
    # plus a small buffer that absorbs transfer phase shifts; memory
    # feasibility is priced against the same padded bound.
    stash_cap = np.array(
        [schedule.in_flight_bound(k + 1) + stash_pad for k in range(p)],
        dtype=np.int64,
    )

    replicas = []
    for r in range(d):
        act_tx = np.zeros(max(p - 1, 0) * n, dtype=np.int64)
        grad_tx = np.zeros(max(p - 1, 0) * n, dtype=np.int64)
        exp_grad = np.zeros(max(p - 1, 1), dtype=np.int64)
        for k in range(p - 1):
            inter = placement.boundary_is_inter(k, r)
            a_mean, a_jit = profile.transfer_us(boundary_cut[k], m, inter, gradient=False)
            g_mean, g_jit = profile.transfer_us(boundary_cut[k], m, inter, gradient=True)
            act_tx[k * n:(k + 1) * n] = _jittered_transfers(a_mean, a_jit, n, seed, r, k, 0)
            grad_tx[k * n:(k + 1) * n] = _jittered_transfers(g_mean, g_jit, n, seed, r, k, 1)
            exp_grad[k] = g_mean
        replicas.append(
            engine.run_replica(
                p, n, kinds, mbs, offsets, fwd, bwd, rec,
                act_tx, grad_tx, exp_grad, in_act, work, stash_cap,
                opportunistic, serialize_links,
            )
        )

    makespan = max(int(r["makespan"]) for r in replicas)
    if allreduce_barrier:
        global_last = max(int(r["last_bwd_end"].max()) for r in replicas)
        ar_start = [global_last] * p
    else:
        ar_start = [max(int(r["last_bwd_end"][k]) for r in replicas) for k in range(p)]
    # extra_minibatch_us is a flat end-of-batch cost hook (e.g. host-side
    # optimizer state transfers for models too large for GPU memory).
    minibatch = max(ar_start[k] + int(ar_us[k]) for k in range(p)) + int(extra_minibatch_us)

    # Analytic lower bounds: the busiest stage's total work, and one
    # micro-batch's fill+drain path. Transfers and jitter only add.
    rec_counts = [
        int((kinds[int(offsets[k]):int(offsets[k + 1])] == KIND_RECOMPUTE).sum())
        for k in range(p)
    ]
    bound_work = max(
        n * (int(fwd[k]) + int(bwd[k])) + rec_counts[k] * int(rec[k]) for k in range(p)
    )
    bound_path = int(fwd.sum()) + int(bwd.sum())
    assert makespan >= bound_work, "makespan below per-stage work bound"
    assert makespan >= bound_path, "makespan below fill/drain bound"

    idle_cols = []
    for rep in replicas:
        stages = rep["task_stage"]
        busy = np.bincount(stages, weights=(rep["task_end"] - rep["task_start"]),
                           minlength=p).astype(np.int64)
        first = np.full(p, minibatch, dtype=np.int64)
        np.minimum.at(first, stages, rep["task_start"])
        idle_cols.append(minibatch - first - busy)
    idle = tuple(tuple(int(col[k]) for col in idle_cols) for k in range(p))
    return SimulationResult(
        minibatch_us=minibatch,
        makespan_us=makespan,
        seed=seed,
        policy=schedule.policy,
        opportunistic=opportunistic,
        engine_name=engine.ENGINE_NAME,
        pipeline_depth=p,
        data_parallel=d,
        num_micro_batches=n,
        allreduce_us=tuple(int(x) for x in ar_us),
        allreduce_start_us=tuple(ar_start),
        stage_idle_us=idle,
        peak_memory_bytes=tuple(
            max(int(rep["peak_mem"][k]) for rep in replicas) for k in range(p)
        ),
        peak_stash=tuple(
            tuple(int(rep["peak_stash"][k]) for rep in replicas) for k in range(p)
        ),
        peak_working_sets=tuple(
            tuple(int(rep["peak_sets"][k]) for rep in replicas) for k in range(p)
        ),
        replicas=tuple(replicas),
    )



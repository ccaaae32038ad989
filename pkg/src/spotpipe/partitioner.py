"""Cut-point identification and stage grouping.

``identify_cutpoints`` slices an operator profile into K sections: a two-phase
dynamic program first minimizes the maximum section compute time, then, among
partitions whose sections fit a tolerance window above that optimum, picks
boundaries with the smallest total output activation (earliest boundaries on
ties). Boundaries spanned by a parameter group are only usable when the group
is flagged shared, and such crossings are reported.

``assign_stages`` groups cut-points into P contiguous stages minimizing the
maximum per-stage forward time (the classic linear-partition objective, solved
exactly in O(K^2 P)); ``memory_check`` prices each stage's parameter/optimizer
state and activation footprint against GPU memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import yaml

from .calibration import CalibrationProfile
from .core import (
    ConfigError,
    HardwareSpec,
    InfeasibleError,
    ModelSpec,
    OPTIMIZER_BYTES_PER_PARAM,
)

_INF = float("inf")


@dataclass(frozen=True)
class Operation:
    name: str
    compute_us: int
    output_activation_bytes: int
    owned_parameters: int
    param_groups: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if self.compute_us < 0 or self.output_activation_bytes < 0:
            raise ConfigError(f"op {self.name}: times and sizes must be >= 0")
        if self.owned_parameters < 0:
            raise ConfigError(f"op {self.name}: owned_parameters must be >= 0")


@dataclass(frozen=True)
class OpProfile:
    ops: Tuple[Operation, ...]
    shared_groups: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if not self.ops:
            raise ConfigError("op profile: must contain at least one operation")


@dataclass(frozen=True)
class CutpointReport:
    model: ModelSpec
    boundaries: Tuple[int, ...]  # op index ending each section
    shared_crossings: Tuple[Tuple[str, int], ...]  # (group, boundary op index)
    section_compute_us: Tuple[int, ...]
    max_section_us: int
    total_boundary_activation: int


def load_op_profile(path: str) -> OpProfile:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: parse error: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for key in doc:
        if key not in {"format_version", "ops", "shared_groups"}:
            raise ConfigError(f"{path}.{key}: unknown key")
    raw_ops = doc.get("ops")
    if not isinstance(raw_ops, list) or not raw_ops:
        raise ConfigError(f"{path}.ops: expected a non-empty list")
    ops = []
    for i, raw in enumerate(raw_ops):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}.ops[{i}]: expected a mapping")
        for key in raw:
            if key not in {"name", "compute_us", "activation_bytes", "parameters", "param_groups"}:
                raise ConfigError(f"{path}.ops[{i}].{key}: unknown key")
        ops.append(
            Operation(
                name=str(raw.get("name", f"op{i}")),
                compute_us=int(raw["compute_us"]),
                output_activation_bytes=int(raw["activation_bytes"]),
                owned_parameters=int(raw.get("parameters", 0)),
                param_groups=frozenset(str(g) for g in raw.get("param_groups", [])),
            )
        )
    return OpProfile(
        ops=tuple(ops),
        shared_groups=frozenset(str(g) for g in doc.get("shared_groups", [])),
    )


def _spanning_groups(profile: OpProfile) -> List[FrozenSet[str]]:
    """For each boundary b (after op b), the parameter groups used both at or
    before b and after b."""
    n = len(profile.ops)
    seen_before: set = set()
    after: List[set] = [set() for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        after[i] = after[i + 1] | set(profile.ops[i].param_groups)
    spans = []
    for b in range(n - 1):
        seen_before |= set(profile.ops[b].param_groups)
        spans.append(frozenset(seen_before & after[b + 1]))
    return spans


def identify_cutpoints(
    profile: OpProfile,
    num_cutpoints: int,
    tolerance: float = 0.2,
    name: str = "partitioned-model",
) -> CutpointReport:
    """Partition the operation list into ``num_cutpoints`` contiguous sections.

    Sections are balanced in compute time; within a (1 + tolerance) window of
    the best achievable maximum (never below total/K), boundaries with the
    smallest activation win. A boundary crossed by an unshared parameter group
    is unusable; crossings by flagged shared groups are allowed and reported.
    """
    ops = profile.ops
    n = len(ops)
    k = num_cutpoints
    if k < 1:
        raise ConfigError("identify_cutpoints: need at least one section")
    if k > n:
        raise InfeasibleError(
            f"identify_cutpoints: {k} cut-points exceed {n} operations"
        )
    spans = _spanning_groups(profile)
    breakable = [all(g in profile.shared_groups for g in spans[b]) for b in range(n - 1)]
    times = [op.compute_us for op in ops]
    prefix = [0]
    for t in times:
        prefix.append(prefix[-1] + t)

    def section(i: int, j: int) -> int:  # ops[i..j] inclusive
        return prefix[j + 1] - prefix[i]

    # Phase 1: minimal max section time over exactly k sections.
    minmax = [[_INF] * (n + 1) for _ in range(k + 1)]
    for i in range(n):
        minmax[1][i] = section(i, n - 1)
    for j in range(2, k + 1):
        for i in range(n):
            best = _INF
            for e in range(i, n - 1):
                if not breakable[e]:
                    continue
                s = section(i, e)
                if s >= best:
                    break  # sections grow with e; no improvement possible
                rest = minmax[j - 1][e + 1]
                cand = s if s > rest else rest
                if cand < best:
                    best = cand
            minmax[j][i] = best
    best_max = minmax[k][0]
    if best_max == _INF:
        raise InfeasibleError(
            "identify_cutpoints: unbreakable parameter overlap blocks every "
            f"{k}-way partition"
        )
    total = prefix[n]
    cap = max(int(best_max), math.ceil((1.0 + tolerance) * total / k))

    # Phase 2: min total boundary activation with sections <= cap; among
    # optima pick the earliest boundaries, reconstructing left to right.
    acts = [op.output_activation_bytes for op in ops]
    min_act = [[_INF] * (n + 1) for _ in range(k + 1)]
    for i in range(n):
        if section(i, n - 1) <= cap:
            min_act[1][i] = 0
    for j in range(2, k + 1):
        for i in range(n):
            best = _INF
            for e in range(i, n - 1):
                if section(i, e) > cap:
                    break
                if not breakable[e]:
                    continue
                rest = min_act[j - 1][e + 1]
                if rest < _INF and acts[e] + rest < best:
                    best = acts[e] + rest
            min_act[j][i] = best
    if min_act[k][0] == _INF:
        raise InfeasibleError("identify_cutpoints: no partition fits the window")

    boundaries: List[int] = []
    i = 0
    for j in range(k, 1, -1):
        target = min_act[j][i]
        for e in range(i, n - 1):
            if section(i, e) > cap:
                break
            if not breakable[e]:
                continue
            rest = min_act[j - 1][e + 1]
            if rest < _INF and acts[e] + rest == target:
                boundaries.append(e)
                i = e + 1
                break
    boundaries.append(n - 1)

    params, bounds_act, section_us = [], [], []
    start = 0
    max_section = 0
    for e in boundaries:
        params.append(sum(op.owned_parameters for op in ops[start:e + 1]))
        bounds_act.append(ops[e].output_activation_bytes)
        section_us.append(section(start, e))
        max_section = max(max_section, section(start, e))
        start = e + 1
    crossings = []
    for e in boundaries[:-1]:
        for g in sorted(spans[e]):
            crossings.append((g, e))
    model = ModelSpec(
        name=name,
        cutpoint_parameters=tuple(max(p, 1) for p in params),
        cutpoint_activation_bytes=tuple(max(a, 1) for a in bounds_act),
    )
    return CutpointReport(
        model=model,
        boundaries=tuple(boundaries),
        shared_crossings=tuple(crossings),
        section_compute_us=tuple(section_us),
        max_section_us=max_section,
        total_boundary_activation=sum(acts[e] for e in boundaries[:-1]),
    )


@dataclass(frozen=True)
class StageAssignment:
    stage_map: Tuple[int, ...]
    boundaries: Tuple[int, ...]  # cut-point index ending each stage
    stage_parameters: Tuple[int, ...]
    stage_forward_us: Tuple[int, ...]
    stage_input_activation_bytes: Tuple[int, ...]  # per example
    stage_working_activation_bytes: Tuple[int, ...]  # per example
    stage_boundary_activation_bytes: Tuple[int, ...]
    micro_batch_size: int

    @property
    def pipeline_depth(self) -> int:
        return len(self.boundaries)

    @property
    def max_stage_forward_us(self) -> int:
        return max(self.stage_forward_us)


def assign_stages(
    model: ModelSpec,
    pipeline_depth: int,
    micro_batch_size: int,
    profile: CalibrationProfile,
    last_stage_weight: float = 1.0,
) -> StageAssignment:
    """Contiguous grouping of cut-points minimizing the maximum per-stage
    forward time, ties broken by smaller total boundary activation, then by
    earlier boundaries.

    ``last_stage_weight`` scales the final stage's load in the balance
    objective; below 1.0 it packs extra work there, where no recompute runs.
    """
    k = model.num_cutpoints
    p = pipeline_depth
    m = micro_batch_size
    if p > k:
        raise InfeasibleError(f"assign_stages: P={p} exceeds K={k} cut-points")
    if p < 1:
        raise ConfigError("assign_stages: P must be >= 1")
    if profile.num_cutpoints != k:
        raise ConfigError(
            f"assign_stages: profile has {profile.num_cutpoints} cut-points, model has {k}"
        )
    f = [profile.forward_us(i, m) for i in range(k)]
    acts = list(model.cutpoint_activation_bytes)
    prefix = [0]
    for t in f:
        prefix.append(prefix[-1] + t)

    def seg(i: int, j: int) -> int:
        return prefix[j + 1] - prefix[i]

    def last_cost(i: int) -> float:
        return last_stage_weight * seg(i, k - 1)

    minmax = [[_INF] * (k + 1) for _ in range(p + 1)]
    for i in range(k):
        minmax[1][i] = last_cost(i)
    for j in range(2, p + 1):
        for i in range(k):
            best = _INF
            for e in range(i, k - 1):
                s = seg(i, e)
                if s >= best:
                    break
                rest = minmax[j - 1][e + 1]
                cand = s if s > rest else rest
                if cand < best:
                    best = cand
            minmax[j][i] = best
    best_max = minmax[p][0]

    min_act = [[_INF] * (k + 1) for _ in range(p + 1)]
    for i in range(k):
        if last_cost(i) <= best_max:
            min_act[1][i] = 0
    for j in range(2, p + 1):
        for i in range(k):
            best = _INF
            for e in range(i, k - 1):
                if seg(i, e) > best_max:
                    break
                rest = min_act[j - 1][e + 1]
                if rest < _INF and acts[e] + rest < best:
                    best = acts[e] + rest
            min_act[j][i] = best

    boundaries: List[int] = []
    i = 0
    for j in range(p, 1, -1):
        target = min_act[j][i]
        for e in range(i, k - 1):
            if seg(i, e) > best_max:
                break
            rest = min_act[j - 1][e + 1]
            if rest < _INF and acts[e] + rest == target:
                boundaries.append(e)
                i = e + 1
                break
    boundaries.append(k - 1)

    stage_map = []
    for stage, e in enumerate(boundaries):
        start = boundaries[stage - 1] + 1 if stage else 0
        stage_map.extend([stage] * (e - start + 1))
    stage_params, stage_f, in_act, work_act, bound_act = [], [], [], [], []
    start = 0
    for e in boundaries:
        stage_params.append(sum(model.cutpoint_parameters[start:e + 1]))
        stage_f.append(seg(start, e))
        in_act.append(model.stage_input_bytes(start))
        work_act.append(sum(model.cutpoint_activation_bytes[start:e + 1]))
        bound_act.append(model.cutpoint_activation_bytes[e])
        start = e + 1
    return StageAssignment(
        stage_map=tuple(stage_map),
        boundaries=tuple(boundaries),
        stage_parameters=tuple(stage_params),
        stage_forward_us=tuple(stage_f),
        stage_input_activation_bytes=tuple(in_act),
        stage_working_activation_bytes=tuple(work_act),
        stage_boundary_activation_bytes=tuple(bound_act),
        micro_batch_size=m,
    )


@dataclass(frozen=True)
class StageMemory:
    stage: int
    parameter_state_bytes: int
    stashed_activation_bytes: int
    working_activation_bytes: int
    feasible: bool
    headroom_bytes: int

    @property
    def total_bytes(self) -> int:
        return (
            self.parameter_state_bytes
            + self.stashed_activation_bytes
            + self.working_activation_bytes
        )


@dataclass(frozen=True)
class MemoryReport:
    stages: Tuple[StageMemory, ...]

    @property
    def feasible(self) -> bool:
        return all(s.feasible for s in self.stages)


def memory_check(
    assignment: StageAssignment,
    micro_batch_size: int,
    num_micro_batches: int,
    hw: HardwareSpec,
    in_flight_bound: Optional[Sequence[int]] = None,
    bytes_per_param: int = OPTIMIZER_BYTES_PER_PARAM,
) -> MemoryReport:
    """Per-stage feasibility: parameter + optimizer state (bytes_per_param per
    parameter), stashed input activations for in-flight micro-batches (worst
    case N_m when the scheduler supplies no bound) and one working activation
    set. Infeasibility is data, never an error."""
    m = micro_batch_size
    stages = []
    for s in range(assignment.pipeline_depth):
        bound = num_micro_batches
        if in_flight_bound is not None:
            bound = min(num_micro_batches, in_flight_bound[s])
        param_bytes = bytes_per_param * assignment.stage_parameters[s]
        stash = bound * m * assignment.stage_input_activation_bytes[s]
        working = m * assignment.stage_working_activation_bytes[s]
        total = param_bytes + stash + working
        stages.append(
            StageMemory(
                stage=s,
                parameter_state_bytes=param_bytes,
                stashed_activation_bytes=stash,
                working_activation_bytes=working,
                feasible=total <= hw.gpu_memory_bytes,
                headroom_bytes=hw.gpu_memory_bytes - total,
            )
        )
    return MemoryReport(stages=tuple(stages))

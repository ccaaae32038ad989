"""Cluster-manager replay over preemption traces.

``replay`` walks a timestamped add/remove trace of spot VMs, re-planning the
job at every membership change (and whenever fail-stutter detection flags a
machine), while holding the mini-batch size fixed so training semantics never
change. A removal rolls the job back to its last completed checkpoint, so at
most ``checkpoint_interval`` mini-batches of work are ever lost; planner and
heartbeat synthesis are deterministic per seed.

The reconfiguration downtime model (missed-heartbeat detection delay, restart
overhead, replanning cost) uses explicit, unvalidated default constants; each
term is reported separately on the timeline events.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .calibration import CalibrationProfile
from .core import (
    ClusterState,
    ConfigError,
    HardwareSpec,
    InfeasibleError,
    JobSpec,
    ModelSpec,
    ParallelConfig,
    VM,
)
from .planner import PlanResult, plan, select_microbatch
from .simulator import build_placement

ADD = "add"
REMOVE = "remove"


@dataclass(frozen=True)
class TraceEvent:
    time_s: float
    kind: str  # add | remove
    vm_id: str
    gpus_on_vm: int
    node_id: str


@dataclass(frozen=True)
class PreemptionTrace:
    events: Tuple[TraceEvent, ...]

    def __post_init__(self):
        present: Set[str] = set()
        last_t = None
        for i, ev in enumerate(self.events):
            if ev.kind not in (ADD, REMOVE):
                raise ConfigError(f"trace[{i}]: unknown event kind {ev.kind!r}")
            if last_t is not None and ev.time_s < last_t:
                raise ConfigError(f"trace[{i}]: timestamps must be non-decreasing")
            last_t = ev.time_s
            if ev.kind == ADD:
                if ev.vm_id in present:
                    raise ConfigError(f"trace[{i}]: add of already-present vm {ev.vm_id}")
                present.add(ev.vm_id)
            else:
                if ev.vm_id not in present:
                    raise ConfigError(f"trace[{i}]: remove of absent vm {ev.vm_id}")
                present.discard(ev.vm_id)


def load_trace(path: str) -> PreemptionTrace:
    """Line format: ``time_s kind vm_id gpus node_id`` ('#' starts a comment)."""
    events = []
    try:
        with open(path) as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 5:
            raise ConfigError(
                f"{path}:{lineno}: expected 'time_s kind vm_id gpus node_id'"
            )
        try:
            events.append(
                TraceEvent(
                    time_s=float(parts[0]),
                    kind=parts[1],
                    vm_id=parts[2],
                    gpus_on_vm=int(parts[3]),
                    node_id=parts[4],
                )
            )
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: {e}")
    return PreemptionTrace(events=tuple(events))


def save_trace(trace: PreemptionTrace, path: str) -> None:
    with open(path, "w") as f:
        for ev in trace.events:
            f.write(f"{ev.time_s} {ev.kind} {ev.vm_id} {ev.gpus_on_vm} {ev.node_id}\n")


@dataclass(frozen=True)
class Heartbeat:
    vm_id: str
    stage: int
    forward_s: float
    backward_s: float

    def __post_init__(self):
        if self.forward_s <= 0 or self.backward_s <= 0:
            raise ConfigError(f"heartbeat from {self.vm_id}: times must be > 0")


def detect_fail_stutter(
    heartbeats: Sequence[Heartbeat],
    outlier_factor: float = 1.25,
) -> Set[str]:
    """VMs whose forward+backward time exceeds ``outlier_factor`` times the
    median across replicas of the same stage. Stages with fewer than three
    heartbeats are skipped (no meaningful median)."""
    by_stage: Dict[int, List[Heartbeat]] = {}
    for hb in heartbeats:
        by_stage.setdefault(hb.stage, []).append(hb)
    flagged: Set[str] = set()
    for stage, group in by_stage.items():
        if len(group) < 3:
            continue
        med = statistics.median(hb.forward_s + hb.backward_s for hb in group)
        for hb in group:
            if hb.forward_s + hb.backward_s > outlier_factor * med:
                flagged.add(hb.vm_id)
    return flagged


@dataclass(frozen=True)
class CheckpointCost:
    seconds_per_checkpoint: float
    overhead_fraction: Optional[float]


def checkpoint_cost(
    stage_parameters: Sequence[int],
    data_parallel: int,
    checkpoint_interval: int,
    local_write_bandwidth: float,
    minibatch_seconds: Optional[float] = None,
    bytes_per_param: int = 16,
) -> CheckpointCost:
    """Foreground checkpoint cost with replica sharding: each of a stage's D
    replicas writes 1/D of the stage's parameter+optimizer state to local SSD;
    stages write in parallel, so the slowest (largest) stage prices the
    checkpoint. Background upload to remote storage is not charged."""
    if data_parallel < 1 or checkpoint_interval < 1:
        raise ConfigError("checkpoint_cost: D and interval must be >= 1")
    if local_write_bandwidth <= 0:
        raise ConfigError("checkpoint_cost: write bandwidth must be > 0")
    worst = max(
        bytes_per_param * p / data_parallel / local_write_bandwidth
        for p in stage_parameters
    )
    fraction = None
    if minibatch_seconds is not None:
        busy = checkpoint_interval * minibatch_seconds
        fraction = worst / (busy + worst)
    return CheckpointCost(seconds_per_checkpoint=worst, overhead_fraction=fraction)


@dataclass(frozen=True)
class ReplayParams:
    seed: int = 0
    heartbeat_period_s: float = 1.0
    restart_overhead_s: float = 30.0  # unvalidated default
    replan_overhead_s: float = 1.0  # unvalidated default
    local_write_bandwidth: float = 1e9
    outlier_factor: float = 1.25
    vm_slowdowns: Dict[str, float] = field(default_factory=dict)
    horizon_s: Optional[float] = None

    @property
    def detection_delay_s(self) -> float:
        # Preemption is noticed after three missed heartbeats.
        return 3.0 * self.heartbeat_period_s


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    config: Optional[ParallelConfig]  # None while paused
    minibatch_s: float
    iterations: int
    examples_per_s: float
    examples_per_s_per_gpu: float
    placement_vms: Tuple[str, ...] = ()


@dataclass(frozen=True)
class MorphEvent:
    time_s: float
    kind: str  # reconfigure | passthrough | pause | resume | checkpoint | flag
    detail: str
    detection_s: float = 0.0
    restore_s: float = 0.0
    replan_s: float = 0.0
    lost_minibatches: int = 0
    lost_replay_s: float = 0.0


@dataclass(frozen=True)
class MorphTimeline:
    """Segments record the mini-batches run while each configuration was
    active; ``total_examples`` counts committed work only (mini-batches lost
    to a preemption are re-run and counted once)."""

    segments: Tuple[Segment, ...]
    events: Tuple[MorphEvent, ...]
    total_examples: int
    iterations_committed: int
    minibatch_examples: int

    def to_csv(self) -> str:
        lines = ["start,end,P,D,ex_per_s,ex_per_s_per_gpu,event"]
        starts = {}
        for ev in self.events:
            if ev.kind in ("reconfigure", "passthrough", "pause", "resume"):
                starts[ev.time_s] = ev.kind
        for seg in self.segments:
            p = seg.config.pipeline_depth if seg.config else 0
            d = seg.config.data_parallel if seg.config else 0
            event = starts.get(seg.start_s, "")
            lines.append(
                f"{seg.start_s:.3f},{seg.end_s:.3f},{p},{d},"
                f"{seg.examples_per_s:.4f},{seg.examples_per_s_per_gpu:.4f},{event}"
            )
        return "\n".join(lines) + "\n"


class _Replayer:
    def __init__(self, trace, model, job, profile, hw, params):
        self.trace = trace
        self.model = model
        self.job = job
        self.profile = profile
        self.hw = hw
        self.params = params
        self.m = select_microbatch(profile)
        self.vms: Dict[str, VM] = {}
        self.flagged: Set[str] = set()
        self.iterations = 0
        self.since_checkpoint = 0
        self.segments: List[Segment] = []
        self.events: List[MorphEvent] = []
        self.config: Optional[ParallelConfig] = None
        self.placed_vms: Tuple[str, ...] = ()
        self.minibatch_s = 0.0
        self.ckpt_s = 0.0
        self.seg_start = 0.0
        self.seg_iters = 0
        self.now = 0.0
        self._plan_cache: Dict[tuple, PlanResult] = {}

    # -- time advancement ---------------------------------------------------

    def advance(self, until: float) -> None:
        """Run iterations (and periodic checkpoints) from now to ``until``."""
        if self.config is None:
            self.now = max(self.now, until)
            return
        interval = self.job.checkpoint_interval
        while True:
            step = self.minibatch_s
            checkpointing = self.since_checkpoint + 1 >= interval
            if checkpointing:
                step += self.ckpt_s
            if self.now + step > until + 1e-9:
                break
            self.now += step
            self.iterations += 1
            self.seg_iters += 1
            if checkpointing:
                self.since_checkpoint = 0
                self.events.append(
                    MorphEvent(time_s=self.now, kind="checkpoint",
                               detail=f"{self.ckpt_s:.3f}s foreground")
                )
            else:
                self.since_checkpoint += 1
        self.now = max(self.now, until)

    def close_segment(self, end_s: float) -> None:
        if self.config is not None or self.segments or self.seg_iters:
            cfg = self.config
            t_mb = self.minibatch_s
            exs = self.job.minibatch_examples / t_mb if (cfg and t_mb > 0) else 0.0
            per_gpu = exs / cfg.gpus_used if cfg else 0.0
            if end_s > self.seg_start:
                self.segments.append(
                    Segment(
                        start_s=self.seg_start,
                        end_s=end_s,
                        config=cfg,
                        minibatch_s=t_mb if cfg else 0.0,
                        iterations=self.seg_iters,
                        examples_per_s=exs,
                        examples_per_s_per_gpu=per_gpu,
                        placement_vms=self.placed_vms if cfg else (),
                    )
                )
        self.seg_iters = 0
        self.seg_start = end_s

    # -- planning -----------------------------------------------------------

    def cluster_signature(self, vms: List[VM]) -> tuple:
        return tuple(sorted(vm.gpus_on_vm for vm in vms))

    def active_vms(self) -> List[VM]:
        return [vm for vm_id, vm in sorted(self.vms.items()) if vm_id not in self.flagged]

    def plan_now(self) -> Tuple[Optional[ParallelConfig], float, float]:
        """(config, effective minibatch seconds, slowdown) after fail-stutter
        filtering; config None when no feasible configuration exists."""
        while True:
            vms = self.active_vms()
            gpus = sum(vm.gpus_on_vm for vm in vms)
            if gpus == 0:
                return None, 0.0, 1.0
            cluster = ClusterState(vms=tuple(vms))
            key = (self.cluster_signature(vms), self.params.seed)
            result = self._plan_cache.get(key)
            if result is None:
                try:
                    result = plan(
                        gpus, self.model, self.job, self.profile, self.hw,
                        cluster, seed=self.params.seed, micro_batch_size=self.m,
                    )
                except InfeasibleError:
                    return None, 0.0, 1.0
                self._plan_cache[key] = result
            config = result.chosen
            newly = self._stutter_check(config, cluster)
            if not newly:
                slow = self._placement_slowdown(config, cluster)
                return config, result.minibatch_seconds * slow, slow
            self.flagged |= newly
            for vm_id in sorted(newly):
                self.events.append(
                    MorphEvent(time_s=self.now, kind="flag",
                               detail=f"fail-stutter vm {vm_id} excluded")
                )

    def _placement_vms(self, config: ParallelConfig, cluster: ClusterState) -> Set[str]:
        placement = build_placement(cluster, config.pipeline_depth, config.data_parallel)
        return {placement.assignments[key][0] for key in placement.assignments}

    def _stutter_check(self, config: ParallelConfig, cluster: ClusterState) -> Set[str]:
        """Synthesize heartbeats for the placed replicas and flag outliers."""
        placement = build_placement(cluster, config.pipeline_depth, config.data_parallel)
        heartbeats = []
        base_f = 1.0  # nominal per-micro-batch unit; only ratios matter
        base_b = 2.0
        for (stage, _replica), (vm_id, _gpu, _node) in placement.assignments.items():
            factor = self.params.vm_slowdowns.get(vm_id, 1.0)
            heartbeats.append(
                Heartbeat(vm_id=vm_id, stage=stage,
                          forward_s=base_f * factor, backward_s=base_b * factor)
            )
        return detect_fail_stutter(heartbeats, self.params.outlier_factor) - self.flagged

    def _placement_slowdown(self, config: ParallelConfig, cluster: ClusterState) -> float:
        used = self._placement_vms(config, cluster)
        return max((self.params.vm_slowdowns.get(v, 1.0) for v in used), default=1.0)

    # -- event handling -----------------------------------------------------

    def reconfigure(self, t: float, preempted_in_use: bool) -> None:
        old = self.config
        lost = 0
        detection = 0.0
        if preempted_in_use:
            detection = self.params.detection_delay_s
            lost = self.since_checkpoint
            self.iterations -= lost
            self.since_checkpoint = 0
        new_config, t_mb, _slow = self.plan_now()
        if new_config is None:
            if old is not None or not self.segments:
                self.close_segment(t)
                self.events.append(MorphEvent(time_s=t, kind="pause",
                                              detail="no feasible configuration",
                                              lost_minibatches=lost))
            self.config = None
            self.placed_vms = ()
            self.minibatch_s = 0.0
            self.now = max(self.now, t)
            return
        changed = (
            old is None
            or old.pipeline_depth != new_config.pipeline_depth
            or old.data_parallel != new_config.data_parallel
        )
        if old is None:
            kind = "resume" if self.segments else "reconfigure"
        elif changed:
            kind = "reconfigure"
        else:
            kind = "passthrough"
        interrupted = preempted_in_use or changed or old is None
        downtime = (detection + self.params.restart_overhead_s
                    + self.params.replan_overhead_s) if interrupted else 0.0
        self.close_segment(t)
        cost = checkpoint_cost(
            self._stage_parameters(new_config), new_config.data_parallel,
            self.job.checkpoint_interval, self.params.local_write_bandwidth,
        )
        self.events.append(
            MorphEvent(
                time_s=t,
                kind=kind,
                detail=(f"{new_config.pipeline_depth}x{new_config.data_parallel}"
                        f" m={new_config.micro_batch_size}"
                        f" N_m={new_config.num_micro_batches}"),
                detection_s=detection,
                restore_s=self.params.restart_overhead_s if interrupted else 0.0,
                replan_s=self.params.replan_overhead_s if interrupted else 0.0,
                lost_minibatches=lost,
                lost_replay_s=lost * t_mb,
            )
        )
        self.config = new_config
        self.placed_vms = tuple(sorted(self._placement_vms(
            new_config, ClusterState(vms=tuple(self.active_vms()))
        )))
        self.minibatch_s = t_mb
        self.ckpt_s = cost.seconds_per_checkpoint
        if interrupted:
            # Morphing restarts from a checkpoint: clean reconfigurations
            # write one first, preemptions already rolled back to one.
            self.since_checkpoint = 0
        self.now = t + downtime
        self.seg_start = self.now

    def _stage_parameters(self, config: ParallelConfig) -> List[int]:
        params = [0] * config.pipeline_depth
        for i, stage in enumerate(config.stage_map):
            params[stage] += self.model.cutpoint_parameters[i]
        return params

    def run(self) -> MorphTimeline:
        events = list(self.trace.events)
        if not events:
            raise ConfigError("replay: trace is empty")
        horizon = self.params.horizon_s
        if horizon is None:
            horizon = events[-1].time_s + 3600.0
        i = 0
        while i < len(events):
            t = events[i].time_s
            self.advance(t)
            in_use: Set[str] = set()
            if self.config is not None:
                cluster = ClusterState(vms=tuple(self.active_vms()))
                in_use = self._placement_vms(self.config, cluster)
            preempted_in_use = False
            while i < len(events) and events[i].time_s == t:
                ev = events[i]
                if ev.kind == ADD:
                    self.vms[ev.vm_id] = VM(ev.vm_id, ev.gpus_on_vm, ev.node_id)
                else:
                    self.vms.pop(ev.vm_id, None)
                    self.flagged.discard(ev.vm_id)
                    if ev.vm_id in in_use:
                        preempted_in_use = True
                i += 1
            self.reconfigure(t, preempted_in_use)
        self.advance(horizon)
        self.close_segment(horizon)
        return MorphTimeline(
            segments=tuple(self.segments),
            events=tuple(self.events),
            total_examples=self.iterations * self.job.minibatch_examples,
            iterations_committed=self.iterations,
            minibatch_examples=self.job.minibatch_examples,
        )


def replay(
    trace: PreemptionTrace,
    model: ModelSpec,
    job: JobSpec,
    profile: CalibrationProfile,
    hw: HardwareSpec,
    params: Optional[ReplayParams] = None,
) -> MorphTimeline:
    """Drive the manager over a preemption trace; deterministic per seed."""
    return _Replayer(trace, model, job, profile, hw, params or ReplayParams()).run()


def timeline_svg(timeline: MorphTimeline, title: str = "") -> str:
    """Two step curves: total examples/s and (scaled) examples/s/GPU, with
    reconfiguration and pause markers."""
    width, height, ml, mt = 1000, 320, 60, 30
    segs = timeline.segments
    if not segs:
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                f'height="{height}"><text x="10" y="20">empty timeline</text></svg>\n')
    t0 = segs[0].start_s
    t1 = max(s.end_s for s in segs)
    span = max(t1 - t0, 1e-9)
    top = max(max(s.examples_per_s for s in segs), 1e-9)
    top_gpu = max(max(s.examples_per_s_per_gpu for s in segs), 1e-9)

    def x(t: float) -> float:
        return ml + (t - t0) / span * (width - ml - 20)

    def y(v: float, vmax: float) -> float:
        return mt + (1.0 - v / vmax) * (height - mt - 50)

    def step_path(get) -> str:
        pts = []
        for s in segs:
            vmax, v = get(s)
            pts.append(f"{x(s.start_s):.1f},{y(v, vmax):.1f}")
            pts.append(f"{x(s.end_s):.1f},{y(v, vmax):.1f}")
        return " ".join(pts)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" '
        f'points="{step_path(lambda s: (top, s.examples_per_s))}"/>',
        f'<polyline fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="5,3" '
        f'points="{step_path(lambda s: (top_gpu, s.examples_per_s_per_gpu))}"/>',
    ]
    if title:
        parts.append(f'<text x="{ml}" y="18" font-family="sans-serif" font-size="13">{title}</text>')
    checkpoints = [ev for ev in timeline.events if ev.kind == "checkpoint"]
    stride = max(1, len(checkpoints) // 200)  # keep the file small on long runs
    for ev in checkpoints[::stride]:
        px = x(ev.time_s)
        parts.append(f'<line x1="{px:.1f}" y1="{mt}" x2="{px:.1f}" y2="{mt + 6}" '
                     'stroke="#2ca02c" stroke-width="1"/>')
    for ev in timeline.events:
        if ev.kind in ("reconfigure", "passthrough", "pause", "resume"):
            label = "p" if ev.kind == "passthrough" else ev.detail
            px = x(ev.time_s)
            parts.append(f'<line x1="{px:.1f}" y1="{mt}" x2="{px:.1f}" '
                         f'y2="{height - 50}" stroke="#bbbbbb" stroke-width="1"/>')
            parts.append(f'<text x="{px:.1f}" y="{height - 36}" font-family="sans-serif" '
                         f'font-size="9" transform="rotate(45 {px:.1f} {height - 36})">{label}</text>')
    parts.append(f'<text x="{ml}" y="{height - 8}" font-family="sans-serif" font-size="11" '
                 f'fill="#1f77b4">examples/s (max {top:.1f})</text>')
    parts.append(f'<text x="{ml + 300}" y="{height - 8}" font-family="sans-serif" font-size="11" '
                 f'fill="#d62728">examples/s/GPU (max {top_gpu:.2f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

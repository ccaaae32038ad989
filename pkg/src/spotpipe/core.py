"""Shared domain types for models, hardware, jobs, parallel configurations
and clusters.

All types are frozen dataclasses: immutable after construction and safe to
share across threads. Time is held as integer microseconds internally so that
simulation results are deterministic and platform independent; helpers
``us_from_seconds`` / ``seconds_from_us`` convert at the boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

MICROSECONDS_PER_SECOND = 1_000_000

# 2B fp16 params + 2B fp16 grads + 4B fp32 master copy + 8B fp32 moments.
OPTIMIZER_BYTES_PER_PARAM = 16

# Task kind codes shared by the scheduler and the event kernels; the order is
# also the within-instant tie-break priority (backward first).
KIND_BACKWARD = 0
KIND_RECOMPUTE = 1
KIND_FORWARD = 2
KIND_NAMES = {KIND_BACKWARD: "B", KIND_RECOMPUTE: "R", KIND_FORWARD: "F"}
KIND_CODES = {name: code for code, name in KIND_NAMES.items()}


class ConfigError(ValueError):
    """Malformed input: bad file, bad schema, violated structural invariant."""


class InfeasibleError(RuntimeError):
    """Well-formed input with no feasible answer (e.g. model cannot fit)."""


def us_from_seconds(seconds: float) -> int:
    return int(round(seconds * MICROSECONDS_PER_SECOND))


def seconds_from_us(us: int) -> float:
    return us / MICROSECONDS_PER_SECOND


@dataclass(frozen=True)
class ModelSpec:
    """A model described at cut-point granularity.

    ``cutpoint_parameters[i]`` is the number of scalar parameters owned by
    section i, ``cutpoint_activation_bytes[i]`` the size in bytes of the
    activation of one input example at the boundary after section i.
    """

    name: str
    cutpoint_parameters: Tuple[int, ...]
    cutpoint_activation_bytes: Tuple[int, ...]
    # Bytes per example entering stage 0 (raw input). Defaults to the first
    # boundary activation, which overstates token inputs but is safe.
    input_bytes_per_example: Optional[int] = None

    def __post_init__(self):
        if len(self.cutpoint_parameters) < 1:
            raise ConfigError("model: need at least one cut-point")
        if len(self.cutpoint_parameters) != len(self.cutpoint_activation_bytes):
            raise ConfigError(
                "model: cutpoint_parameters and cutpoint_activation_bytes "
                "must have equal length"
            )
        for i, p in enumerate(self.cutpoint_parameters):
            if p <= 0:
                raise ConfigError(f"model: cutpoint_parameters[{i}] must be > 0")
        for i, a in enumerate(self.cutpoint_activation_bytes):
            if a <= 0:
                raise ConfigError(f"model: cutpoint_activation_bytes[{i}] must be > 0")

    @property
    def num_cutpoints(self) -> int:
        return len(self.cutpoint_parameters)

    @property
    def total_parameters(self) -> int:
        return sum(self.cutpoint_parameters)

    def stage_input_bytes(self, first_cutpoint: int) -> int:
        """Bytes/example entering the stage whose first section is ``first_cutpoint``."""
        if first_cutpoint == 0:
            if self.input_bytes_per_example is not None:
                return self.input_bytes_per_example
            return self.cutpoint_activation_bytes[0]
        return self.cutpoint_activation_bytes[first_cutpoint - 1]


def make_block_model(
    name: str,
    blocks: int,
    hidden_size: int,
    sequence_length: int,
    bytes_per_element: int = 2,
    params_per_block: Optional[int] = None,
) -> ModelSpec:
    """Homogeneous repeated-block model (transformer-style).

    One cut-point per block; boundary activation is hidden*seq*bytes per
    example and block parameters default to the dense-transformer estimate
    12*hidden^2.
    """
    if params_per_block is None:
        params_per_block = 12 * hidden_size * hidden_size
    act = hidden_size * sequence_length * bytes_per_element
    return ModelSpec(
        name=name,
        cutpoint_parameters=tuple([params_per_block] * blocks),
        cutpoint_activation_bytes=tuple([act] * blocks),
    )


@dataclass(frozen=True)
class HardwareSpec:
    gpu_memory_bytes: int
    gpus_per_node: int
    intra_node_bandwidth: float  # bytes/second
    inter_node_bandwidth: float  # bytes/second
    inter_node_latency_us: int
    inter_node_jitter_us: int  # stddev of cross-node latency
    intra_node_latency_us: int

    def __post_init__(self):
        if self.gpu_memory_bytes <= 0:
            raise ConfigError("hardware: gpu_memory_bytes must be > 0")
        if self.gpus_per_node < 1:
            raise ConfigError("hardware: gpus_per_node must be >= 1")
        if self.intra_node_bandwidth <= 0 or self.inter_node_bandwidth <= 0:
            raise ConfigError("hardware: bandwidths must be > 0")
        if self.intra_node_bandwidth < self.inter_node_bandwidth:
            raise ConfigError(
                "hardware: intra_node_bandwidth must be >= inter_node_bandwidth"
            )
        if self.inter_node_latency_us < 0 or self.intra_node_latency_us < 0:
            raise ConfigError("hardware: latencies must be >= 0")
        if self.inter_node_jitter_us < 0:
            raise ConfigError("hardware: inter_node_jitter_us must be >= 0")


@dataclass(frozen=True)
class JobSpec:
    minibatch_examples: int  # fixed across reconfigurations
    target_iterations: int = 1
    checkpoint_interval: int = 1  # mini-batches between checkpoints

    def __post_init__(self):
        if self.minibatch_examples < 1:
            raise ConfigError("job: minibatch_examples must be >= 1")
        if self.target_iterations < 1:
            raise ConfigError("job: target_iterations must be >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("job: checkpoint_interval must be >= 1")


@dataclass(frozen=True)
class VM:
    vm_id: str
    gpus_on_vm: int
    node_id: str

    def __post_init__(self):
        if self.gpus_on_vm < 1:
            raise ConfigError(f"cluster: vm {self.vm_id}: gpus_on_vm must be >= 1")


@dataclass(frozen=True)
class ClusterState:
    vms: Tuple[VM, ...]

    def __post_init__(self):
        ids = [vm.vm_id for vm in self.vms]
        if len(set(ids)) != len(ids):
            raise ConfigError("cluster: vm ids must be unique")

    @property
    def total_gpus(self) -> int:
        return sum(vm.gpus_on_vm for vm in self.vms)


def uniform_cluster(num_gpus: int, gpus_per_vm: int = 1) -> ClusterState:
    """Cluster of identical VMs, one node per VM (the 1-GPU spot VM shape)."""
    vms = []
    i = 0
    remaining = num_gpus
    while remaining > 0:
        g = min(gpus_per_vm, remaining)
        vms.append(VM(vm_id=f"vm{i}", gpus_on_vm=g, node_id=f"node{i}"))
        remaining -= g
        i += 1
    return ClusterState(vms=tuple(vms))


@dataclass(frozen=True)
class ParallelConfig:
    """One job configuration: P pipeline stages, D replicas per stage,
    micro-batch size m, N_m micro-batches per replica per mini-batch and the
    assignment of cut-points to stages."""

    pipeline_depth: int  # P
    data_parallel: int  # D
    micro_batch_size: int  # m
    num_micro_batches: int  # N_m
    stage_map: Tuple[int, ...]  # cut-point index -> stage index

    def __post_init__(self):
        if self.pipeline_depth < 1:
            raise ConfigError("config: pipeline_depth must be >= 1")
        if self.data_parallel < 1:
            raise ConfigError("config: data_parallel must be >= 1")
        if self.micro_batch_size < 1:
            raise ConfigError("config: micro_batch_size must be >= 1")
        if self.num_micro_batches < 1:
            raise ConfigError("config: num_micro_batches must be >= 1")
        if len(self.stage_map) < 1:
            raise ConfigError("config: stage_map must cover at least one cut-point")

    @property
    def gpus_used(self) -> int:
        return self.pipeline_depth * self.data_parallel

    def stage_cutpoints(self, stage: int) -> Tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.stage_map) if s == stage)


def uniform_stage_map(num_cutpoints: int, pipeline_depth: int) -> Tuple[int, ...]:
    """Contiguous near-uniform assignment of cut-points to stages."""
    if pipeline_depth > num_cutpoints:
        raise ConfigError(
            f"stage map: pipeline depth {pipeline_depth} exceeds "
            f"{num_cutpoints} cut-points"
        )
    base = num_cutpoints // pipeline_depth
    extra = num_cutpoints % pipeline_depth
    out = []
    for stage in range(pipeline_depth):
        count = base + (1 if stage < extra else 0)
        out.extend([stage] * count)
    return tuple(out)


def validate_config(
    config: ParallelConfig,
    model: ModelSpec,
    job: JobSpec,
    cluster: ClusterState,
) -> list:
    """Check a configuration against every named constraint.

    Returns the list of violated constraints as strings (empty means valid).
    Violations are data, not errors: this never raises for well-formed inputs.
    """
    violations = []
    p, d = config.pipeline_depth, config.data_parallel
    g = cluster.total_gpus
    k = model.num_cutpoints

    if p * d > g:
        violations.append(f"P*D <= G: P*D = {p * d} exceeds available GPUs G = {g}")
    if p > k:
        violations.append(f"P <= K: pipeline depth {p} exceeds {k} cut-points")
    examples = config.micro_batch_size * config.num_micro_batches * d
    if examples != job.minibatch_examples:
        violations.append(
            f"m*N_m*D = M_total: m*N_m*D = {examples} but mini-batch is "
            f"{job.minibatch_examples}"
        )
    violations.extend(_stage_map_violations(config.stage_map, p, k))
    return violations


def _stage_map_violations(stage_map: Sequence[int], p: int, k: int) -> list:
    out = []
    if len(stage_map) != k:
        out.append(
            f"stage_map: covers {len(stage_map)} cut-points, model has {k}"
        )
        return out
    prev = -1
    seen = set()
    for i, s in enumerate(stage_map):
        if s < prev:
            out.append(f"stage_map: not monotone non-decreasing at cut-point {i}")
            return out
        prev = s
        seen.add(s)
    if seen != set(range(p)):
        out.append(
            f"stage_map: stages used {sorted(seen)} do not cover 0..{p - 1}"
        )
    return out

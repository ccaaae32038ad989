"""Per-cut-point timing primitives and communication-volume analytics.

A :class:`CalibrationProfile` holds, for each cut-point ``i``, forward and
backward compute times per micro-batch size ``m``, activation/gradient send
latencies for same-node and cross-node links (cross-node as mean + jitter
stddev), and the gradient-allreduce time per ring size ``D``. Profiles are
either loaded from a measured file or synthesized analytically from a
``ModelSpec`` + ``HardwareSpec``.

Grids are explicit: the simulator may only query (i, m) and (i, D) points
present in the profile, never interpolate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import yaml

from .core import (
    ConfigError,
    HardwareSpec,
    ModelSpec,
    OPTIMIZER_BYTES_PER_PARAM,
    us_from_seconds,
)

PROFILE_FORMAT_VERSION = 1

# Default seconds of forward compute per (parameter * example): chosen so a
# 2.5B-scale transformer block (hidden 1920, 12*h^2 params) takes 10 ms of
# forward at micro-batch 4. Absolute scale cancels in every ratio/argmin
# property; it only sets presentation units.
DEFAULT_SECONDS_PER_UNIT_WORK = 0.010 / (12 * 1920 * 1920 * 4)

# Fixed per-invocation compute cost, expressed as a fraction of one example's
# work. Models kernel-launch overhead and GPU under-utilization at small m:
# per-example time improves with m and plateaus.
DEFAULT_FIXED_WORK_FRACTION = 0.15

# Allreduce payload bytes per parameter (full-precision gradient exchange).
DEFAULT_GRAD_BYTES_PER_PARAM = 4

_FIELDS_PER_M = (
    "forward_us",
    "backward_us",
    "act_intra_us",
    "grad_intra_us",
    "act_inter_mean_us",
    "act_inter_jitter_us",
    "grad_inter_mean_us",
    "grad_inter_jitter_us",
)


@dataclass(frozen=True)
class CutpointTimes:
    """All per-m and per-D timings of one cut-point (integer microseconds)."""

    forward_us: Dict[int, int]
    backward_us: Dict[int, int]
    act_intra_us: Dict[int, int]
    grad_intra_us: Dict[int, int]
    act_inter_mean_us: Dict[int, int]
    act_inter_jitter_us: Dict[int, int]
    grad_inter_mean_us: Dict[int, int]
    grad_inter_jitter_us: Dict[int, int]
    allreduce_us: Dict[int, int]


@dataclass(frozen=True)
class CalibrationProfile:
    m_grid: Tuple[int, ...]
    d_grid: Tuple[int, ...]
    cutpoints: Tuple[CutpointTimes, ...]
    optimizer_bytes_per_param: int = OPTIMIZER_BYTES_PER_PARAM

    def __post_init__(self):
        _check_profile(self)

    @property
    def num_cutpoints(self) -> int:
        return len(self.cutpoints)

    def forward_us(self, i: int, m: int) -> int:
        return self._grid_value(self.cutpoints[i].forward_us, m, i, "m")

    def backward_us(self, i: int, m: int) -> int:
        return self._grid_value(self.cutpoints[i].backward_us, m, i, "m")

    def allreduce_us(self, i: int, d: int) -> int:
        return self._grid_value(self.cutpoints[i].allreduce_us, d, i, "D")

    def transfer_us(self, i: int, m: int, inter_node: bool, gradient: bool) -> Tuple[int, int]:
        """(mean, jitter stddev) microseconds for one boundary message."""
        cp = self.cutpoints[i]
        if inter_node:
            if gradient:
                return (
                    self._grid_value(cp.grad_inter_mean_us, m, i, "m"),
                    self._grid_value(cp.grad_inter_jitter_us, m, i, "m"),
                )
            return (
                self._grid_value(cp.act_inter_mean_us, m, i, "m"),
                self._grid_value(cp.act_inter_jitter_us, m, i, "m"),
            )
        if gradient:
            return self._grid_value(cp.grad_intra_us, m, i, "m"), 0
        return self._grid_value(cp.act_intra_us, m, i, "m"), 0

    def _grid_value(self, table: Dict[int, int], key: int, i: int, axis: str) -> int:
        try:
            return table[key]
        except KeyError:
            raise ConfigError(
                f"calibration: cut-point {i} has no grid point {axis}={key} "
                "(no interpolation; regenerate the profile with this grid value)"
            )


def _check_profile(profile: CalibrationProfile) -> None:
    if not profile.m_grid:
        raise ConfigError("calibration: m_grid must be non-empty")
    if not profile.d_grid:
        raise ConfigError("calibration: d_grid must be non-empty")
    if list(profile.m_grid) != sorted(set(profile.m_grid)):
        raise ConfigError("calibration: m_grid must be strictly increasing")
    if list(profile.d_grid) != sorted(set(profile.d_grid)):
        raise ConfigError("calibration: d_grid must be strictly increasing")
    for i, cp in enumerate(profile.cutpoints):
        for name in _FIELDS_PER_M:
            table = getattr(cp, name)
            for m in profile.m_grid:
                if m not in table:
                    raise ConfigError(
                        f"calibration: cutpoint[{i}].{name} missing m={m}"
                    )
                if table[m] < 0:
                    raise ConfigError(
                        f"calibration: cutpoint[{i}].{name}[{m}] is negative"
                    )
        for name in ("forward_us", "backward_us"):
            table = getattr(cp, name)
            times = [table[m] for m in profile.m_grid]
            if any(b < a for a, b in zip(times, times[1:])):
                raise ConfigError(
                    f"calibration: cutpoint[{i}].{name} must be non-decreasing in m"
                )
        for d in profile.d_grid:
            if d not in cp.allreduce_us:
                raise ConfigError(f"calibration: cutpoint[{i}].allreduce_us missing D={d}")
            if cp.allreduce_us[d] < 0:
                raise ConfigError(f"calibration: cutpoint[{i}].allreduce_us[{d}] is negative")
        if cp.allreduce_us.get(1, 0) != 0:
            raise ConfigError(
                f"calibration: cutpoint[{i}].allreduce_us[1] must be 0 "
                "(allreduce over a ring of one is a no-op)"
            )


def ring_allreduce_seconds(
    payload_bytes: float,
    ring_size: int,
    bandwidth: float,
    latency_s: float,
    contention_multiplier: float = 1.0,
) -> float:
    """Standard ring allreduce cost: 2(D-1)/D bandwidth passes plus 2(D-1)
    latency hops, scaled by the in-flight contention multiplier."""
    if ring_size <= 1:
        return 0.0
    d = ring_size
    bw_term = 2.0 * (d - 1) / d * payload_bytes / bandwidth
    lat_term = 2.0 * (d - 1) * latency_s
    return contention_multiplier * (bw_term + lat_term)


def synthesize_profile(
    model: ModelSpec,
    hw: HardwareSpec,
    m_grid: Sequence[int],
    d_grid: Sequence[int],
    seconds_per_unit_work: float = DEFAULT_SECONDS_PER_UNIT_WORK,
    fixed_work_fraction: float = DEFAULT_FIXED_WORK_FRACTION,
    backward_ratio: float = 2.0,
    grad_bytes_per_param: int = DEFAULT_GRAD_BYTES_PER_PARAM,
    contention_multiplier: float = 1.0,
    allreduce_bandwidth: Optional[float] = None,
) -> CalibrationProfile:
    """Analytic profile from model shape and hardware parameters.

    Forward time is c_f * params * (m + fixed_work_fraction); backward is
    ``backward_ratio`` times forward; transfers are bytes/bandwidth + latency;
    allreduce follows :func:`ring_allreduce_seconds`. Pure function: identical
    inputs give bit-identical profiles.

    ``hw.inter_node_bandwidth`` should be the effective per-flow rate seen by
    pipeline messages, which on oversubscribed fabrics sits well below NIC
    line rate. The end-of-batch ring allreduce runs as a dedicated phase of
    neighbor-to-neighbor bulk flows, so it may be priced at a separate
    ``allreduce_bandwidth`` (defaults to the same inter-node figure).
    """
    if not m_grid or not d_grid:
        raise ConfigError("synthesize_profile: grids must be non-empty")
    if allreduce_bandwidth is None:
        allreduce_bandwidth = hw.inter_node_bandwidth
    m_grid = tuple(sorted(set(int(m) for m in m_grid)))
    d_grid = tuple(sorted(set(int(d) for d in d_grid)))

    cutpoints = []
    for i in range(model.num_cutpoints):
        params = model.cutpoint_parameters[i]
        act = model.cutpoint_activation_bytes[i]
        fwd, bwd = {}, {}
        a_in, g_in = {}, {}
        a_x_mean, a_x_jit, g_x_mean, g_x_jit = {}, {}, {}, {}
        for m in m_grid:
            f_s = seconds_per_unit_work * params * (m + fixed_work_fraction)
            fwd[m] = us_from_seconds(f_s)
            bwd[m] = us_from_seconds(backward_ratio * f_s)
            payload = act * m
            a_in[m] = g_in[m] = us_from_seconds(
                payload / hw.intra_node_bandwidth
            ) + hw.intra_node_latency_us
            inter = us_from_seconds(payload / hw.inter_node_bandwidth) + hw.inter_node_latency_us
            a_x_mean[m] = g_x_mean[m] = inter
            a_x_jit[m] = g_x_jit[m] = hw.inter_node_jitter_us
        ar = {}
        for d in d_grid:
            ar[d] = us_from_seconds(
                ring_allreduce_seconds(
                    payload_bytes=float(params * grad_bytes_per_param),
                    ring_size=d,
                    bandwidth=allreduce_bandwidth,
                    latency_s=hw.inter_node_latency_us / 1e6,
                    contention_multiplier=contention_multiplier,
                )
            )
        cutpoints.append(
            CutpointTimes(
                forward_us=fwd,
                backward_us=bwd,
                act_intra_us=a_in,
                grad_intra_us=g_in,
                act_inter_mean_us=a_x_mean,
                act_inter_jitter_us=a_x_jit,
                grad_inter_mean_us=g_x_mean,
                grad_inter_jitter_us=g_x_jit,
                allreduce_us=ar,
            )
        )
    return CalibrationProfile(
        m_grid=m_grid, d_grid=d_grid, cutpoints=tuple(cutpoints)
    )


def uniform_profile(
    stages: int,
    forward_s: float,
    backward_s: float,
    m_grid: Sequence[int] = (1,),
    d_grid: Sequence[int] = (1,),
) -> CalibrationProfile:
    """One cut-point per stage, identical times everywhere, zero network cost.

    The uniform time model used for schedule analysis.
    """
    f = us_from_seconds(forward_s)
    b = us_from_seconds(backward_s)
    m_grid = tuple(m_grid)
    cp = CutpointTimes(
        forward_us={m: f for m in m_grid},
        backward_us={m: b for m in m_grid},
        act_intra_us={m: 0 for m in m_grid},
        grad_intra_us={m: 0 for m in m_grid},
        act_inter_mean_us={m: 0 for m in m_grid},
        act_inter_jitter_us={m: 0 for m in m_grid},
        grad_inter_mean_us={m: 0 for m in m_grid},
        grad_inter_jitter_us={m: 0 for m in m_grid},
        allreduce_us={d: 0 for d in d_grid},
    )
    return CalibrationProfile(
        m_grid=m_grid, d_grid=tuple(d_grid), cutpoints=tuple([cp] * stages)
    )


@dataclass(frozen=True)
class CommVolumeReport:
    pipeline_bytes_per_example: int
    intralayer_bytes_per_example_per_gpu: int

    @property
    def ratio(self) -> float:
        return self.intralayer_bytes_per_example_per_gpu / self.pipeline_bytes_per_example


def comm_volume(
    hidden_size: int,
    sequence_length: int,
    layers: int,
    bytes_per_element: int = 2,
) -> CommVolumeReport:
    """Bytes moved per input example: sharded-matmul parallelism vs pipeline.

    Splitting the matmuls of a layer across GPUs costs two allreduces in each
    of forward, backward and recompute (6 per layer), each moving
    2*hidden*seq elements per GPU. A pipeline boundary moves one activation
    forward and one gradient back: 2*hidden*seq bytes total.
    """
    if min(hidden_size, sequence_length, layers, bytes_per_element) <= 0:
        raise ConfigError("comm_volume: all inputs must be positive")
    allreduce_bytes = 2 * hidden_size * sequence_length * bytes_per_element
    boundary_activation = hidden_size * sequence_length * bytes_per_element
    return CommVolumeReport(
        pipeline_bytes_per_example=2 * boundary_activation,
        intralayer_bytes_per_example_per_gpu=6 * layers * allreduce_bytes,
    )


def save_profile(profile: CalibrationProfile, path: str) -> None:
    doc = {
        "format_version": PROFILE_FORMAT_VERSION,
        "optimizer_bytes_per_param": profile.optimizer_bytes_per_param,
        "m_grid": list(profile.m_grid),
        "d_grid": list(profile.d_grid),
        "cutpoints": [
            {
                "forward_us": dict(cp.forward_us),
                "backward_us": dict(cp.backward_us),
                "act_intra_us": dict(cp.act_intra_us),
                "grad_intra_us": dict(cp.grad_intra_us),
                "act_inter_mean_us": dict(cp.act_inter_mean_us),
                "act_inter_jitter_us": dict(cp.act_inter_jitter_us),
                "grad_inter_mean_us": dict(cp.grad_inter_mean_us),
                "grad_inter_jitter_us": dict(cp.grad_inter_jitter_us),
                "allreduce_us": dict(cp.allreduce_us),
            }
            for cp in profile.cutpoints
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_profile(path: str) -> CalibrationProfile:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: parse error: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    version = doc.get("format_version")
    if version != PROFILE_FORMAT_VERSION:
        raise ConfigError(f"{path}.format_version: unsupported version {version!r}")
    for key in doc:
        if key not in {"format_version", "optimizer_bytes_per_param", "m_grid", "d_grid", "cutpoints"}:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        m_grid = tuple(int(m) for m in doc["m_grid"])
        d_grid = tuple(int(d) for d in doc["d_grid"])
        raw_cps = doc["cutpoints"]
    except KeyError as e:
        raise ConfigError(f"{path}: missing required key {e.args[0]}")
    if not isinstance(raw_cps, list) or not raw_cps:
        raise ConfigError(f"{path}.cutpoints: expected a non-empty list")
    cutpoints = []
    for i, raw in enumerate(raw_cps):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}.cutpoints[{i}]: expected a mapping")
        for key in raw:
            if key not in set(_FIELDS_PER_M) | {"allreduce_us"}:
                raise ConfigError(f"{path}.cutpoints[{i}].{key}: unknown key")
        tables = {}
        for name in list(_FIELDS_PER_M) + ["allreduce_us"]:
            if name not in raw:
                raise ConfigError(f"{path}.cutpoints[{i}].{name}: missing required table")
            table = raw[name]
            if not isinstance(table, dict):
                raise ConfigError(f"{path}.cutpoints[{i}].{name}: expected a mapping")
            tables[name] = {int(k): int(v) for k, v in table.items()}
        cutpoints.append(CutpointTimes(**tables))
    return CalibrationProfile(
        m_grid=m_grid,
        d_grid=d_grid,
        cutpoints=tuple(cutpoints),
        optimizer_bytes_per_param=int(
            doc.get("optimizer_bytes_per_param", OPTIMIZER_BYTES_PER_PARAM)
        ),
    )

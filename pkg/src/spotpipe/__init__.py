"""spotpipe: planner and discrete-event simulator for pipeline + data
parallel training jobs on preemptible, commodity-network clusters."""

from .core import (
    ClusterState,
    ConfigError,
    HardwareSpec,
    InfeasibleError,
    JobSpec,
    ModelSpec,
    ParallelConfig,
    VM,
    make_block_model,
    uniform_cluster,
    uniform_stage_map,
    validate_config,
)
from .calibration import (
    CalibrationProfile,
    CommVolumeReport,
    comm_volume,
    load_profile,
    ring_allreduce_seconds,
    save_profile,
    synthesize_profile,
    uniform_profile,
)
from .partitioner import (
    MemoryReport,
    OpProfile,
    Operation,
    StageAssignment,
    assign_stages,
    identify_cutpoints,
    memory_check,
)
from .scheduler import (
    POLICY_GPIPE,
    POLICY_VARUNA,
    Schedule,
    Task,
    generate_gpipe_schedule,
    generate_varuna_schedule,
    makespan_us,
    validate_schedule,
)
from .simulator import Placement, SimulationResult, build_placement, simulate_minibatch
from .planner import PlanResult, plan, select_microbatch
from .morphing import (
    Heartbeat,
    MorphTimeline,
    PreemptionTrace,
    ReplayParams,
    TraceEvent,
    checkpoint_cost,
    detect_fail_stutter,
    load_trace,
    replay,
)

__version__ = "0.1.0"

import dataclasses

import pytest

from spotpipe.calibration import synthesize_profile
from spotpipe.core import HardwareSpec, JobSpec, make_block_model

# Commodity cluster reference used across tests: 16 GB GPUs on 1-GPU VMs with
# 10 GbE NICs. Pipeline messages see the effective per-flow bandwidth of an
# oversubscribed fabric (~325 MB/s) with 2 ms latency and 2 ms jitter stddev;
# the end-of-batch ring allreduce runs as a dedicated phase of bulk
# neighbor-to-neighbor flows at NIC line rate.
COMMODITY_HW = HardwareSpec(
    gpu_memory_bytes=16_000_000_000,
    gpus_per_node=1,
    intra_node_bandwidth=12_500_000_000,
    inter_node_bandwidth=325_000_000,
    inter_node_latency_us=2_000,
    inter_node_jitter_us=2_000,
    intra_node_latency_us=5,
)
NIC_LINE_RATE = 1_250_000_000


@pytest.fixture
def commodity_hw():
    return COMMODITY_HW


@pytest.fixture
def model_2_5b():
    # 54 transformer blocks, hidden 1920, sequence 1024, fp16 boundaries.
    return make_block_model("gpt-2.5b-like", 54, 1920, 1024)


@pytest.fixture
def model_8_3b():
    # 72 transformer blocks, hidden 3072.
    return make_block_model("gpt-8.3b-like", 72, 3072, 1024)


@pytest.fixture
def job_8192():
    return JobSpec(minibatch_examples=8192, target_iterations=100, checkpoint_interval=10)


def commodity_profile(model, m_grid, d_grid, slowdown=1.0, jitter=True):
    """Synthesize a profile on the reference hardware; ``slowdown`` divides
    the inter-node bandwidths (pipeline fabric and allreduce line rate), the
    "N-times slower network" experiment. Latency and jitter are physical
    properties of the path and stay put."""
    hw = dataclasses.replace(
        COMMODITY_HW,
        inter_node_bandwidth=COMMODITY_HW.inter_node_bandwidth / slowdown,
        inter_node_jitter_us=COMMODITY_HW.inter_node_jitter_us if jitter else 0,
    )
    return synthesize_profile(
        model, hw, m_grid, d_grid, allreduce_bandwidth=NIC_LINE_RATE / slowdown
    )

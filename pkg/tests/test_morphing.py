import random

import pytest

from spotpipe.core import ConfigError, JobSpec, make_block_model
from spotpipe.morphing import (
    Heartbeat,
    PreemptionTrace,
    ReplayParams,
    TraceEvent,
    checkpoint_cost,
    detect_fail_stutter,
    load_trace,
    replay,
    save_trace,
    timeline_svg,
)

from conftest import COMMODITY_HW, commodity_profile


def small_model():
    return make_block_model("m", 8, 256, 64)


def small_job(checkpoint_interval=5):
    return JobSpec(minibatch_examples=64, target_iterations=100,
                   checkpoint_interval=checkpoint_interval)


def small_profile(model, max_d=16):
    return commodity_profile(model, [1, 2, 4], list(range(1, max_d + 1)))


def trace_of(events):
    return PreemptionTrace(events=tuple(
        TraceEvent(t, kind, vm, gpus, node) for t, kind, vm, gpus, node in events
    ))


def initial_adds(n, t=0.0):
    return [(t, "add", f"vm{i}", 1, f"node{i}") for i in range(n)]


class TestTraceType:
    def test_validates_ordering_and_membership(self):
        with pytest.raises(ConfigError, match="non-decreasing"):
            trace_of([(10.0, "add", "a", 1, "n0"), (5.0, "add", "b", 1, "n1")])
        with pytest.raises(ConfigError, match="absent"):
            trace_of([(0.0, "remove", "a", 1, "n0")])
        with pytest.raises(ConfigError, match="already-present"):
            trace_of([(0.0, "add", "a", 1, "n0"), (1.0, "add", "a", 1, "n0")])

    def test_file_roundtrip(self, tmp_path):
        trace = trace_of(initial_adds(3) + [(100.0, "remove", "vm1", 1, "node1")])
        path = str(tmp_path / "t.trace")
        save_trace(trace, path)
        assert load_trace(path) == trace

    def test_file_format(self, tmp_path):
        path = tmp_path / "t.trace"
        path.write_text("# comment\n0.0 add vm0 1 node0\n60 remove vm0 1 node0\n")
        trace = load_trace(str(path))
        assert len(trace.events) == 2
        path.write_text("0.0 add vm0 1\n")
        with pytest.raises(ConfigError, match="expected"):
            load_trace(str(path))


class TestFailStutter:
    def test_single_outlier(self):
        hbs = [
            Heartbeat("vm1", 0, 0.4, 0.6),
            Heartbeat("vm2", 0, 0.4, 0.6),
            Heartbeat("vm3", 0, 0.4, 0.6),
            Heartbeat("vm4", 0, 0.5, 0.8),  # 1.3 > 1.25 * median 1.0
        ]
        assert detect_fail_stutter(hbs, 1.25) == {"vm4"}

    def test_all_equal_is_clean(self):
        hbs = [Heartbeat(f"vm{i}", 0, 0.5, 0.5) for i in range(5)]
        assert detect_fail_stutter(hbs) == set()

    def test_median_robust_to_two_of_six(self):
        hbs = [Heartbeat(f"vm{i}", 0, 0.5, 0.5) for i in range(4)]
        hbs += [Heartbeat("slow1", 0, 0.75, 0.75), Heartbeat("slow2", 0, 0.8, 0.8)]
        assert detect_fail_stutter(hbs, 1.25) == {"slow1", "slow2"}

    def test_grouped_by_stage(self):
        # A slow stage is not an outlier if all its replicas are slow alike.
        hbs = [Heartbeat(f"a{i}", 0, 0.5, 0.5) for i in range(3)]
        hbs += [Heartbeat(f"b{i}", 1, 2.0, 2.0) for i in range(3)]
        assert detect_fail_stutter(hbs) == set()

    def test_too_few_heartbeats_skipped(self):
        hbs = [Heartbeat("a", 0, 1.0, 1.0), Heartbeat("b", 0, 9.0, 9.0)]
        assert detect_fail_stutter(hbs) == set()


class TestCheckpointCost:
    def test_no_sharding_at_d1(self):
        cost = checkpoint_cost([1_000_000], 1, 10, 1e9)
        assert cost.seconds_per_checkpoint == pytest.approx(16_000_000 / 1e9)

    def test_doubling_replicas_halves_foreground(self):
        c1 = checkpoint_cost([10**9], 2, 10, 1e9)
        c2 = checkpoint_cost([10**9], 4, 10, 1e9)
        assert c1.seconds_per_checkpoint == pytest.approx(2 * c2.seconds_per_checkpoint)

    def test_worked_arithmetic(self):
        # 2.39e9 parameters over 9 stages, 7 replicas, 1 GB/s local write:
        # worst stage holds ceil-ish 2.39e9/9 parameters; 16 bytes each,
        # sharded 7 ways.
        per_stage = [2_388_787_200 // 9] * 9
        cost = checkpoint_cost(per_stage, 7, 10, 1e9, minibatch_seconds=60.0)
        expected = 16 * (2_388_787_200 // 9) / 7 / 1e9
        assert cost.seconds_per_checkpoint == pytest.approx(expected)
        assert cost.overhead_fraction == pytest.approx(expected / (600.0 + expected))

    def test_amortization_needs_minibatch_time(self):
        cost = checkpoint_cost([100], 1, 5, 1e9)
        assert cost.overhead_fraction is None


class TestReplay:
    def test_flat_trace_single_segment(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of(initial_adds(4))
        params = ReplayParams(horizon_s=2000.0)
        tl = replay(trace, model, job, prof, COMMODITY_HW, params)
        running = [s for s in tl.segments if s.config is not None]
        assert len(running) == 1
        assert tl.iterations_committed * job.minibatch_examples == tl.total_examples
        assert not any(e.kind == "reconfigure" and e.time_s > 0 for e in tl.events)

    def test_remove_rolls_back_at_most_one_interval(self):
        model, job = small_model(), small_job(checkpoint_interval=5)
        prof = small_profile(model)
        trace = trace_of(initial_adds(4) + [(300.0, "remove", "vm3", 1, "node3")])
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=2000.0))
        drops = [e for e in tl.events if e.lost_minibatches > 0]
        assert drops
        for e in drops:
            assert e.lost_minibatches <= job.checkpoint_interval
        # The new configuration fits the shrunken cluster.
        last = [s for s in tl.segments if s.config is not None][-1]
        assert last.config.gpus_used <= 3

    def test_pass_through_event_on_unused_vm_removal(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        # 5 VMs, planner will use at most 4 (K=8 but M=64 bounds useful D);
        # removing an unused VM must not interrupt training.
        trace = trace_of(initial_adds(5) + [(300.0, "remove", "vm4", 1, "node4")])
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=2000.0))
        kinds = [e.kind for e in tl.events if e.time_s == 300.0]
        assert "passthrough" in kinds or "reconfigure" in kinds

    def test_pause_and_resume(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of(
            initial_adds(2)
            + [(200.0, "remove", "vm0", 1, "node0"),
               (200.0, "remove", "vm1", 1, "node1"),
               (500.0, "add", "vm9", 1, "node9")]
        )
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=1000.0))
        kinds = [e.kind for e in tl.events]
        assert "pause" in kinds
        assert "resume" in kinds
        paused = [s for s in tl.segments if s.config is None]
        assert paused and all(s.examples_per_s == 0 for s in paused)

    def test_flagged_vm_never_placed(self):
        # Detection compares replicas of the same stage, so it needs a wide
        # data-parallel config: a 4-cut-point model on 12 GPUs.
        model = make_block_model("m", 4, 256, 64)
        job = JobSpec(minibatch_examples=512, checkpoint_interval=5)
        prof = small_profile(model, max_d=16)
        trace = trace_of(initial_adds(12))
        params = ReplayParams(horizon_s=1500.0, vm_slowdowns={"vm2": 1.5})
        tl = replay(trace, model, job, prof, COMMODITY_HW, params)
        flagged_at = [e.time_s for e in tl.events if e.kind == "flag"]
        assert flagged_at, "slow vm should be flagged"
        for seg in tl.segments:
            if seg.config is not None and seg.start_s >= flagged_at[0]:
                assert "vm2" not in seg.placement_vms

    def test_deterministic(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        rng = random.Random(5)
        events = initial_adds(4)
        t = 0.0
        present = {f"vm{i}" for i in range(4)}
        for i in range(6):
            t += rng.uniform(100, 400)
            if rng.random() < 0.5 and len(present) > 1:
                vm = sorted(present)[rng.randrange(len(present))]
                present.discard(vm)
                events.append((t, "remove", vm, 1, vm.replace("vm", "node")))
            else:
                vm = f"vm{10 + i}"
                present.add(vm)
                events.append((t, "add", vm, 1, f"node{10 + i}"))
        trace = trace_of(events)
        params = ReplayParams(seed=7, horizon_s=t + 1000.0)
        a = replay(trace, model, job, prof, COMMODITY_HW, params)
        b = replay(trace, model, job, prof, COMMODITY_HW, params)
        assert a.to_csv() == b.to_csv()
        assert a.events == b.events

    def test_m_total_fixed_across_segments(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of(
            initial_adds(6)
            + [(400.0, "remove", "vm5", 1, "node5"),
               (800.0, "remove", "vm4", 1, "node4"),
               (1200.0, "add", "vm7", 1, "node7")]
        )
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=2500.0))
        for seg in tl.segments:
            if seg.config is None:
                continue
            c = seg.config
            assert c.micro_batch_size * c.num_micro_batches * c.data_parallel >= 64
            assert c.micro_batch_size * (c.num_micro_batches - 1) * c.data_parallel < 64
        assert tl.total_examples == tl.iterations_committed * 64

    def test_throughput_tracks_cluster_size(self):
        # G varying 5x moves total ex/s by roughly that ratio while per-GPU
        # throughput stays in a narrow band. Uses a billion-parameter-scale
        # model so every configuration actually pipelines (the model does not
        # fit on fewer than three 16 GB GPUs).
        model = make_block_model("gpt-2.5b-like", 54, 1920, 1024)
        job = JobSpec(minibatch_examples=8192, checkpoint_interval=5)
        prof = commodity_profile(model, [1, 2, 4], list(range(1, 31)))
        trace = trace_of(
            initial_adds(30)
            + [(30_000.0, "remove", f"vm{i}", 1, f"node{i}") for i in range(24)]
            + [(60_000.0, "add", f"vm{40 + i}", 1, f"node{40 + i}") for i in range(24)]
        )
        tl = replay(trace, model, job, prof, COMMODITY_HW,
                    ReplayParams(horizon_s=90_000.0))
        running = [s for s in tl.segments if s.config is not None and s.examples_per_s > 0]
        per_gpu = [s.examples_per_s_per_gpu for s in running]
        totals = [s.examples_per_s for s in running]
        assert max(totals) / min(totals) > 3.0
        assert max(per_gpu) / min(per_gpu) <= 1.25

    def test_remove_one_gpu_from_wide_config(self):
        # Dropping one GPU from a PxD config with D >= 2 lands on a
        # configuration using at most G-1 GPUs, with bounded lost work.
        model = make_block_model("m", 4, 256, 64)
        job = JobSpec(minibatch_examples=512, checkpoint_interval=5)
        prof = small_profile(model, max_d=16)
        trace = trace_of(initial_adds(12) + [(600.0, "remove", "vm0", 1, "node0")])
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=1500.0))
        before = [s for s in tl.segments if s.config and s.end_s <= 600.0][-1]
        after = [s for s in tl.segments if s.config and s.start_s >= 600.0][0]
        assert before.config.data_parallel >= 2
        assert after.config.gpus_used <= 11
        drops = [e for e in tl.events if e.time_s == 600.0]
        assert all(e.lost_minibatches <= job.checkpoint_interval for e in drops)

    def test_multi_gpu_vms(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of([
            (0.0, "add", "big0", 4, "n0"),
            (0.0, "add", "big1", 4, "n1"),
            (400.0, "remove", "big1", 4, "n1"),
        ])
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=1200.0))
        first = [s for s in tl.segments if s.config is not None][0]
        assert first.config.gpus_used <= 8
        last = [s for s in tl.segments if s.config is not None][-1]
        assert last.config.gpus_used <= 4

    def test_svg_renders(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of(initial_adds(4) + [(300.0, "remove", "vm0", 1, "node0")])
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=1000.0))
        svg = timeline_svg(tl)
        assert svg.startswith("<svg") and "polyline" in svg

    def test_csv_format(self):
        model, job = small_model(), small_job()
        prof = small_profile(model)
        trace = trace_of(initial_adds(3))
        tl = replay(trace, model, job, prof, COMMODITY_HW, ReplayParams(horizon_s=600.0))
        lines = tl.to_csv().strip().splitlines()
        assert lines[0] == "start,end,P,D,ex_per_s,ex_per_s_per_gpu,event"
        assert len(lines) >= 2

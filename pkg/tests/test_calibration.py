import pytest

from spotpipe.calibration import (
    comm_volume,
    load_profile,
    ring_allreduce_seconds,
    save_profile,
    synthesize_profile,
    uniform_profile,
)
from spotpipe.core import ConfigError, HardwareSpec, make_block_model

HW = HardwareSpec(
    gpu_memory_bytes=16_000_000_000,
    gpus_per_node=1,
    intra_node_bandwidth=12_500_000_000,
    inter_node_bandwidth=1_250_000_000,
    inter_node_latency_us=500,
    inter_node_jitter_us=1000,
    intra_node_latency_us=5,
)


class TestCommVolume:
    def test_gpt_2_5b_shape(self):
        # hidden 1920, seq 1024, 54 layers, fp16: pipeline boundary moves one
        # activation down and one gradient up.
        report = comm_volume(1920, 1024, 54, 2)
        assert report.pipeline_bytes_per_example == 2 * 1920 * 1024 * 2 == 7_864_320
        # Sharded-matmul parallelism: 6 allreduces/layer of 2*h*s elements.
        assert report.intralayer_bytes_per_example_per_gpu == 6 * 54 * 2 * 1920 * 1024 * 2
        assert report.intralayer_bytes_per_example_per_gpu == 2_548_039_680
        # ~2.4 GB vs ~7.5 MB: about 300x apart.
        assert abs(report.ratio - 300) / 300 < 0.10
        assert report.ratio == 324.0

    def test_single_layer_structure(self):
        report = comm_volume(128, 32, 1, 2)
        assert report.intralayer_bytes_per_example_per_gpu == 6 * report.pipeline_bytes_per_example

    def test_independent_arithmetic(self):
        # hidden=1024, seq=512, 72 layers, fp16; expected values computed by
        # hand from the documented formulas:
        #   per-tensor   = 2*1024*512*2  = 2,097,152
        #   pipeline     = 2*(1024*512*2) = 2,097,152
        #   intralayer   = 6*72*2,097,152 = 905,969,664
        report = comm_volume(1024, 512, 72, 2)
        assert report.pipeline_bytes_per_example == 2_097_152
        assert report.intralayer_bytes_per_example_per_gpu == 905_969_664
        assert report.ratio == 432.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ConfigError):
            comm_volume(0, 10, 1, 2)


class TestSynthesize:
    def test_boundary_activation_size(self):
        model = make_block_model("gpt-2.5b-like", 54, 1920, 1024)
        assert model.cutpoint_activation_bytes[0] == 3_932_160  # ~3.75 MiB

    def test_allreduce_ring_of_one_is_free(self):
        model = make_block_model("m", 4, 64, 16)
        prof = synthesize_profile(model, HW, [1, 2], [1, 2, 4])
        for i in range(4):
            assert prof.allreduce_us(i, 1) == 0
            assert prof.allreduce_us(i, 2) > 0

    def test_allreduce_nondecreasing_in_ring_size(self):
        model = make_block_model("m", 3, 128, 64)
        prof = synthesize_profile(model, HW, [1], list(range(1, 17)))
        for i in range(3):
            times = [prof.allreduce_us(i, d) for d in range(1, 17)]
            assert times == sorted(times)

    def test_doubling_bandwidth_halves_bandwidth_term(self):
        import dataclasses

        model = make_block_model("m", 2, 256, 128)
        fast = dataclasses.replace(HW, inter_node_bandwidth=2 * HW.inter_node_bandwidth)
        slow_prof = synthesize_profile(model, HW, [2], [1])
        fast_prof = synthesize_profile(model, fast, [2], [1])
        slow_mean, _ = slow_prof.transfer_us(0, 2, inter_node=True, gradient=False)
        fast_mean, _ = fast_prof.transfer_us(0, 2, inter_node=True, gradient=False)
        bytes_ = 2 * model.cutpoint_activation_bytes[0]
        slow_bw_term = slow_mean - HW.inter_node_latency_us
        fast_bw_term = fast_mean - HW.inter_node_latency_us
        assert slow_bw_term == round(bytes_ / HW.inter_node_bandwidth * 1e6)
        assert abs(fast_bw_term - slow_bw_term / 2) <= 1  # integer rounding

    def test_pure_function(self):
        model = make_block_model("m", 5, 96, 48)
        a = synthesize_profile(model, HW, [1, 4], [1, 3])
        b = synthesize_profile(model, HW, [1, 4], [1, 3])
        assert a == b

    def test_forward_monotone_in_m(self):
        model = make_block_model("m", 3, 64, 32)
        prof = synthesize_profile(model, HW, [1, 2, 4, 8], [1])
        for i in range(3):
            times = [prof.forward_us(i, m) for m in (1, 2, 4, 8)]
            assert times == sorted(times)
            assert prof.backward_us(i, 4) == pytest.approx(2 * prof.forward_us(i, 4), abs=1)

    def test_missing_grid_point_named(self):
        model = make_block_model("m", 2, 64, 32)
        prof = synthesize_profile(model, HW, [1, 2], [1])
        with pytest.raises(ConfigError, match="m=8"):
            prof.forward_us(0, 8)
        with pytest.raises(ConfigError, match="D=5"):
            prof.allreduce_us(1, 5)


class TestRingFormula:
    def test_matches_closed_form(self):
        # 2(D-1)/D bandwidth passes + 2(D-1) latency hops.
        s = ring_allreduce_seconds(1_000_000_000, 4, 1e9, 0.001)
        assert s == pytest.approx(2 * 3 / 4 * 1.0 + 2 * 3 * 0.001)

    def test_contention_multiplier_scales(self):
        base = ring_allreduce_seconds(1e9, 8, 1e9, 0.0)
        assert ring_allreduce_seconds(1e9, 8, 1e9, 0.0, contention_multiplier=2.5) == pytest.approx(2.5 * base)

    def test_ring_of_one(self):
        assert ring_allreduce_seconds(1e12, 1, 1.0, 10.0) == 0.0


class TestProfileFiles:
    def test_roundtrip(self, tmp_path):
        model = make_block_model("m", 4, 128, 32)
        prof = synthesize_profile(model, HW, [1, 2, 4], [1, 2, 3])
        path = str(tmp_path / "cal.yaml")
        save_profile(prof, path)
        loaded = load_profile(path)
        assert loaded == prof

    def test_nonzero_ar_at_ring_one_rejected(self, tmp_path):
        import yaml

        model = make_block_model("m", 2, 64, 32)
        prof = synthesize_profile(model, HW, [1], [1, 2])
        path = str(tmp_path / "cal.yaml")
        save_profile(prof, path)
        doc = yaml.safe_load(open(path))
        doc["cutpoints"][0]["allreduce_us"][1] = 500000
        yaml.safe_dump(doc, open(path, "w"))
        with pytest.raises(ConfigError, match=r"allreduce_us\[1\] must be 0"):
            load_profile(path)

    def test_missing_table_names_cutpoint(self, tmp_path):
        import yaml

        model = make_block_model("m", 3, 64, 32)
        prof = synthesize_profile(model, HW, [1], [1])
        path = str(tmp_path / "cal.yaml")
        save_profile(prof, path)
        doc = yaml.safe_load(open(path))
        del doc["cutpoints"][1]["backward_us"]
        yaml.safe_dump(doc, open(path, "w"))
        with pytest.raises(ConfigError, match=r"cutpoints\[1\]\.backward_us"):
            load_profile(path)

    def test_negative_time_rejected(self, tmp_path):
        import yaml

        model = make_block_model("m", 2, 64, 32)
        prof = synthesize_profile(model, HW, [1], [1])
        path = str(tmp_path / "cal.yaml")
        save_profile(prof, path)
        doc = yaml.safe_load(open(path))
        doc["cutpoints"][1]["forward_us"][1] = -5
        yaml.safe_dump(doc, open(path, "w"))
        with pytest.raises(ConfigError, match="negative"):
            load_profile(path)

    def test_version_checked(self, tmp_path):
        (tmp_path / "cal.yaml").write_text("format_version: 99\n")
        with pytest.raises(ConfigError, match="format_version"):
            load_profile(str(tmp_path / "cal.yaml"))


def test_uniform_profile_shape():
    prof = uniform_profile(4, 1.0, 2.0)
    assert prof.num_cutpoints == 4
    assert prof.forward_us(0, 1) == 1_000_000
    assert prof.backward_us(3, 1) == 2_000_000
    assert prof.allreduce_us(2, 1) == 0


def test_default_compute_constant_anchor():
    # The default seconds-per-unit-work makes one 2.5B-scale transformer
    # block (hidden 1920) take 10 ms of forward at micro-batch 4, up to the
    # small per-invocation overhead term.
    model = make_block_model("gpt-2.5b-like", 54, 1920, 1024)
    prof = synthesize_profile(model, HW, [4], [1], fixed_work_fraction=0.0)
    assert prof.forward_us(0, 4) == 10_000
    assert prof.backward_us(0, 4) == 20_000


def test_optimizer_bytes_per_param_roundtrip(tmp_path):
    import dataclasses

    model = make_block_model("m", 2, 64, 32)
    prof = synthesize_profile(model, HW, [1], [1])
    prof = dataclasses.replace(prof, optimizer_bytes_per_param=20)
    path = str(tmp_path / "cal.yaml")
    save_profile(prof, path)
    assert load_profile(path).optimizer_bytes_per_param == 20

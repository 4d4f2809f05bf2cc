import time

import numpy as np
import pytest

from edgeseg import bench
from edgeseg.bench import BenchConfig, BenchReport, derived_metrics, latency_stats, run_bench
from edgeseg.models import ModelConfig, build_model, init_weights
from edgeseg.tensor import ShapeError

TOY_SHAPE = (1, 3, 16, 16)


@pytest.fixture(scope="module")
def toy():
    return init_weights(build_model(ModelConfig("unet", 3, base_channels=2, depth=1)), seed=0)


class TestDerived:
    def test_reported_row(self):
        d = derived_metrics(6.19, 2.3, 3.45e9)
        assert d["fps"] == pytest.approx(0.161551, abs=5e-7)
        assert d["fps_per_watt"] == pytest.approx(0.070240, abs=5e-7)
        assert d["gop_per_joule"] == pytest.approx(0.484653, abs=5e-7)
        assert d["gmac_per_joule"] * 2 == d["gop_per_joule"]

    def test_one_watt(self):
        d = derived_metrics(0.25, 1.0, 1e9)
        assert d["fps"] == d["fps_per_watt"] == 4.0
        assert d["gop_per_joule"] == 8.0

    def test_halving_latency_doubles_fps(self):
        a, b = derived_metrics(0.4, 3.0, 5e8), derived_metrics(0.2, 3.0, 5e8)
        assert b["fps"] == pytest.approx(2 * a["fps"])
        assert b["gop_per_joule"] == pytest.approx(2 * a["gop_per_joule"])

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1.0), (1.0, -2.0, 1.0), (1.0, 1.0, 0), (float("nan"), 1.0, 1.0), (1.0, float("inf"), 1.0)])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            derived_metrics(*args)


class TestConfig:
    def test_defaults(self):
        cfg = BenchConfig()
        assert (cfg.frames_per_round, cfg.rounds) == (1000, 20)
        assert cfg.warmup_frames > 0

    @pytest.mark.parametrize(
        "kwargs",
        [dict(frames_per_round=0), dict(rounds=0), dict(warmup_frames=-1), dict(input_shape=(3, 8, 8)), dict(power_watts=0.0), dict(threads=0)],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            BenchConfig(**kwargs)


def test_latency_stats():
    s = latency_stats([1.0, 2.0, 3.0, 10.0])
    assert s["mean"] == 4.0 and s["median"] == 2.5 and s["p95"] == pytest.approx(8.95)


class TestRun:
    def test_single_frame_single_round(self, toy):
        rep = run_bench(toy, BenchConfig(1, 1, 0, TOY_SHAPE))
        assert len(rep.rounds) == 1 and rep.warmup_latency is None
        assert rep.latency["mean"] == rep.latency["median"] == rep.rounds[0] > 0
        assert rep.fps_per_watt is None and "fps_per_watt" not in rep.to_dict()

    def test_identities(self, toy):
        rep = run_bench(toy, BenchConfig(5, 3, 2, TOY_SHAPE, power_watts=2.0))
        assert rep.fps * rep.latency["mean"] == pytest.approx(1.0, rel=1e-12)
        assert rep.fps_per_watt == pytest.approx(rep.fps / 2.0, rel=1e-12)
        assert rep.gop_per_joule == pytest.approx(2 * rep.macs_per_frame * rep.fps_per_watt / 1e9, rel=1e-12)
        assert rep.timer_resolution_ns <= 1000

    def test_macs_scale_with_batch(self, toy):
        one = run_bench(toy, BenchConfig(1, 1, 0, TOY_SHAPE)).macs_per_frame
        two = run_bench(toy, BenchConfig(1, 1, 0, (2, 3, 16, 16))).macs_per_frame
        assert two == 2 * one

    def test_json_round_trip(self, toy):
        rep = run_bench(toy, BenchConfig(2, 2, 1, TOY_SHAPE, power_watts=1.5))
        back = BenchReport.from_json(rep.to_json())
        assert back == rep
        assert "GOP/J" in rep.table() and "FPS/W" in rep.table()

    def test_shape_rejected_before_timing(self, toy):
        with pytest.raises(ShapeError):
            run_bench(toy, BenchConfig(1, 1, 0, (1, 3, 15, 16)))
        with pytest.raises(ShapeError):
            run_bench(toy, BenchConfig(1, 1, 0, (1, 4, 16, 16)))

    def test_per_frame_latency_independent_of_frame_count(self, toy):
        a = run_bench(toy, BenchConfig(20, 5, 5, TOY_SHAPE, threads=1)).latency["median"]
        b = run_bench(toy, BenchConfig(40, 5, 5, TOY_SHAPE, threads=1)).latency["median"]
        assert abs(b / a - 1) < 0.2

    def test_warmup_excluded(self, toy, monkeypatch):
        # the first `warmup` forwards are slow; none of that may reach the rounds
        calls = {"n": 0}
        real = bench.forward

        def slow_start(model, x):
            calls["n"] += 1
            if calls["n"] <= 3:
                time.sleep(0.05)
            return real(model, x)

        monkeypatch.setattr(bench, "forward", slow_start)
        lat = []
        for _ in range(5):
            calls["n"] = 0
            rep = run_bench(toy, BenchConfig(4, 2, 3, TOY_SHAPE))
            assert rep.warmup_latency >= 0.05
            lat.append(max(rep.rounds))
        assert np.median(lat) < 0.05 / 4

"""The nine acceptance criteria, one marked test each.

A PASS/FAIL line per criterion is printed in the "acceptance criteria"
section of the terminal summary (see conftest.py).  Stated runtime budgets
are asserted alongside the numeric checks.
"""

import json
import time

import numpy as np
import pytest

from edgeseg import bench, tensor as T
from edgeseg.bench import BenchConfig, BenchReport, derived_metrics, run_bench
from edgeseg.cli import main as cli_main
from edgeseg.dataio import load_manifest, synthesize_dataset
from edgeseg.gradcheck import run_gradcheck
from edgeseg.graph import Node
from edgeseg.metrics import ClassSet, ConfusionMatrix, accumulate_confusion, iou_per_class, mean_iou
from edgeseg.models import ModelConfig, build_model, init_weights
from edgeseg.naive import conv2d_naive, transpose_conv2x2_naive
from edgeseg.profiler import layer_macs, profile_model
from edgeseg.tensor import ConvParams
from edgeseg.train import AdamWConfig, TrainData, loss_trend_ok, read_log_csv, save_checkpoint, train
from edgeseg.weightfile import CRCMismatchError, decode_weights, encode_weights, load_weights, save_weights

from oracles import conv2d_loops, gap_sum, iou_by_sets, maxpool_scan, mean_defined, tconv2x2_scatter

CASES = 20


def _conv_case(rng):
    groups = int(rng.choice([1, 2, 4]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    hw = int(rng.integers(k, 9))
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, hw, hw)).astype(np.float32)
    w = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32) if rng.random() < 0.5 else None
    return x, w, b, ConvParams((k, k), stride, pad, groups)


@pytest.mark.acceptance(1, "kernel oracle equivalence")
def test_kernel_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {"conv2d": 0.0, "transpose_conv2x2": 0.0, "maxpool2x2": 0.0, "global_avg_pool": 0.0}
    for _ in range(CASES):
        x, w, b, p = _conv_case(rng)
        got = T.conv2d(x, w, b, p)
        want = conv2d_loops(x, w, b, p.stride, p.padding, p.groups)
        worst["conv2d"] = max(worst["conv2d"], np.abs(got - want).max())

        n, ci, co, hw = (int(v) for v in rng.integers(1, 4, size=4))
        x = rng.standard_normal((n, ci, hw + 1, hw)).astype(np.float32)
        w = rng.standard_normal((ci, co, 2, 2)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        worst["transpose_conv2x2"] = max(worst["transpose_conv2x2"], np.abs(T.transpose_conv2x2(x, w, b) - tconv2x2_scatter(x, w, b)).max())

        x = rng.standard_normal((n, ci, 2 * hw, 2 * hw + 2)).astype(np.float32)
        worst["maxpool2x2"] = max(worst["maxpool2x2"], np.abs(T.maxpool2x2(x) - maxpool_scan(x)).max())
        worst["global_avg_pool"] = max(worst["global_avg_pool"], np.abs(T.global_avg_pool(x) - gap_sum(x)).max())
    print(worst)
    assert all(v < 1e-5 for v in worst.values()), worst
    assert time.perf_counter() - t0 < 60


@pytest.mark.acceptance(2, "gradient verification over 5 seeds")
def test_gradient_verification():
    t0 = time.perf_counter()
    failures, checks = [], 0
    for seed in range(5):
        for target in ("ops", "blocks", "model"):
            for rep in run_gradcheck(target, tolerance=1e-4, seed=seed):
                checks += 1
                if not rep.passed:
                    failures.append(f"seed {seed}: " + "\n".join(rep.lines()))
    elapsed = time.perf_counter() - t0
    print(f"{checks} checks in {elapsed:.0f} s")
    assert not failures, "\n".join(failures)
    assert elapsed < 300


@pytest.mark.acceptance(3, "profiler against the published UMBV2 figures")
def test_profiler_figures():
    cfg = ModelConfig("umbv2", 9)
    big, small = profile_model(cfg, 512), profile_model(cfg, 256)
    print(f"params {big.total_params}, MACs 512: {big.total_macs}, 256: {small.total_macs}")
    assert 4.0e6 <= big.total_params <= 9.0e6
    assert big.total_macs / small.total_macs == pytest.approx(4.0, rel=0.01)
    assert big.model_size_bytes == 4 * big.total_params
    assert small.model_size_bytes == big.model_size_bytes


@pytest.mark.acceptance(4, "profiler MAC counts equal naive-kernel iteration counts")
def test_profiler_micro_oracle():
    rng = np.random.default_rng(4)
    for _ in range(CASES):
        x, w, b, p = _conv_case(rng)
        node = Node("c", "conv", ("x",), x.shape[1], w.shape[0], p, b is not None)
        _, counted = conv2d_naive(x[:1], w, b, p)
        assert layer_macs(node, x.shape) == counted
    for hw in range(1, 9):
        ci, co = (int(v) for v in rng.integers(1, 5, size=2))
        x = rng.standard_normal((1, ci, hw, 8 - hw + 1))
        _, counted = transpose_conv2x2_naive(x, rng.standard_normal((ci, co, 2, 2)))
        assert layer_macs(Node("t", "tconv", ("x",), ci, co), x.shape) == counted


@pytest.mark.acceptance(5, "mIoU arithmetic and set-counting oracle")
def test_metrics_arithmetic():
    ious = np.array([43.5, 59.3, 21.2, 61.2, 73.3, 64.9, 15.1, 32.7, 82.8]) / 100
    assert mean_iou(ious) * 100 == pytest.approx(50.44, abs=0.01)
    rng = np.random.default_rng(5)
    classes = ClassSet.generic(5)
    for _ in range(100):
        gt = rng.integers(0, 5, size=(16, 16))
        pred = rng.integers(0, 5, size=(16, 16))
        cm = accumulate_confusion(ConfusionMatrix.zeros(5), pred, gt, classes)
        ref = iou_by_sets(pred, gt, 5)
        got = iou_per_class(cm)
        assert all((r is None and np.isnan(g)) or r == g for r, g in zip(ref, got))
        assert mean_iou(cm) == mean_defined(ref)


@pytest.mark.acceptance(6, "derived efficiency arithmetic against the CPU row")
def test_derived_efficiency():
    d = derived_metrics(6.19, 2.3, 3.45e9)
    print(d)
    assert d["fps"] == pytest.approx(0.1616, abs=0.0005)
    assert d["fps_per_watt"] == pytest.approx(0.0702, abs=0.0005)
    assert d["gop_per_joule"] == pytest.approx(0.480, abs=0.005)


@pytest.mark.acceptance(7, "toy end-to-end training")
def test_toy_training(tmp_path):
    t0 = time.perf_counter()
    man = load_manifest(synthesize_dataset(50, 32, 3, 7, tmp_path / "data"))
    data = TrainData.from_samples(man.load_all(), man.classes)
    model = init_weights(build_model(ModelConfig("unet", 3, base_channels=8, depth=2)), seed=7)
    logs, state = train(model, data, AdamWConfig(lr=0.001, weight_decay=0.0001), steps=200, batch_size=4,
                        seed=7, log_csv=tmp_path / "metrics.csv")
    rows = read_log_csv(tmp_path / "metrics.csv")
    elapsed = time.perf_counter() - t0
    print(f"{state.t} steps, {len(rows)} epochs, final loss {rows[-1].loss:.4f}, mIoU {rows[-1].miou:.4f}, {elapsed:.0f} s")
    assert state.t == 200
    assert rows[-1].loss < 0.2
    assert rows[-1].miou >= 0.9
    assert loss_trend_ok([r.loss for r in rows])
    assert elapsed < 300


@pytest.mark.acceptance(8, "determinism and persistence")
def test_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    synthesize_dataset(8, 32, 3, 8, tmp_path / "data")
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        w = out / "w.esw"
        argv = ["train", "--manifest", str(tmp_path / "data" / "manifest.json"), "--model", "unet", "--base", "4",
                "--depth", "2", "--steps", "6", "--seed", "8", "--out", str(w), "--log", str(out / "m.csv"), "--no-timestamps"]
        assert cli_main(argv) == 0
        assert cli_main(["eval", "--manifest", str(tmp_path / "data" / "manifest.json"), "--weights", str(w),
                         "--json", str(out / "eval.json"), "--no-timestamps"]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outputs[0].keys() == outputs[1].keys() == {"w.esw", "w.esw.json", "m.csv", "eval.json"}
    assert outputs[0] == outputs[1]

    cfg = ModelConfig("umbv3", 9)
    a, b = init_weights(build_model(cfg), seed=8), init_weights(build_model(cfg), seed=8)
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)

    save_weights(a, tmp_path / "umbv3.esw")
    back = load_weights(tmp_path / "umbv3.esw")
    assert list(back) == list(a.weights)
    assert all(back[k].dtype == a.weights[k].dtype and back[k].tobytes() == a.weights[k].tobytes() for k in back)
    data = bytearray(encode_weights(a.weights))
    data[len(data) // 2] ^= 0x10
    with pytest.raises(CRCMismatchError):
        decode_weights(bytes(data))
    assert time.perf_counter() - t0 < 60


@pytest.mark.acceptance(9, "bench protocol defaults and identities")
def test_bench_protocol(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    defaults = BenchConfig()
    assert (defaults.frames_per_round, defaults.rounds) == (1000, 20) and defaults.warmup_frames > 0

    model = init_weights(build_model(ModelConfig("unet", 3, base_channels=4, depth=2)), seed=9)
    shape = (1, 3, 32, 32)
    reports = [run_bench(model, BenchConfig(10, 2, 2, shape, power_watts=p)) for p in (0.5, 2.3, 15.0)]
    path = tmp_path / "bench.json"
    argv = ["bench", "--model", "unet", "--base", "4", "--depth", "2", "--classes", "3", "--input", "32",
            "--frames", "10", "--rounds", "2", "--power-watts", "2.3", "--json", str(path)]
    assert cli_main(argv) == 0
    reports.append(BenchReport.from_json(path.read_text()))
    for rep in reports:
        rep = BenchReport.from_json(rep.to_json())
        assert len(rep.rounds) == 2
        # fps is 1/mean, so the product is one up to the rounding of that single division
        assert abs(rep.fps * rep.latency["mean"] - 1.0) <= 2**-52
        assert rep.gop_per_joule == 2 * rep.macs_per_frame * rep.fps_per_watt / 1e9

    # warmup excluded: make only the warmup forwards slow and check the rounds stay fast
    calls = {"n": 0}
    real = bench.forward

    def slow_warmup(m, x):
        calls["n"] += 1
        if calls["n"] <= 2:
            time.sleep(0.1)
        return real(m, x)

    monkeypatch.setattr(bench, "forward", slow_warmup)
    rep = run_bench(model, BenchConfig(10, 2, 2, shape))
    assert rep.warmup_latency >= 0.1
    assert max(rep.rounds) < 0.1 / 10
    assert time.perf_counter() - t0 < 60

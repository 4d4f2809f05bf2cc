"""Inference latency benchmark and the derived efficiency figures (FPS, FPS/W, GOP/J).

Power is never measured here: it is an external input, so the same harness
runs on any host and the derived arithmetic stays reproducible.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .models import Model, forward
from .profiler import profile_model

CLOCK = "perf_counter"


@dataclass(frozen=True)
class BenchConfig:
    frames_per_round: int = 1000
    rounds: int = 20
    warmup_frames: int = 20
    input_shape: tuple[int, int, int, int] = (1, 3, 256, 256)
    power_watts: Optional[float] = None
    threads: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.frames_per_round < 1:
            raise ValueError(f"frames_per_round must be >= 1, got {self.frames_per_round}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.warmup_frames < 0:
            raise ValueError(f"warmup_frames must be >= 0, got {self.warmup_frames}")
        if len(self.input_shape) != 4:
            raise ValueError(f"input_shape must be (N, C, H, W), got {self.input_shape}")
        if self.power_watts is not None and not self.power_watts > 0:
            raise ValueError(f"power_watts must be positive, got {self.power_watts}")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


def derived_metrics(latency_mean: float, power_watts: float, macs_per_frame: float) -> dict[str, float]:
    """FPS, FPS/W and GOP/J with one operation = half a MAC (GOP = 2 x GMAC)."""
    for name, v in (("latency_mean", latency_mean), ("power_watts", power_watts), ("macs_per_frame", macs_per_frame)):
        if not (isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be a positive finite number, got {v!r}")
    fps = 1.0 / latency_mean
    fps_per_watt = fps / power_watts
    # written through fps_per_watt so the report identity holds to the last bit
    return {
        "fps": fps,
        "fps_per_watt": fps_per_watt,
        "gop_per_joule": 2.0 * macs_per_frame * fps_per_watt / 1e9,
        "gmac_per_joule": macs_per_frame * fps_per_watt / 1e9,
    }


@dataclass
class BenchReport:
    config: dict
    rounds: list[float]
    latency: dict[str, float]
    fps: float
    timer_resolution_ns: float
    warmup_latency: Optional[float] = None
    macs_per_frame: Optional[int] = None
    fps_per_watt: Optional[float] = None
    gop_per_joule: Optional[float] = None
    gmac_per_joule: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        # keys added by writers (e.g. a creation stamp) land in ``extra``
        known = {f.name for f in fields(cls)}
        extra = {**d.get("extra", {}), **{k: v for k, v in d.items() if k not in known}}
        return cls(**{k: v for k, v in d.items() if k in known and k != "extra"}, extra=extra)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        def cell(v, fmt):
            return "-" if v is None else format(v, fmt)

        power = self.config.get("power_watts")
        head = f"{'Latency (s)':>12} {'Thp (FPS)':>10} {'Avg Pwr (W)':>12} {'FPS/W':>9} {'GOP/J':>9}"
        row = (
            f"{self.latency['mean']:>12.4f} {self.fps:>10.3f} {cell(power, '.2f'):>12} "
            f"{cell(self.fps_per_watt, '.4f'):>9} {cell(self.gop_per_joule, '.4f'):>9}"
        )
        lat = self.latency
        foot = (
            f"median {lat['median']:.4f} s, p95 {lat['p95']:.4f} s over {len(self.rounds)} rounds "
            f"x {self.config['frames_per_round']} frames; timer resolution {self.timer_resolution_ns:g} ns"
        )
        return f"{head}\n{row}\n{foot}"


def latency_stats(per_round: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(per_round, dtype=np.float64)
    return {"mean": float(arr.mean()), "median": float(np.median(arr)), "p95": float(np.percentile(arr, 95))}


def timer_resolution_ns() -> float:
    return time.get_clock_info(CLOCK).resolution * 1e9


def run_bench(model: Model, cfg: BenchConfig = BenchConfig(), macs_per_frame: Optional[int] = None) -> BenchReport:
    """Time ``cfg.rounds`` rounds of ``cfg.frames_per_round`` eval-mode forwards.

    The same static input is reused for every frame and only the forward loop
    sits inside the timed region.  ``macs_per_frame`` defaults to the
    profiler's count for ``model.config`` at the benchmark input size.
    """
    model.check_input(cfg.input_shape)
    if timer_resolution_ns() > 1000:
        raise RuntimeError(f"clock resolution {timer_resolution_ns()} ns is coarser than 1 us")
    x = np.random.default_rng(cfg.seed).random(cfg.input_shape, dtype=np.float32)
    with threadpool_limits(limits=cfg.threads):
        t0 = time.perf_counter()
        for _ in range(cfg.warmup_frames):
            forward(model, x)
        warm = time.perf_counter() - t0
        per_round = []
        for _ in range(cfg.rounds):
            t0 = time.perf_counter()
            for _ in range(cfg.frames_per_round):
                forward(model, x)
            per_round.append((time.perf_counter() - t0) / cfg.frames_per_round)
    lat = latency_stats(per_round)
    if macs_per_frame is None:
        # the profiler counts one image; a frame is one forward of the whole batch
        macs_per_frame = profile_model(model.config, cfg.input_shape[2:]).total_macs * cfg.input_shape[0]
    report = BenchReport(
        config={**asdict(cfg), "input_shape": list(cfg.input_shape), "model": model.config.to_dict()},
        rounds=per_round,
        latency=lat,
        fps=1.0 / lat["mean"],
        timer_resolution_ns=timer_resolution_ns(),
        warmup_latency=warm / cfg.warmup_frames if cfg.warmup_frames else None,
        macs_per_frame=int(macs_per_frame),
    )
    if cfg.power_watts is not None:
        d = derived_metrics(lat["mean"], cfg.power_watts, macs_per_frame)
        report.fps_per_watt = d["fps_per_watt"]
        report.gop_per_joule = d["gop_per_joule"]
        report.gmac_per_joule = d["gmac_per_joule"]
    return report

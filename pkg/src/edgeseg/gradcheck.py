"""Central finite-difference verification of the analytic gradients.

Everything here runs in float64.  A coordinate's relative error is
``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
near-zero gradients from turning round-off into huge ratios.

Networks built from ReLU-family activations and max pooling are only piecewise
smooth, and in a model with thousands of units some ``±h`` stencils straddle a
kink.  When the ``h`` estimate disagrees with the analytic value, the
coordinate is re-measured with ``h/2``.  A finite-difference reference is
trusted only when halving the step moves it by less than a tenth of the
tolerance; otherwise the stencil is non-smooth, the coordinate is counted as
skipped and another one is drawn from the same group.  The skip test compares
finite differences only with each other, so a wrong analytic gradient at a
smooth coordinate still fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .models import (
    MBConvSpec,
    ModelConfig,
    SESpec,
    build_model,
    decoder_block_graph,
    init_weights,
    mbconv_graph,
    se_graph,
    with_dtype,
)
from .graph import Graph
from .tensor import ActivationKind, ConvParams
from .train import cross_entropy_loss

FD_STEP = 1e-5
REL_FLOOR = 1e-6

LossAndGrad = Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]]


@dataclass
class GroupResult:
    group: str
    coords: int
    max_rel_err: float
    max_abs_err: float
    passed: bool
    skipped: int = 0


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)
    required: int = 0

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        # resampling may not shrink the number of verified coordinates
        return all(g.passed for g in self.groups) and self.coords >= self.required

    @property
    def coords(self) -> int:
        return sum(g.coords for g in self.groups)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "coords": self.coords,
            "required": self.required,
            "groups": [vars(g) for g in self.groups],
        }

    def lines(self) -> list[str]:
        out = [f"{'PASS' if self.passed else 'FAIL'} {self.name}: max rel err {self.max_rel_err:.2e} (tol {self.tolerance:g})"]
        for g in self.groups:
            if not g.passed:
                out.append(f"    {g.group}: {g.max_rel_err:.2e} over {g.coords} coords")
        skipped = sum(g.skipped for g in self.groups)
        if skipped:
            out.append(f"    {skipped} coordinate(s) resampled: finite-difference stencil crossed a kink")
        unverified = [g.group for g in self.groups if g.coords == 0]
        if unverified:
            out.append(f"    no smooth coordinate left in: {', '.join(unverified)}")
        if self.coords < self.required:
            out.append(f"    only {self.coords} of {self.required} coordinates verified")
        return out


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    n_coords: Optional[int] = 50,
    seed: int = 0,
    h: float = FD_STEP,
    name: str = "check",
) -> GradCheckReport:
    """Compare analytic gradients with central differences at sampled coordinates.

    ``loss_and_grad(params)`` must return ``(scalar, {name: grad})``.
    Coordinates are drawn round-robin over the parameter groups so that every
    group is visited; ``n_coords=None`` checks every coordinate.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_and_grad(params)
    rng = np.random.default_rng(seed)
    names = [k for k in params if params[k].size]
    pools = {k: rng.permutation(params[k].size) for k in names}
    picks: dict[str, list[int]] = {k: [] for k in names}
    if n_coords is None:
        for k in names:
            picks[k] = list(range(params[k].size))
    else:
        budget = max(n_coords, len(names))
        i = 0
        while sum(len(v) for v in picks.values()) < budget:
            k = names[i % len(names)]
            if len(picks[k]) < params[k].size:
                picks[k].append(int(pools[k][len(picks[k])]))
            i += 1
            if all(len(picks[n]) == params[n].size for n in names):
                break
    report = GradCheckReport(name, tolerance)

    def central(flat, idx, step):
        old = flat[idx]
        flat[idx] = old + step
        lp = loss_and_grad(params)[0]
        flat[idx] = old - step
        lm = loss_and_grad(params)[0]
        flat[idx] = old
        return (lp - lm) / (2 * step)

    for k in names:
        if not picks[k]:
            continue
        flat = params[k].reshape(-1)
        g = np.asarray(grads.get(k, np.zeros_like(params[k])), dtype=np.float64).reshape(-1)
        pool = [int(i) for i in pools[k][len(picks[k]) :]] if n_coords is not None else []
        queue = list(picks[k])
        worst_rel = worst_abs = 0.0
        checked = skipped = 0
        while queue:
            idx = queue.pop(0)
            numeric = central(flat, idx, h)
            rel = relative_error(g[idx], numeric)
            if rel >= tolerance:
                half = central(flat, idx, h / 2)
                if relative_error(numeric, half) >= tolerance / 10:
                    skipped += 1
                    if pool:
                        queue.append(pool.pop(0))
                    continue
            checked += 1
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs(g[idx] - numeric))
        report.groups.append(GroupResult(k, checked, worst_rel, worst_abs, bool(worst_rel < tolerance), skipped))
    total = sum(params[k].size for k in names)
    report.required = total if n_coords is None else min(n_coords, total)
    return report


# ------------------------------------------------------------------- cases


def _projection_case(op, inputs: dict, attrs: dict, diff: tuple[str, ...], rng):
    """Loss = <op(inputs), R> for a fixed random cotangent R."""
    order = list(inputs)
    out = op(*[inputs[k] for k in order], **attrs)
    proj = rng.standard_normal(out.shape)

    def f(params):
        args = [params.get(k, inputs[k]) if inputs[k] is not None else None for k in order]
        y = op(*args, **attrs)
        cots = T.vjp(op, args, proj, **attrs)
        grads = {k: c for k, c in zip(order, cots) if k in diff}
        return float(np.sum(y * proj)), grads

    return f, {k: inputs[k] for k in diff}


def op_cases(seed: int):
    """(name, loss_and_grad, params) for every differentiable tensor op."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    cases = []

    def add(name, op, inputs, diff, **attrs):
        f, p = _projection_case(op, inputs, attrs, diff, rng)
        cases.append((name, f, p))

    add("conv2d", T.conv2d, {"x": r((2, 4, 7, 7)), "w": r((6, 4, 3, 3)), "b": r(6)}, ("x", "w", "b"),
        p=ConvParams((3, 3), stride=2, padding=1))
    add("conv2d_depthwise", T.conv2d, {"x": r((2, 4, 6, 6)), "w": r((4, 1, 5, 5)), "b": None}, ("x", "w"),
        p=ConvParams((5, 5), stride=1, padding=2, groups=4))
    add("conv2d_grouped", T.conv2d, {"x": r((1, 4, 5, 5)), "w": r((6, 2, 3, 3)), "b": None}, ("x", "w"),
        p=ConvParams((3, 3), stride=1, padding=1, groups=2))
    add("transpose_conv2x2", T.transpose_conv2x2, {"x": r((2, 3, 4, 4)), "w": r((3, 2, 2, 2)), "b": r(2)}, ("x", "w", "b"))
    bn_in = {"x": r((3, 3, 4, 4)), "gamma": r(3), "beta": r(3), "rm": r(3), "rv": rng.random(3) + 0.5}
    add("batchnorm2d_train", T.batchnorm2d, dict(bn_in), ("x", "gamma", "beta"), training=True)
    add("batchnorm2d_eval", T.batchnorm2d, dict(bn_in), ("x", "gamma", "beta"), training=False)
    for kind in ActivationKind:
        add(f"activation_{kind.value}", T.activation, {"x": 4 * r((2, 3, 4, 4))}, ("x",), kind=kind)
    add("maxpool2x2", T.maxpool2x2, {"x": r((2, 3, 6, 6))}, ("x",))
    add("global_avg_pool", T.global_avg_pool, {"x": r((2, 3, 5, 4))}, ("x",))
    add("concat_channels", T.concat_channels, {"a": r((2, 3, 4, 4)), "b": r((2, 2, 4, 4))}, ("a", "b"))
    add("softmax_channels", T.softmax_channels, {"x": r((2, 5, 3, 3))}, ("x",))
    add("elementwise_add", T.elementwise_add, {"a": r((2, 3, 4, 4)), "b": r((2, 3, 4, 4))}, ("a", "b"))
    add("channel_scale", T.channel_scale, {"x": r((2, 3, 4, 4)), "s": r((2, 3, 1, 1))}, ("x", "s"))

    logits = r((1, 3, 4, 4))
    target = rng.integers(0, 3, size=(1, 4, 4))
    target[0, 0, 0] = 255

    def ce(params):
        loss, g = cross_entropy_loss(params["logits"], target)
        return loss, {"logits": g}

    cases.append(("cross_entropy", ce, {"logits": logits}))
    return cases


def _random_registry(graph: Graph, rng) -> dict[str, np.ndarray]:
    weights = {}
    for k, shp in graph.param_shapes().items():
        weights[k] = rng.standard_normal(shp) * (0.5 if k.endswith((".weight", ".beta", ".bias")) else 0.2) + (
            1.0 if k.endswith(".gamma") else 0.0
        )
    for k, shp in graph.buffer_shapes().items():
        weights[k] = rng.random(shp) + 0.5 if k.endswith("running_var") else rng.standard_normal(shp) * 0.1
    return weights


def _graph_case(graph: Graph, inputs: dict, rng, training: bool):
    weights = _random_registry(graph, rng)
    buffers = {k: weights[k] for k in graph.buffer_shapes()}
    out_shape = graph.infer_shapes({k: v.shape for k, v in inputs.items()})[graph.output]
    proj = rng.standard_normal(out_shape)
    names = list(graph.param_shapes()) + list(inputs)

    def f(params):
        wts = {**buffers, **{k: params[k] for k in graph.param_shapes()}}
        ins = {k: params[k] for k in inputs}
        values, _ = graph.run(wts, ins, training=training, keep=True)
        y = values[graph.output]
        pg, ig = graph.backward(wts, values, {graph.output: proj}, training=training)
        return float(np.sum(y * proj)), {**pg, **ig}

    params = {**{k: weights[k] for k in graph.param_shapes()}, **inputs}
    return f, {k: params[k] for k in names}


def block_cases(seed: int):
    """MBConv (residual, strided with SE), SE alone and a decoder block."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    cases = []
    spec = MBConvSpec(kernel=3, expansion=4, out_channels=4, stride=1, activation=ActivationKind.RELU6)
    cases.append(("mbconv_residual", *_graph_case(mbconv_graph(4, spec), {"input": r((2, 4, 6, 6))}, rng, True)))
    spec = MBConvSpec(kernel=5, expansion=4, out_channels=6, stride=2, use_se=True, activation=ActivationKind.HARD_SWISH)
    cases.append(("mbconv_se_stride2", *_graph_case(mbconv_graph(4, spec), {"input": r((2, 4, 8, 8))}, rng, True)))
    cases.append(("mbconv_eval", *_graph_case(mbconv_graph(4, spec), {"input": r((1, 4, 8, 8))}, rng, False)))
    cases.append(("squeeze_excitation", *_graph_case(se_graph(SESpec(8, 4)), {"input": r((2, 8, 5, 5))}, rng, False)))
    dec = decoder_block_graph(6, 3, 4)
    cases.append(("decoder_block", *_graph_case(dec, {"input": r((2, 6, 4, 4)), "skip": r((2, 3, 8, 8))}, rng, True)))
    return cases


TOY_MODELS = {
    "toy_unet": ModelConfig("unet_baseline", num_classes=3, base_channels=4, depth=2),
    "toy_umbv2": ModelConfig("umbv2", num_classes=3, decoder_widths=(16, 8, 8, 8, 4), blocks_per_stage=1),
    "toy_umbv3": ModelConfig("umbv3_small", num_classes=3, decoder_widths=(16, 8, 8, 8, 4), blocks_per_stage=1),
}


def model_case(config: ModelConfig, seed: int, size: Optional[int] = None, batch: int = 4):
    """Cross-entropy of a full model in training mode w.r.t. all of its parameters.

    The default input is the smallest legal one (at least 16 pixels).
    """
    rng = np.random.default_rng(seed)
    model = with_dtype(init_weights(build_model(config), seed), np.float64)
    size = size or max(config.divisor, 16)
    x = rng.random((batch, config.input_channels, size, size))
    target = rng.integers(0, config.num_classes, size=(batch, size, size))
    buffers = {k: model.weights[k] for k in model.graph.buffer_shapes()}
    pnames = list(model.graph.param_shapes())
    out = model.graph.output

    def f(params):
        wts = {**buffers, **params}
        values, _ = model.graph.run(wts, {"input": x}, training=True, keep=True)
        loss, dlogits = cross_entropy_loss(values[out], target)
        grads, _ = model.graph.backward(wts, values, {out: dlogits}, training=True)
        return loss, grads

    return f, {k: model.weights[k] for k in pnames}


def run_gradcheck(target: str = "ops", tolerance: float = 1e-4, seed: int = 0, n_coords: int = 50) -> list[GradCheckReport]:
    """Run one family of checks: ``ops``, ``blocks`` or ``model``."""
    if target == "ops":
        cases = op_cases(seed)
    elif target == "blocks":
        cases = block_cases(seed)
    elif target == "model":
        cases = [(name, *model_case(cfg, seed)) for name, cfg in TOY_MODELS.items()]
    else:
        raise ValueError(f"unknown gradcheck target {target!r}; choose ops, blocks or model")
    return [gradient_check(f, p, tolerance, n_coords, seed, name=name) for name, f, p in cases]

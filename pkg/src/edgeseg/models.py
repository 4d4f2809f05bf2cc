"""UNet-baseline, UNet-MobileNetV2 and UNet-MobileNetV3-small.

Models are built as :class:`~edgeseg.graph.Graph` objects plus a flat weight
registry with hierarchical names such as
``encoder.stage2.block1.dwconv.weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .graph import Graph, Node, Shape
from .tensor import DTYPE, ActivationKind, ConvParams, ShapeError

A = ActivationKind

KIND_ALIASES = {
    "unet": "unet_baseline",
    "unet_baseline": "unet_baseline",
    "umbv2": "umbv2",
    "umbv3": "umbv3_small",
    "umbv3_small": "umbv3_small",
}

MOBILE_DECODER_WIDTHS = (256, 128, 64, 32, 16)

# (expansion t, out channels c, repeats n, first stride s)
MOBILENETV2_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


@dataclass(frozen=True)
class MBConvSpec:
    kernel: int = 3
    expansion: int = 6
    out_channels: int = 16
    stride: int = 1
    use_se: bool = False
    activation: ActivationKind = A.RELU6

    def __post_init__(self):
        if self.kernel not in (3, 5):
            raise ValueError(f"MBConv kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1 or self.out_channels < 1:
            raise ValueError("expansion and out_channels must be positive")

    def has_residual(self, in_channels: int) -> bool:
        return self.stride == 1 and in_channels == self.out_channels


@dataclass(frozen=True)
class SESpec:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.reduction < 1 or self.channels % self.reduction:
            raise ValueError(f"SE reduction {self.reduction} does not divide {self.channels} channels")


def _v3(k, t, c, se, act, s):
    return MBConvSpec(kernel=k, expansion=t, out_channels=c, stride=s, use_se=se, activation=act)


# MobileNetV3-small style encoder, grouped by output width.  Strides are
# arranged so the taps land at output strides 2, 4, 8, 16 with widths
# 16, 24, 40, 96; a depthwise-separable tail reaches stride 32 / 576 channels.
MOBILENETV3_SMALL_STAGES = (
    (_v3(3, 1, 16, True, A.RELU, 1),),
    (_v3(3, 4, 24, False, A.RELU, 2), _v3(3, 4, 24, False, A.RELU, 1)),
    (_v3(5, 4, 40, True, A.HARD_SWISH, 2), _v3(5, 6, 40, True, A.HARD_SWISH, 1), _v3(5, 6, 40, True, A.HARD_SWISH, 1)),
    (_v3(5, 3, 48, True, A.HARD_SWISH, 2), _v3(5, 3, 48, True, A.HARD_SWISH, 1)),
    (_v3(5, 6, 96, True, A.HARD_SWISH, 1), _v3(5, 6, 96, True, A.HARD_SWISH, 1), _v3(5, 6, 96, True, A.HARD_SWISH, 1)),
)
MOBILENETV3_TAIL_CHANNELS = 576


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "unet_baseline"
    num_classes: int = 9
    base_channels: int = 64
    depth: int = 4
    decoder_widths: Optional[tuple[int, ...]] = None
    input_channels: int = 3
    blocks_per_stage: Optional[int] = None  # caps MBConv repeats; toy models only

    def __post_init__(self):
        kind = KIND_ALIASES.get(self.kind)
        if kind is None:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {sorted(KIND_ALIASES)}")
        object.__setattr__(self, "kind", kind)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if kind == "unet_baseline" and (self.base_channels < 1 or self.depth < 1):
            raise ValueError("base_channels and depth must be positive")
        if self.blocks_per_stage is not None and self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be positive")
        if self.decoder_widths is not None:
            widths = tuple(int(w) for w in self.decoder_widths)
            if any(w < 1 for w in widths):
                raise ValueError(f"decoder widths must be positive, got {widths}")
            if len(widths) != self.num_levels:
                raise ValueError(
                    f"decoder_widths has {len(widths)} entries but {self.kind} has {self.num_levels} decoder levels"
                )
            object.__setattr__(self, "decoder_widths", widths)

    @property
    def num_levels(self) -> int:
        return self.depth if self.kind == "unet_baseline" else 5

    @property
    def divisor(self) -> int:
        return 2**self.num_levels

    @property
    def widths(self) -> tuple[int, ...]:
        if self.decoder_widths is not None:
            return self.decoder_widths
        if self.kind == "unet_baseline":
            return tuple(self.base_channels * 2**i for i in reversed(range(self.depth)))
        return MOBILE_DECODER_WIDTHS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_classes": self.num_classes,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "decoder_widths": list(self.widths),
            "input_channels": self.input_channels,
            "blocks_per_stage": self.blocks_per_stage,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if d.get("decoder_widths") is not None:
            d["decoder_widths"] = tuple(d["decoder_widths"])
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    graph: Graph
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    taps: dict[int, tuple[str, int]] = field(default_factory=dict)  # output stride -> (node, channels)

    def param_names(self) -> list[str]:
        return list(self.graph.param_shapes())

    def check_input(self, shape: Sequence[int]) -> None:
        if len(shape) != 4:
            raise ShapeError(f"input must be rank 4 (N, C, H, W), got {tuple(shape)}")
        n, c, h, w = shape
        if c != self.config.input_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.config.input_channels}")
        d = self.config.divisor
        if h % d or w % d or h == 0 or w == 0:
            raise ShapeError(f"input spatial dims {h}x{w} must be divisible by {d}")

    def symbolic_shapes(self, h: int, w: int, n: int = 1) -> dict[str, Shape]:
        self.check_input((n, self.config.input_channels, h, w))
        return self.graph.infer_shapes({"input": (n, self.config.input_channels, h, w)})


# ------------------------------------------------------------------ builders


class _Builder:
    def __init__(self, in_channels: int):
        self.g = Graph()
        self.g.add(Node("input", "input", in_channels=in_channels, out_channels=in_channels))

    def conv(self, name, x, cin, cout, k=3, stride=1, groups=1, bias=False, padding=None):
        pad = (k - 1) // 2 if padding is None else padding
        p = ConvParams(kernel=(k, k), stride=stride, padding=pad, groups=groups)
        return self.g.add(Node(name, "conv", (x,), cin, cout, conv=p, bias=bias))

    def bn(self, name, x, c):
        return self.g.add(Node(name, "bn", (x,), c, c))

    def act(self, name, x, kind, c=0):
        return self.g.add(Node(name, "act", (x,), c, c, kind=ActivationKind(kind)))

    def conv_bn_act(self, prefix, x, cin, cout, k=3, stride=1, groups=1, kind=A.RELU, names=("conv", "bn", "act")):
        x = self.conv(f"{prefix}.{names[0]}", x, cin, cout, k, stride, groups)
        x = self.bn(f"{prefix}.{names[1]}", x, cout)
        if kind is not None:
            x = self.act(f"{prefix}.{names[2]}", x, kind, cout)
        return x

    def double_conv(self, prefix, x, cin, cout):
        x = self.conv_bn_act(prefix, x, cin, cout, names=("conv1", "bn1", "relu1"))
        return self.conv_bn_act(prefix, x, cout, cout, names=("conv2", "bn2", "relu2"))

    def se(self, prefix, x, spec: SESpec):
        c, mid = spec.channels, spec.channels // spec.reduction
        s = self.g.add(Node(f"{prefix}.pool", "gap", (x,), c, c))
        s = self.conv(f"{prefix}.fc1", s, c, mid, k=1)
        s = self.act(f"{prefix}.relu", s, A.RELU, mid)
        s = self.conv(f"{prefix}.fc2", s, mid, c, k=1)
        s = self.act(f"{prefix}.gate", s, A.HARD_SIGMOID, c)
        return self.g.add(Node(f"{prefix}.scale", "scale", (x, s), c, c))

    def mbconv(self, prefix, x, cin, spec: MBConvSpec):
        exp = spec.expansion * cin
        h = x
        if spec.expansion != 1:
            h = self.conv_bn_act(prefix, h, cin, exp, k=1, kind=spec.activation, names=("expand", "expand_bn", "expand_act"))
        h = self.conv_bn_act(
            prefix, h, exp, exp, k=spec.kernel, stride=spec.stride, groups=exp,
            kind=spec.activation, names=("dwconv", "dw_bn", "dw_act"),
        )
        if spec.use_se:
            h = self.se(f"{prefix}.se", h, SESpec(exp))
        h = self.conv_bn_act(prefix, h, exp, spec.out_channels, k=1, kind=None, names=("project", "project_bn", ""))
        if spec.has_residual(cin):
            h = self.g.add(Node(f"{prefix}.add", "add", (h, x), cin, cin))
        return h

    def decoder(self, x, c, taps: dict[int, tuple[str, int]], top_stride: int, widths: Sequence[int]):
        stride = top_stride
        for i, width in enumerate(widths, start=1):
            stride //= 2
            prefix = f"decoder.level{i}"
            x = self.g.add(Node(f"{prefix}.up", "tconv", (x,), c, width))
            cin = width
            if stride in taps:
                skip, skip_c = taps[stride]
                x = self.g.add(Node(f"{prefix}.concat", "concat", (x, skip), width + skip_c, width + skip_c))
                cin += skip_c
            x = self.double_conv(prefix, x, cin, width)
            c = width
        return x, c

    def head(self, x, c, num_classes):
        return self.conv("head", x, c, num_classes, k=1, bias=True)


def _build_baseline(cfg: ModelConfig):
    b = _Builder(cfg.input_channels)
    x, c = "input", cfg.input_channels
    taps = {}
    for level in range(cfg.depth):
        width = cfg.base_channels * 2**level
        x = b.double_conv(f"encoder.level{level + 1}", x, c, width)
        taps[2**level] = (x, width)
        x = b.g.add(Node(f"encoder.level{level + 1}.pool", "maxpool", (x,), width, width))
        c = width
    width = cfg.base_channels * 2**cfg.depth
    x = b.double_conv("bottleneck", x, c, width)
    taps[2**cfg.depth] = (x, width)
    x, c = b.decoder(x, width, {s: v for s, v in taps.items() if s < 2**cfg.depth}, 2**cfg.depth, cfg.widths)
    b.head(x, c, cfg.num_classes)
    return b.g, taps


def _cap(n: int, cfg: ModelConfig) -> int:
    return n if cfg.blocks_per_stage is None else min(n, cfg.blocks_per_stage)


def _build_umbv2(cfg: ModelConfig):
    b = _Builder(cfg.input_channels)
    x = b.conv_bn_act("encoder.stem", "input", cfg.input_channels, 32, k=3, stride=2, kind=A.RELU6)
    c, stride = 32, 2
    taps = {}
    for si, (t, cout, n, s) in enumerate(MOBILENETV2_STAGES, start=1):
        for bi in range(_cap(n, cfg)):
            spec = MBConvSpec(kernel=3, expansion=t, out_channels=cout, stride=s if bi == 0 else 1, activation=A.RELU6)
            x = b.mbconv(f"encoder.stage{si}.block{bi + 1}", x, c, spec)
            c = cout
            stride *= spec.stride
        taps[stride] = (x, c)
    x, c = b.decoder(x, c, {s: v for s, v in taps.items() if s < 32}, 32, cfg.widths)
    b.head(x, c, cfg.num_classes)
    return b.g, taps


def _build_umbv3(cfg: ModelConfig):
    b = _Builder(cfg.input_channels)
    x = b.conv_bn_act("encoder.stem", "input", cfg.input_channels, 16, k=3, stride=2, kind=A.HARD_SWISH)
    c, stride = 16, 2
    taps = {}
    for si, blocks in enumerate(MOBILENETV3_SMALL_STAGES, start=1):
        for bi, spec in enumerate(blocks[: _cap(len(blocks), cfg)]):
            x = b.mbconv(f"encoder.stage{si}.block{bi + 1}", x, c, spec)
            c = spec.out_channels
            stride *= spec.stride
        taps[stride] = (x, c)
    x = b.conv_bn_act("encoder.tail", x, c, c, k=3, stride=2, groups=c, kind=A.HARD_SWISH, names=("dwconv", "dw_bn", "dw_act"))
    x = b.conv_bn_act("encoder.tail", x, c, MOBILENETV3_TAIL_CHANNELS, k=1, kind=A.HARD_SWISH, names=("pwconv", "pw_bn", "pw_act"))
    c = MOBILENETV3_TAIL_CHANNELS
    taps[32] = (x, c)
    x, c = b.decoder(x, c, {s: v for s, v in taps.items() if s < 32}, 32, cfg.widths)
    b.head(x, c, cfg.num_classes)
    return b.g, taps


_BUILDERS = {"unet_baseline": _build_baseline, "umbv2": _build_umbv2, "umbv3_small": _build_umbv3}


def build_graph(config: ModelConfig) -> tuple[Graph, dict]:
    return _BUILDERS[config.kind](config)


def build_model(config: ModelConfig) -> Model:
    """Wire the network and allocate its registry.

    Convolutions start at zero and BN layers at the identity; call
    :func:`init_weights` before use.
    """
    graph, taps = build_graph(config)
    model = Model(config, graph, taps=taps)
    d = config.divisor
    model.symbolic_shapes(2 * d, 2 * d)
    for name, shape in graph.param_shapes().items():
        fill = 1.0 if name.endswith(".gamma") else 0.0
        model.weights[name] = np.full(shape, fill, dtype=DTYPE)
    for name, shape in graph.buffer_shapes().items():
        fill = 1.0 if name.endswith(".running_var") else 0.0
        model.weights[name] = np.full(shape, fill, dtype=DTYPE)
    return model


def init_weights(model: Model, seed: int = 0) -> Model:
    """He-normal convolutions (std = sqrt(2 / fan_in)), identity BN, zero biases.

    Mutates ``model`` in place and returns it.
    """
    rng = np.random.default_rng(seed)
    for node in model.graph.nodes:
        for name, shape in node.param_shapes().items():
            if name.endswith(".weight"):
                if node.op == "tconv":
                    fan_in = node.in_channels
                else:
                    fan_in = shape[1] * shape[2] * shape[3]
                w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
                model.weights[name] = w.astype(DTYPE)
            elif name.endswith(".gamma"):
                model.weights[name] = np.ones(shape, dtype=DTYPE)
            else:
                model.weights[name] = np.zeros(shape, dtype=DTYPE)
        for name, shape in node.buffer_shapes().items():
            fill = 1.0 if name.endswith(".running_var") else 0.0
            model.weights[name] = np.full(shape, fill, dtype=DTYPE)
    return model


def forward(model: Model, x: np.ndarray, training: bool = False) -> np.ndarray:
    """Dense logits (N, K, H, W).  Never mutates the model."""
    model.check_input(x.shape)
    values, _ = model.graph.run(model.weights, {"input": x}, training=training)
    return values[model.graph.output]


def with_dtype(model: Model, dtype) -> Model:
    """Copy of ``model`` whose registry is cast to ``dtype``."""
    return replace(model, weights={k: v.astype(dtype) for k, v in model.weights.items()})


# ----------------------------------------------------- standalone block runs


def mbconv_graph(in_channels: int, spec: MBConvSpec) -> Graph:
    b = _Builder(in_channels)
    b.mbconv("block", "input", in_channels, spec)
    return b.g


def se_graph(spec: SESpec) -> Graph:
    b = _Builder(spec.channels)
    b.se("se", "input", spec)
    return b.g


def decoder_block_graph(in_channels: int, skip_channels: int, width: int) -> Graph:
    b = _Builder(in_channels)
    b.g.add(Node("skip", "input", in_channels=skip_channels, out_channels=skip_channels))
    taps = {1: ("skip", skip_channels)}
    b.decoder("input", in_channels, taps, 2, [width])
    return b.g


def _run_block(graph: Graph, inputs: dict, weights: Mapping[str, np.ndarray], training: bool):
    shapes = graph.param_shapes() | graph.buffer_shapes()
    missing = [k for k in shapes if k not in weights]
    if missing:
        raise ShapeError(f"missing weights: {missing}")
    for k, shp in shapes.items():
        if tuple(weights[k].shape) != shp:
            raise ShapeError(f"{k}: expected shape {shp}, got {tuple(weights[k].shape)}")
    graph.infer_shapes({k: v.shape for k, v in inputs.items()})
    values, _ = graph.run(weights, inputs, training=training)
    return values[graph.output]


def mbconv_forward(spec: MBConvSpec, x: np.ndarray, weights: Mapping[str, np.ndarray], training: bool = False):
    """Run one inverted-residual block; weights are named ``block.*``."""
    return _run_block(mbconv_graph(x.shape[1], spec), {"input": x}, weights, training)


def se_forward(spec: SESpec, x: np.ndarray, weights: Mapping[str, np.ndarray]):
    """Squeeze-and-excitation gating; weights ``se.fc1.weight`` and ``se.fc2.weight``."""
    if x.ndim != 4 or x.shape[1] != spec.channels:
        raise ShapeError(f"SE expects {spec.channels} channels, got input shape {x.shape}")
    return _run_block(se_graph(spec), {"input": x}, weights, False)

"""Analytical parameter / MAC / CIO accounting over a model graph.

Counts are per single-image forward.  One MAC is one multiply plus one add;
"ops" (as in GOP) are taken as 2 x MACs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from .graph import OPS, Node, Shape, _shape_of
from .models import ModelConfig, build_graph
from .tensor import ShapeError

BYTES_PER_PARAM = 4
CONV_KINDS = ("conv", "tconv")


@dataclass
class LayerProfile:
    name: str
    kind: str
    input_shape: Shape
    output_shape: Shape
    params: int
    macs: int
    cio: int


@dataclass
class ProfileReport:
    model: str
    input_shape: Shape
    layers: list[LayerProfile] = field(default_factory=list)
    total_params: int = 0
    total_macs: int = 0
    total_cio: int = 0
    model_size_bytes: int = 0

    @property
    def total_ops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "input_shape": list(self.input_shape),
            "layers": [
                {**asdict(l), "input_shape": list(l.input_shape), "output_shape": list(l.output_shape)}
                for l in self.layers
            ],
            "totals": {
                "params": self.total_params,
                "macs": self.total_macs,
                "ops": self.total_ops,
                "cio": self.total_cio,
                "model_size_bytes": self.model_size_bytes,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, per_layer: bool = False) -> str:
        lines = []
        if per_layer:
            lines.append(f"{'layer':<44} {'kind':<7} {'output':>20} {'params':>10} {'MACs':>14} {'CIO':>12}")
            for l in self.layers:
                shp = "x".join(str(d) for d in l.output_shape[1:])
                lines.append(f"{l.name:<44} {l.kind:<7} {shp:>20} {l.params:>10,} {l.macs:>14,} {l.cio:>12,}")
            lines.append("")
        h, w = self.input_shape[2:]
        lines.append(f"{'Deep Network':<16} {'Input':>9} {'Parameters':>11} {'MAC':>9} {'GOP':>9} {'CIO':>10} {'Size (MB)':>10}")
        lines.append(
            f"{self.model:<16} {f'{h}x{w}':>9} {self.total_params / 1e6:>10.2f}M {self.total_macs / 1e9:>8.2f}G "
            f"{self.total_ops / 1e9:>8.2f}G {self.total_cio / 1e6:>9.2f}M {self.model_size_bytes / 1e6:>10.1f}"
        )
        return "\n".join(lines)


def layer_params(node: Node) -> int:
    """Learnable parameter count; BN running statistics are excluded."""
    if node.op not in OPS:
        raise ValueError(f"unknown layer kind {node.op!r}")
    return int(sum(np.prod(s) for s in node.param_shapes().values()))


def _output_shape(node: Node, input_shapes: Sequence[Shape]) -> Shape:
    return _shape_of(node, [tuple(s) for s in input_shapes])


def layer_macs(node: Node, input_shape: Union[Shape, Sequence[Shape]]) -> int:
    """Multiply-accumulates for one image; elementwise layers count zero."""
    shapes = _as_shapes(node, input_shape)
    out = _output_shape(node, shapes)
    if node.op == "conv":
        kh, kw = node.conv.kernel
        return kh * kw * (node.in_channels // node.conv.groups) * node.out_channels * out[2] * out[3]
    if node.op == "tconv":
        return node.in_channels * node.out_channels * out[2] * out[3]
    return 0


def layer_cio(node: Node, input_shape: Union[Shape, Sequence[Shape]]) -> int:
    """Input plus output element count of convolutional layers (one image)."""
    shapes = _as_shapes(node, input_shape)
    out = _output_shape(node, shapes)
    if node.op in CONV_KINDS:
        _, c, h, w = shapes[0]
        return c * h * w + out[1] * out[2] * out[3]
    return 0


def _as_shapes(node: Node, input_shape) -> list[Shape]:
    if node.op in ("concat", "add", "scale"):
        shapes = [tuple(s) for s in input_shape]
    else:
        shapes = [tuple(input_shape)]
    for s in shapes:
        if len(s) != 4:
            raise ShapeError(f"{node.name}: input shape must be rank 4, got {s}")
    return [(1,) + s[1:] for s in shapes]


def _hw(input_shape) -> tuple[int, int]:
    if isinstance(input_shape, int):
        return input_shape, input_shape
    s = tuple(input_shape)
    if len(s) == 2:
        return s
    if len(s) == 4:
        return s[2], s[3]
    raise ShapeError(f"input shape must be S, (H, W) or (N, C, H, W); got {input_shape}")


def profile_model(config: ModelConfig, input_shape) -> ProfileReport:
    """Symbolic forward pass producing per-layer rows and totals (no weights)."""
    h, w = _hw(input_shape)
    d = config.divisor
    if h % d or w % d or h < 1 or w < 1:
        raise ShapeError(f"input spatial dims {h}x{w} must be divisible by {d}")
    graph, _ = build_graph(config)
    in_shape = (1, config.input_channels, h, w)
    shapes = graph.infer_shapes({"input": in_shape})
    report = ProfileReport(model=config.kind, input_shape=in_shape)
    for node in graph.nodes:
        if node.op == "input":
            continue
        ins = [shapes[s] for s in node.inputs]
        arg = ins if len(ins) > 1 else ins[0]
        row = LayerProfile(
            name=node.name,
            kind=node.op,
            input_shape=ins[0],
            output_shape=shapes[node.name],
            params=layer_params(node),
            macs=layer_macs(node, arg),
            cio=layer_cio(node, arg),
        )
        report.layers.append(row)
    report.total_params = sum(l.params for l in report.layers)
    report.total_macs = sum(l.macs for l in report.layers)
    report.total_cio = sum(l.cio for l in report.layers)
    report.model_size_bytes = BYTES_PER_PARAM * report.total_params
    return report

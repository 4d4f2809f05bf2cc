"""A small declarative layer graph.

A network is an ordered list of :class:`Node` objects (topologically sorted).
The same list drives forward execution, reverse-mode backpropagation and the
symbolic shape/cost analysis in :mod:`edgeseg.profiler`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import ActivationKind, ConvParams, ShapeError

Shape = tuple[int, int, int, int]

OPS = ("input", "conv", "tconv", "bn", "act", "maxpool", "concat", "add", "gap", "scale")


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    conv: Optional[ConvParams] = None
    bias: bool = False
    kind: Optional[ActivationKind] = None

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown layer kind {self.op!r} for node {self.name!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Learnable tensors of this node, keyed by full registry name."""
        if self.op == "conv":
            kh, kw = self.conv.kernel
            shapes = {f"{self.name}.weight": (self.out_channels, self.in_channels // self.conv.groups, kh, kw)}
        elif self.op == "tconv":
            shapes = {f"{self.name}.weight": (self.in_channels, self.out_channels, 2, 2)}
        elif self.op == "bn":
            return {f"{self.name}.gamma": (self.out_channels,), f"{self.name}.beta": (self.out_channels,)}
        else:
            return {}
        if self.bias:
            shapes[f"{self.name}.bias"] = (self.out_channels,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Non-learnable state (BN running statistics)."""
        if self.op == "bn":
            return {f"{self.name}.running_mean": (self.out_channels,), f"{self.name}.running_var": (self.out_channels,)}
        return {}


def _shape_of(node: Node, ins: list[Shape]) -> Shape:
    if node.op in ("conv", "tconv", "bn"):
        n, c, h, w = ins[0]
        if c != node.in_channels:
            raise ShapeError(f"{node.name}: expects {node.in_channels} input channels, producer gives {c}")
        if node.op == "conv":
            ho, wo = node.conv.output_hw(h, w)
            if ho < 1 or wo < 1:
                raise ShapeError(f"{node.name}: spatial size {h}x{w} too small")
            return (n, node.out_channels, ho, wo)
        if node.op == "tconv":
            return (n, node.out_channels, 2 * h, 2 * w)
        return ins[0]
    if node.op == "act":
        return ins[0]
    if node.op == "maxpool":
        n, c, h, w = ins[0]
        if h % 2 or w % 2:
            raise ShapeError(f"{node.name}: maxpool2x2 needs even spatial dims, got {h}x{w}")
        return (n, c, h // 2, w // 2)
    if node.op == "concat":
        a, b = ins
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ShapeError(f"{node.name}: cannot concatenate {a} with {b}")
        return (a[0], a[1] + b[1], a[2], a[3])
    if node.op == "add":
        if ins[0] != ins[1]:
            raise ShapeError(f"{node.name}: cannot add {ins[0]} and {ins[1]}")
        return ins[0]
    if node.op == "gap":
        n, c, _, _ = ins[0]
        return (n, c, 1, 1)
    if node.op == "scale":
        x, s = ins
        if s != (x[0], x[1], 1, 1):
            raise ShapeError(f"{node.name}: gate {s} does not fit {x}")
        return x
    raise ValueError(f"unknown layer kind {node.op!r}")


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    output: str = ""

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}

    def add(self, node: Node) -> str:
        if node.name in self._index:
            raise ValueError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src not in self._index:
                raise ValueError(f"{node.name}: unknown producer {src!r}")
        self.nodes.append(node)
        self._index[node.name] = node
        self.output = node.name
        return node.name

    def __getitem__(self, name: str) -> Node:
        return self._index[name]

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "input"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            out.update(n.param_shapes())
        return out

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            out.update(n.buffer_shapes())
        return out

    def infer_shapes(self, input_shapes: Mapping[str, Shape]) -> dict[str, Shape]:
        shapes: dict[str, Shape] = {}
        for node in self.nodes:
            if node.op == "input":
                shp = tuple(input_shapes[node.name])
                if len(shp) != 4:
                    raise ShapeError(f"{node.name}: input must be rank 4, got {shp}")
                if node.in_channels and shp[1] != node.in_channels:
                    raise ShapeError(f"{node.name}: expects {node.in_channels} channels, got {shp[1]}")
                shapes[node.name] = shp
            else:
                shapes[node.name] = _shape_of(node, [shapes[s] for s in node.inputs])
        return shapes

    # ----------------------------------------------------------- execution

    def run(
        self,
        weights: Mapping[str, np.ndarray],
        inputs: Mapping[str, np.ndarray],
        training: bool = False,
        keep: bool = False,
    ):
        """Execute the graph.

        Returns ``(values, stats)``.  ``values`` maps node name to output and
        holds every intermediate when ``keep`` is set (needed by
        :meth:`backward`), otherwise only the graph output.  ``stats`` maps
        BN node names to updated running ``(mean, var)`` in training mode; the
        caller decides whether to commit them.
        """
        values: dict[str, np.ndarray] = {}
        stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        remaining = _consumer_counts(self.nodes) if not keep else None
        for node in self.nodes:
            if node.op == "input":
                values[node.name] = inputs[node.name]
                continue
            args = [values[s] for s in node.inputs]
            values[node.name] = self._forward_node(node, weights, args, training, stats)
            if remaining is not None:
                for s in node.inputs:
                    remaining[s] -= 1
                    if remaining[s] == 0 and s != self.output:
                        del values[s]
        if not keep:
            values = {self.output: values[self.output]}
        return values, stats

    def _forward_node(self, node: Node, wts, args, training, stats):
        op = node.op
        if op == "conv":
            return T.conv2d(args[0], wts[f"{node.name}.weight"], wts.get(f"{node.name}.bias"), node.conv)
        if op == "tconv":
            return T.transpose_conv2x2(args[0], wts[f"{node.name}.weight"], wts.get(f"{node.name}.bias"))
        if op == "bn":
            p = node.name
            rm, rv = wts[f"{p}.running_mean"], wts[f"{p}.running_var"]
            if training:
                stats[p] = T.update_running_stats(args[0], rm, rv)
            return T.batchnorm2d(args[0], wts[f"{p}.gamma"], wts[f"{p}.beta"], rm, rv, training=training)
        if op == "act":
            return T.activation(args[0], node.kind)
        if op == "maxpool":
            return T.maxpool2x2(args[0])
        if op == "concat":
            return T.concat_channels(*args)
        if op == "add":
            return T.elementwise_add(*args)
        if op == "gap":
            return T.global_avg_pool(args[0])
        if op == "scale":
            return T.channel_scale(*args)
        raise ValueError(f"unknown layer kind {op!r}")

    def backward(
        self,
        weights: Mapping[str, np.ndarray],
        values: Mapping[str, np.ndarray],
        cotangents: Mapping[str, np.ndarray],
        training: bool = False,
    ):
        """Reverse-mode sweep; returns ``(param_grads, input_grads)``."""
        grads: dict[str, np.ndarray] = dict(cotangents)
        pgrads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            if node.op == "input":
                grads[node.name] = g
                continue
            args = [values[s] for s in node.inputs]
            in_grads = self._backward_node(node, weights, args, g, training, pgrads)
            for src, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        input_grads = {n: grads[n] for n in self.input_names if n in grads}
        return pgrads, input_grads

    def _backward_node(self, node: Node, wts, args, g, training, pgrads):
        op, p = node.op, node.name
        if op == "conv":
            dx, dw, db = T._conv2d_vjp(args[0], wts[f"{p}.weight"], wts.get(f"{p}.bias"), g, node.conv)
            pgrads[f"{p}.weight"] = dw
            if db is not None:
                pgrads[f"{p}.bias"] = db
            return (dx,)
        if op == "tconv":
            dx, dw, db = T._transpose_conv2x2_vjp(args[0], wts[f"{p}.weight"], wts.get(f"{p}.bias"), g)
            pgrads[f"{p}.weight"] = dw
            if db is not None:
                pgrads[f"{p}.bias"] = db
            return (dx,)
        if op == "bn":
            dx, dgamma, dbeta, _, _ = T._batchnorm2d_vjp(
                args[0], wts[f"{p}.gamma"], wts[f"{p}.beta"], wts[f"{p}.running_mean"],
                wts[f"{p}.running_var"], g, training=training,
            )
            pgrads[f"{p}.gamma"] = dgamma
            pgrads[f"{p}.beta"] = dbeta
            return (dx,)
        if op == "act":
            return T._activation_vjp(args[0], g, node.kind)
        if op == "maxpool":
            return T._maxpool2x2_vjp(args[0], g)
        if op == "concat":
            return T._concat_channels_vjp(args[0], args[1], g)
        if op == "add":
            return T._elementwise_add_vjp(args[0], args[1], g)
        if op == "gap":
            return T._global_avg_pool_vjp(args[0], g)
        if op == "scale":
            return T._channel_scale_vjp(args[0], args[1], g)
        raise ValueError(f"unknown layer kind {op!r}")


def _consumer_counts(nodes: Iterable[Node]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for n in nodes:
        for s in n.inputs:
            counts[s] = counts.get(s, 0) + 1
    return counts

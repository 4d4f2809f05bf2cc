"""Literal nested-loop kernels.

Slow by design: they exist to count multiply-accumulate iterations one by
one, which is the ground truth the analytical profiler is checked against.
Each kernel returns ``(output, mac_count)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import ConvParams, ShapeError


def conv2d_naive(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None, p: ConvParams = ConvParams()):
    n, c, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    g = p.groups
    if c != cg * g:
        raise ShapeError(f"C_in: input has {c} channels, weights expect {cg * g}")
    og = c_out // g
    s, pad = p.stride, p.padding
    ho, wo = p.output_hw(h, wd)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, c_out, ho, wo))
    macs = 0
    for b in range(n):
        for o in range(c_out):
            grp = o // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, grp * cg + ci, y * s + i, xx * s + j] * w[o, ci, i, j]
                                macs += 1
                    out[b, o, y, xx] = acc
    return out, macs


def transpose_conv2x2_naive(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None):
    n, c, h, wd = x.shape
    c_out = w.shape[1]
    out = np.zeros((n, c_out, 2 * h, 2 * wd))
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, c_out, 1, 1)
    macs = 0
    for b in range(n):
        for ci in range(c):
            for y in range(h):
                for xx in range(wd):
                    v = x[b, ci, y, xx]
                    for o in range(c_out):
                        for i in range(2):
                            for j in range(2):
                                out[b, o, 2 * y + i, 2 * xx + j] += v * w[ci, o, i, j]
                                macs += 1
    return out, macs

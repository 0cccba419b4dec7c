"""Lowering/lifting of convolutions to matmul, and tiling onto a fixed array.

Lowered column ``c`` of a receptive field is ``(ch * kh + ky) * kw + kx``;
lowered row ``r`` is output pixel ``oy * out_w + ox``.  Padding is
materialized as zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .array import SystolicConfig
from .faults import Fault, validate_fault
from .numerics import QuantTensor, wrap
from .systolic import run_tile_passes


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvShape:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_h: int = 1
    in_w: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ShapeError("stride must be >= 1")
        if self.padding < 0:
            raise ShapeError("padding must be >= 0")
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.in_h, self.in_w) < 1:
            raise ShapeError(f"non-positive extent in {self}")
        for size, k in ((self.in_h, self.kernel_h), (self.in_w, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"kernel {k} with stride {self.stride}, padding {self.padding} "
                    f"does not tile input extent {size}"
                )

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.padding - self.kernel_w) // self.stride + 1

    @property
    def patch(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w


def lower_activation(x: QuantTensor, shape: ConvShape) -> QuantTensor:
    """im2col: ``(C, H, W) -> (out_h * out_w, C * kh * kw)``."""
    if x.shape != (shape.in_channels, shape.in_h, shape.in_w):
        raise ShapeError(f"input shape {x.shape} does not match {shape}")
    data = x.data
    if shape.padding:
        p = shape.padding
        data = np.pad(data, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(data, (shape.kernel_h, shape.kernel_w), axis=(1, 2))
    win = win[:, :: shape.stride, :: shape.stride]  # (C, out_h, out_w, kh, kw)
    low = win.transpose(1, 2, 0, 3, 4).reshape(shape.out_h * shape.out_w, shape.patch)
    return x.with_data(np.ascontiguousarray(low))


def lower_weights(kernel: QuantTensor) -> QuantTensor:
    """``(K, C, kh, kw) -> (C * kh * kw, K)``, columns ordered as lowered activations."""
    if len(kernel.shape) != 4:
        raise ShapeError(f"kernel must be rank 4, got shape {kernel.shape}")
    k = kernel.shape[0]
    return kernel.with_data(np.ascontiguousarray(kernel.data.reshape(k, -1).T))


def lift(c_matrix: QuantTensor, shape: ConvShape) -> QuantTensor:
    """``(out_h * out_w, K) -> (K, out_h, out_w)``."""
    expected = (shape.out_h * shape.out_w, shape.out_channels)
    if c_matrix.shape != expected:
        raise ShapeError(f"matrix shape {c_matrix.shape} does not match {expected}")
    out = c_matrix.data.T.reshape(shape.out_channels, shape.out_h, shape.out_w)
    return c_matrix.with_data(np.ascontiguousarray(out))


@dataclass(frozen=True)
class TilePlan:
    m_tiles: int
    n_tiles: int
    k_tiles: int

    @property
    def passes(self) -> int:
        return self.m_tiles * self.n_tiles * self.k_tiles

    def pass_index(self, m: int, n: int, k: int) -> int:
        return (m * self.n_tiles + n) * self.k_tiles + k


def tile_plan(M: int, K: int, N: int, config: SystolicConfig) -> TilePlan:
    return TilePlan(math.ceil(M / config.n1), math.ceil(N / config.n2), math.ceil(K / config.n3))


def tiled_matmul(
    a: QuantTensor,
    b: QuantTensor,
    config: SystolicConfig,
    faults: Sequence[Fault] = (),
    cycle_base: int = 0,
) -> QuantTensor:
    """``A (M x K) @ B (K x N)`` as a sequence of full-size, zero-padded tile passes.

    Pass ``(m, n, k)`` (k innermost) starts at global cycle
    ``cycle_base + index * config.pass_span``.  Partial sums across k-tiles
    are added in the host accumulator, outside the array.
    """
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    for f in faults:
        validate_fault(f, config)
    M, K = a.shape
    N = b.shape[1]
    n1, n2, n3 = config.n1, config.n2, config.n3
    plan = tile_plan(M, K, N, config)
    mt, nt, kt = plan.m_tiles, plan.n_tiles, plan.k_tiles
    acc = config.acc_format
    dtype = np.float32 if acc.is_float else np.int64

    ap = np.zeros((mt * n1, kt * n3), dtype=dtype)
    ap[:M, :K] = a.data
    bp = np.zeros((kt * n3, nt * n2), dtype=dtype)
    bp[:K, :N] = b.data
    # (mt, kt, n1, n3) -> passes (m, n, k)
    a_t = ap.reshape(mt, n1, kt, n3).transpose(0, 2, 1, 3)
    b_t = bp.reshape(kt, n3, nt, n2).transpose(2, 0, 1, 3)  # (nt, kt, n3, n2)
    a_tiles = np.broadcast_to(a_t[:, None], (mt, nt, kt, n1, n3)).reshape(-1, n1, n3)
    b_tiles = np.broadcast_to(b_t[None], (mt, nt, kt, n3, n2)).reshape(-1, n3, n2)
    offsets = cycle_base + np.arange(plan.passes, dtype=np.int64) * config.pass_span

    out = run_tile_passes(a_tiles, b_tiles, config, faults, offsets)
    out = out.reshape(mt, nt, kt, n1, n2)
    if acc.is_float:
        total = np.zeros((mt, nt, n1, n2), dtype=np.float32)
        for k in range(kt):
            total = (total + out[:, :, k]).astype(np.float32)
    else:
        total = wrap(out.sum(axis=2), acc.width)
    full = total.transpose(0, 2, 1, 3).reshape(mt * n1, nt * n2)
    return QuantTensor(np.ascontiguousarray(full[:M, :N]), acc, a.scale * b.scale)

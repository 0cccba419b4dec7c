"""Fault-aware execution of one matmul tile on the modeled systolic array.

Two interchangeable engines solve the same recurrence:

* :func:`simulate_matmul` sweeps each line along its dependence axis with
  NumPy, batched over tile passes.  This is the engine the runtime uses.
* :func:`simulate_matmul_wavefront` visits lattice points one by one in
  non-decreasing ``pi . p`` order.  It is slow but literal, and it can emit a
  per-cycle trace.

A fault active at point ``p`` replaces the value read along its line,
``x(p) = h(x(p - w_x))``; the replaced value is both used by the MAC at
``p`` and forwarded downstream.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .array import SystolicConfig
from .faults import Fault, validate_fault
from .lattice import Line
from .numerics import NumberFormat, QuantTensor, apply_bit_fault, apply_bit_fault_array, canonical_nan, mac, wrap


class SimulationError(ValueError):
    pass


def _fault_masks(faults: Sequence[Fault], config: SystolicConfig, offsets: np.ndarray):
    """Per-line list of (fault, mask) with mask shaped ``(T, n1, n2, n3)`` or ``(n1, n2, n3)``."""
    by_line: dict[Line, list] = {Line.A: [], Line.B: [], Line.C: []}
    if not faults:
        return by_line
    pe_x, pe_y, cyc = config.pe_x, config.pe_y, config.cycles
    for f in faults:
        at_pe = (pe_x == f.pe[0]) & (pe_y == f.pe[1])
        if not at_pe.any():
            continue
        if f.is_permanent:
            mask = at_pe
        else:
            g = offsets[:, None, None, None] + cyc[None]
            mask = at_pe[None] & (g >= f.t_start)
            if f.t_end is not None:
                mask &= g <= f.t_end
            if not mask.any():
                continue
        by_line[f.line].append((f, mask))
    return by_line


def _apply(values: np.ndarray, f: Fault, mask: np.ndarray, fmt: NumberFormat) -> np.ndarray:
    if not mask.any():
        return values
    return np.where(mask, apply_bit_fault_array(values, f.kind, f.bit, fmt), values)


def _line_slice(mask: np.ndarray, axis: int, idx: int) -> np.ndarray:
    # mask axes are (n1, n2, n3) or (T, n1, n2, n3); axis counts within (n1, n2, n3)
    if mask.ndim == 3:
        return np.take(mask, idx, axis=axis)[None]
    return np.take(mask, idx, axis=axis + 1)


def run_tile_passes(
    a_tiles: np.ndarray,
    b_tiles: np.ndarray,
    config: SystolicConfig,
    faults: Sequence[Fault] = (),
    offsets: Sequence[int] | np.ndarray = (0,),
) -> np.ndarray:
    """Run ``T`` independent passes; ``a_tiles`` is ``(T, n1, n3)``, ``b_tiles`` ``(T, n3, n2)``.

    Returns accumulator words ``(T, n1, n2)``.  ``offsets[t]`` is the global
    cycle at which pass ``t`` starts.
    """
    n1, n2, n3 = config.n1, config.n2, config.n3
    T = a_tiles.shape[0]
    if a_tiles.shape != (T, n1, n3) or b_tiles.shape != (T, n3, n2):
        raise SimulationError(
            f"tile shapes {a_tiles.shape} x {b_tiles.shape} do not match config ({n1}, {n2}, {n3})"
        )
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1)
    if offsets.shape[0] != T:
        raise SimulationError("need one cycle offset per tile pass")
    op, acc = config.op_format, config.acc_format
    is_float = op.is_float
    dtype = np.float32 if is_float else np.int64
    a_tiles = a_tiles.astype(dtype, copy=False)
    b_tiles = b_tiles.astype(dtype, copy=False)

    masks = _fault_masks(faults, config, offsets)
    if not is_float and not any(masks.values()):
        return wrap(np.matmul(a_tiles, b_tiles), acc.width)

    # a(i, j, k): carried along j; b(i, j, k): carried along i
    if masks[Line.A]:
        a3 = np.empty((T, n1, n2, n3), dtype=dtype)
        prev = a_tiles
        for j in range(n2):
            val = prev
            for f, m in masks[Line.A]:
                val = _apply(val, f, _line_slice(m, 1, j), op)
            a3[:, :, j, :] = val
            prev = val
    else:
        a3 = np.broadcast_to(a_tiles[:, :, None, :], (T, n1, n2, n3))
    bt = b_tiles.transpose(0, 2, 1)  # (T, n2, n3)
    if masks[Line.B]:
        b3 = np.empty((T, n1, n2, n3), dtype=dtype)
        prev = bt
        for i in range(n1):
            val = prev
            for f, m in masks[Line.B]:
                val = _apply(val, f, _line_slice(m, 0, i), op)
            b3[:, i, :, :] = val
            prev = val
    else:
        b3 = np.broadcast_to(bt[:, None, :, :], (T, n1, n2, n3))
    prod = a3 * b3

    if is_float:
        c = np.zeros((T, n1, n2), dtype=np.float32)
        for k in range(n3):
            for f, m in masks[Line.C]:
                c = _apply(c, f, _line_slice(m, 2, k), acc)
            c = canonical_nan(c + prod[..., k])
        return c
    if not masks[Line.C]:
        return wrap(prod.sum(axis=-1), acc.width)
    c = np.zeros((T, n1, n2), dtype=np.int64)
    for k in range(n3):
        for f, m in masks[Line.C]:
            c = _apply(c, f, _line_slice(m, 2, k), acc)
        c = wrap(c + prod[..., k], acc.width)
    return c


def _check_operands(a: QuantTensor, b: QuantTensor, config: SystolicConfig):
    if a.shape != (config.n1, config.n3) or b.shape != (config.n3, config.n2):
        raise SimulationError(
            f"operand shapes {a.shape} x {b.shape} do not match config "
            f"({config.n1}, {config.n2}, {config.n3})"
        )
    for t in (a, b):
        if t.format.is_float != config.op_format.is_float or t.format.width > config.op_format.width:
            raise SimulationError(f"operand format {t.format} incompatible with {config.op_format}")


def _output_format_scale(a: QuantTensor, b: QuantTensor, config: SystolicConfig):
    return config.acc_format, a.scale * b.scale


def simulate_matmul(
    a_matrix: QuantTensor,
    b_matrix: QuantTensor,
    config: SystolicConfig,
    faults: Sequence[Fault] = (),
    cycle_offset: int = 0,
) -> QuantTensor:
    """One pass ``A (n1 x n3) @ B (n3 x n2)``; returns raw accumulator words."""
    _check_operands(a_matrix, b_matrix, config)
    for f in faults:
        validate_fault(f, config)
    out = run_tile_passes(
        a_matrix.data[None], b_matrix.data[None], config, faults, [cycle_offset]
    )[0]
    fmt, scale = _output_format_scale(a_matrix, b_matrix, config)
    return QuantTensor(out, fmt, scale)


def simulate_matmul_wavefront(
    a_matrix: QuantTensor,
    b_matrix: QuantTensor,
    config: SystolicConfig,
    faults: Sequence[Fault] = (),
    cycle_offset: int = 0,
    trace: bool = False,
):
    """Point-by-point evaluation in wavefront order.

    Returns the output tensor, or ``(output, trace)`` when ``trace`` is set;
    the trace maps each local cycle to ``{(x, y): (a, b, c)}``.
    """
    _check_operands(a_matrix, b_matrix, config)
    for f in faults:
        validate_fault(f, config)
    A, B = a_matrix.data, b_matrix.data
    op, acc = config.op_format, config.acc_format
    zero = np.float32(0) if acc.is_float else 0
    points = sorted(config.domain.points(), key=lambda p: (config.cycle_of(p), p))
    av, bv, cv = {}, {}, {}
    tr: dict[int, dict] = defaultdict(dict)
    for p in points:
        i, j, k = p
        t = config.cycle_of(p)
        pe = config.pe_of(p)
        g = cycle_offset + t
        a_in = av[(i, j - 1, k)] if j > 1 else A[i - 1, k - 1]
        b_in = bv[(i - 1, j, k)] if i > 1 else B[k - 1, j - 1]
        c_in = cv[(i, j, k - 1)] if k > 1 else zero
        for f in faults:
            if f.pe != pe or not f.active(g):
                continue
            if f.line is Line.A:
                a_in = apply_bit_fault(a_in, f.kind, f.bit, op)
            elif f.line is Line.B:
                b_in = apply_bit_fault(b_in, f.kind, f.bit, op)
            else:
                c_in = apply_bit_fault(c_in, f.kind, f.bit, acc)
        av[p], bv[p] = a_in, b_in
        cv[p] = mac(a_in, b_in, c_in, op, acc)
        if trace:
            tr[t][pe] = (a_in, b_in, cv[p])
    out = np.empty((config.n1, config.n2), dtype=np.float32 if acc.is_float else np.int64)
    for i in range(1, config.n1 + 1):
        for j in range(1, config.n2 + 1):
            out[i - 1, j - 1] = cv[(i, j, config.n3)]
    fmt, scale = _output_format_scale(a_matrix, b_matrix, config)
    result = QuantTensor(out, fmt, scale)
    if trace:
        return result, dict(tr)
    return result


def write_trace_csv(path, trace: dict, cycle_offset: int = 0) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "x", "y", "a", "b", "c"])
        for t in sorted(trace):
            for (x, y), (a, b, c) in sorted(trace[t].items()):
                w.writerow([cycle_offset + t, x, y, a, b, c])

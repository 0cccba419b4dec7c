"""Quantized tensors and bit-exact word arithmetic.

Integer and fixed-point words are held as signed Python/NumPy integers in
two's complement of ``width`` bits.  Fixed-point is an integer word with a
power-of-two scale (``scale == 2**-frac_bits``).  float32 words are NumPy
float32 values; bit faults act on their IEEE-754 pattern.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class NumericsError(ValueError):
    pass


INT = "int"
FIXED = "fixed"
FLOAT32 = "float32"

_KIND_ALIASES = {
    "int": INT,
    "signed-integer": INT,
    "integer": INT,
    "fixed": FIXED,
    "fixed-point": FIXED,
    "float": FLOAT32,
    "float32": FLOAT32,
}


@dataclass(frozen=True)
class NumberFormat:
    kind: str = INT
    width: int = 8
    frac_bits: int = 0

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise NumericsError(f"unknown number format kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.width not in (8, 16, 32):
            raise NumericsError(f"word width must be 8, 16 or 32, got {self.width}")
        if kind == FLOAT32 and self.width != 32:
            raise NumericsError("float32 format requires width 32")
        if kind != FIXED and self.frac_bits:
            raise NumericsError("frac_bits only applies to fixed-point formats")
        if not 0 <= self.frac_bits < self.width:
            raise NumericsError(f"frac_bits must be in [0, width), got {self.frac_bits}")

    @property
    def is_float(self) -> bool:
        return self.kind == FLOAT32

    @property
    def min_word(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def max_word(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def scale(self) -> float | None:
        """Implied scale of a fixed-point word; ``None`` for other kinds."""
        return 2.0**-self.frac_bits if self.kind == FIXED else None

    @property
    def np_dtype(self):
        if self.is_float:
            return np.float32
        return {8: np.int8, 16: np.int16, 32: np.int32}[self.width]

    def as_dict(self) -> dict:
        d = {"kind": self.kind, "width": self.width}
        if self.kind == FIXED:
            d["frac_bits"] = self.frac_bits
        return d

    @classmethod
    def from_dict(cls, d: "dict | NumberFormat | None", default: "NumberFormat | None" = None):
        if d is None:
            return default if default is not None else cls()
        if isinstance(d, NumberFormat):
            return d
        return cls(d.get("kind", INT), int(d.get("width", 8)), int(d.get("frac_bits", 0)))


INT8 = NumberFormat(INT, 8)
INT16 = NumberFormat(INT, 16)
INT32 = NumberFormat(INT, 32)
F32 = NumberFormat(FLOAT32, 32)


def wrap(values, width: int):
    """Reduce integers modulo ``2**width`` into the signed two's-complement range."""
    half = 1 << (width - 1)
    if isinstance(values, np.ndarray):
        if width == 64:
            return values
        return ((values.astype(np.int64) + half) & ((1 << width) - 1)) - half
    return ((int(values) + half) & ((1 << width) - 1)) - half


@dataclass
class QuantTensor:
    """Row-major tensor of machine words with a dequantization scale."""

    data: np.ndarray
    format: NumberFormat = INT8
    scale: float = 1.0
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.shape:
            shape = tuple(int(s) for s in self.shape)
            if data.size != math.prod(shape):
                raise NumericsError(
                    f"data length {data.size} does not match shape {shape}"
                )
            data = data.reshape(shape)
        self.shape = tuple(data.shape)
        if self.format.is_float:
            data = data.astype(np.float32)
        else:
            if data.size and (data.min() < self.format.min_word or data.max() > self.format.max_word):
                raise NumericsError(f"words do not fit in {self.format.width} bits")
            data = data.astype(np.int64)
        self.data = data
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise NumericsError(f"scale must be positive and finite, got {self.scale}")

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale

    def reshape(self, *shape) -> "QuantTensor":
        return QuantTensor(self.data.reshape(*shape), self.format, self.scale)

    def with_data(self, data: np.ndarray) -> "QuantTensor":
        return QuantTensor(data, self.format, self.scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.format == other.format
            and self.scale == other.scale
            and np.array_equal(self.data, other.data)
        )


def quantize(values, fmt: NumberFormat, scale: float = 1.0) -> QuantTensor:
    """Round-to-nearest-even quantization with saturation to ``fmt``."""
    if not (scale > 0 and math.isfinite(scale)):
        raise NumericsError(f"scale must be positive, got {scale}")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("cannot quantize non-finite values")
    if fmt.is_float:
        return QuantTensor((arr / scale).astype(np.float32), fmt, scale)
    words = np.clip(np.rint(arr / scale), fmt.min_word, fmt.max_word).astype(np.int64)
    return QuantTensor(words, fmt, scale)


STUCK0 = "stuck0"
STUCK1 = "stuck1"
FLIP = "flip"
FAULT_KINDS = (STUCK0, STUCK1, FLIP)


def _check_bit(kind: str, bit: int, width: int):
    if kind not in FAULT_KINDS:
        raise NumericsError(f"unknown fault kind {kind!r}")
    if not 0 <= bit < width:
        raise NumericsError(f"bit {bit} out of range for a {width}-bit word")


def _float_bits(word) -> int:
    # stay in float32 so NaN payloads survive (a trip through double quiets them)
    return int(np.asarray(word, dtype=np.float32).view(np.uint32))


def _bits_float(bits: int) -> np.float32:
    return np.asarray(bits & 0xFFFFFFFF, dtype=np.uint32).view(np.float32)[()]


def apply_bit_fault(word, kind: str, bit: int, fmt: NumberFormat = INT8):
    """Force (stuck0/stuck1) or invert (flip) one bit of a machine word."""
    _check_bit(kind, bit, fmt.width)
    mask = 1 << bit
    if fmt.is_float:
        u = _float_bits(word)
    else:
        u = int(word) & ((1 << fmt.width) - 1)
    if kind == STUCK0:
        u &= ~mask
    elif kind == STUCK1:
        u |= mask
    else:
        u ^= mask
    if fmt.is_float:
        return _bits_float(u)
    return wrap(u, fmt.width)


def apply_bit_fault_array(values: np.ndarray, kind: str, bit: int, fmt: NumberFormat) -> np.ndarray:
    """Vectorized :func:`apply_bit_fault`; returns a new array."""
    _check_bit(kind, bit, fmt.width)
    if fmt.is_float:
        u = np.asarray(values, dtype=np.float32).view(np.uint32).copy()
        mask = np.uint32(1 << bit)
        if kind == STUCK0:
            u &= ~mask
        elif kind == STUCK1:
            u |= mask
        else:
            u ^= mask
        return u.view(np.float32)
    u = np.asarray(values, dtype=np.int64) & ((1 << fmt.width) - 1)
    mask = 1 << bit
    if kind == STUCK0:
        u = u & ~mask
    elif kind == STUCK1:
        u = u | mask
    else:
        u = u ^ mask
    return wrap(u, fmt.width)


def default_acc_format(op_format: NumberFormat, width: int = 32) -> NumberFormat:
    if op_format.is_float:
        return F32
    if op_format.kind == FIXED:
        # products carry twice the fractional bits until the output shift
        return NumberFormat(FIXED, width, min(2 * op_format.frac_bits, width - 1))
    return NumberFormat(INT, width)


# NaN payload propagation depends on operand order and on the FPU, so float
# MACs return one canonical quiet NaN (a default-NaN mode) to stay portable
CANONICAL_NAN = np.uint32(0x7FC00000).view(np.float32)


def canonical_nan(x):
    """Replace every NaN in a float32 scalar or array with :data:`CANONICAL_NAN`."""
    if np.ndim(x) == 0:
        return CANONICAL_NAN if np.isnan(x) else np.float32(x)
    return np.where(np.isnan(x), CANONICAL_NAN, x).astype(np.float32)


def mac(a, b, acc, op_format: NumberFormat = INT8, acc_format: NumberFormat = INT32):
    """One multiply-accumulate: ``acc + a * b`` in the accumulator format."""
    if acc_format.is_float or op_format.is_float:
        return canonical_nan(np.float32(acc) + np.float32(a) * np.float32(b))
    return wrap(int(acc) + int(a) * int(b), acc_format.width)


# --- binary tensor files -----------------------------------------------------

MAGIC = b"UREFI-TENSOR"
VERSION = 1
_HEADER = struct.Struct("<12sI")

_DTYPE_CODES = {
    (INT, 8): 0x01,
    (INT, 16): 0x02,
    (INT, 32): 0x03,
    (FLOAT32, 32): 0x04,
    (FIXED, 8): 0x11,
    (FIXED, 16): 0x12,
    (FIXED, 32): 0x13,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TensorFileError(NumericsError):
    pass


def encode_tensor(t: QuantTensor) -> bytes:
    fmt = t.format
    if fmt.kind == FIXED and t.scale != 2.0 ** -fmt.frac_bits:
        raise TensorFileError("fixed-point tensors must have scale 2**-frac_bits")
    if len(t.shape) > 255:
        raise TensorFileError("rank too large")
    parts = [
        _HEADER.pack(MAGIC, VERSION),
        struct.pack("<BB", _DTYPE_CODES[(fmt.kind, fmt.width)], len(t.shape)),
        struct.pack(f"<{len(t.shape)}I", *t.shape),
        np.ascontiguousarray(t.data.astype(np.dtype(fmt.np_dtype).newbyteorder("<"))).tobytes(),
        struct.pack("<f", t.scale),
    ]
    return b"".join(parts)


def decode_tensor(buf: bytes, source: str = "<bytes>") -> QuantTensor:
    if len(buf) < _HEADER.size + 2:
        raise TensorFileError(f"{source}: truncated tensor file")
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported tensor file version {version}")
    code, rank = struct.unpack_from("<BB", buf, _HEADER.size)
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"{source}: unknown dtype code 0x{code:02x}")
    kind, width = _CODE_DTYPES[code]
    off = _HEADER.size + 2
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n = math.prod(dims)
    itemsize = width // 8
    if len(buf) != off + n * itemsize + 4:
        raise TensorFileError(f"{source}: payload size does not match dims {dims}")
    fmt_dtype = np.dtype(NumberFormat(kind, width).np_dtype).newbyteorder("<")
    data = np.frombuffer(buf, dtype=fmt_dtype, count=n, offset=off).reshape(dims)
    (scale,) = struct.unpack_from("<f", buf, off + n * itemsize)
    frac = 0
    if kind == FIXED:
        frac = int(round(-math.log2(scale)))
    return QuantTensor(data.copy(), NumberFormat(kind, width, frac), float(scale))


def save_tensor(path, t: QuantTensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> QuantTensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    return decode_tensor(buf, str(path))


def matmul_reference(a: Sequence[Sequence[int]], b: Sequence[Sequence[int]], acc_width: int) -> list[list[int]]:
    """Arbitrary-precision matmul reduced to ``acc_width`` bits. Slow; for checking."""
    n1, n3 = len(a), len(a[0])
    n2 = len(b[0])
    out = []
    for i in range(n1):
        row = []
        for j in range(n2):
            s = 0
            for k in range(n3):
                s += int(a[i][k]) * int(b[k][j])
            row.append(wrap(s, acc_width))
        out.append(row)
    return out

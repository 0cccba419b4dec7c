from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_matmul, wrap_int
from urefi.numerics import (
    F32,
    FAULT_KINDS,
    FLIP,
    INT8,
    INT16,
    INT32,
    STUCK0,
    STUCK1,
    NumberFormat,
    NumericsError,
    QuantTensor,
    TensorFileError,
    apply_bit_fault,
    apply_bit_fault_array,
    decode_tensor,
    default_acc_format,
    encode_tensor,
    load_tensor,
    mac,
    matmul_reference,
    quantize,
    save_tensor,
    wrap,
)


class TestQuantize:
    def test_examples(self):
        assert quantize([0.0], INT8, 0.1).data.tolist() == [0]
        assert quantize([1.0], INT8, 0.1).data.tolist() == [10]
        assert quantize([100.0], INT8, 0.1).data.tolist() == [127]
        assert quantize([-100.0], INT8, 0.1).data.tolist() == [-128]

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NumericsError):
            quantize([1.0, bad], INT8, 0.1)

    def test_dequantize_roundtrip(self):
        t = quantize(np.array([0.25, -0.5]), INT16, 1 / 256)
        assert t.dequantize().tolist() == [0.25, -0.5]

    def test_word_range_enforced(self):
        with pytest.raises(NumericsError):
            QuantTensor(np.array([200]), INT8)

    def test_fixed_point_scale(self):
        fmt = NumberFormat("fixed", 16, 8)
        assert fmt.scale == 2.0**-8
        assert quantize([1.5], fmt, fmt.scale).data.tolist() == [384]


class TestBitFaults:
    def test_examples(self):
        assert apply_bit_fault(0b0101, FLIP, 1) == 0b0111
        assert apply_bit_fault(0b0111, STUCK0, 0) == 0b0110
        assert apply_bit_fault(0b0000, STUCK1, 7, INT8) == -128

    def test_bit_out_of_range(self):
        with pytest.raises(NumericsError):
            apply_bit_fault(0, FLIP, 8, INT8)
        with pytest.raises(NumericsError):
            apply_bit_fault(0, FLIP, -1, INT8)

    def test_float_sign_bit(self):
        assert apply_bit_fault(np.float32(1.5), FLIP, 31, F32) == np.float32(-1.5)

    @given(st.integers(-128, 127), st.integers(0, 7), st.sampled_from([STUCK0, STUCK1]))
    def test_stuck_idempotent(self, w, bit, kind):
        once = apply_bit_fault(w, kind, bit, INT8)
        assert apply_bit_fault(once, kind, bit, INT8) == once

    @given(st.integers(-(2**31), 2**31 - 1), st.integers(0, 31))
    def test_flip_involution(self, w, bit):
        assert apply_bit_fault(apply_bit_fault(w, FLIP, bit, INT32), FLIP, bit, INT32) == w

    @given(st.integers(-(2**15), 2**15 - 1), st.integers(0, 15), st.sampled_from(FAULT_KINDS))
    def test_at_most_one_bit(self, w, bit, kind):
        out = apply_bit_fault(w, kind, bit, INT16)
        diff = (out ^ w) & 0xFFFF
        assert diff in (0, 1 << bit)

    @settings(max_examples=50)
    @given(st.lists(st.integers(-128, 127), min_size=1, max_size=20), st.integers(0, 7), st.sampled_from(FAULT_KINDS))
    def test_array_matches_scalar(self, ws, bit, kind):
        arr = apply_bit_fault_array(np.array(ws), kind, bit, INT8)
        assert arr.tolist() == [apply_bit_fault(w, kind, bit, INT8) for w in ws]

    @settings(max_examples=50)
    @given(st.floats(width=32, allow_nan=False), st.integers(0, 31), st.sampled_from(FAULT_KINDS))
    def test_float_array_matches_scalar(self, v, bit, kind):
        arr = apply_bit_fault_array(np.array([v], dtype=np.float32), kind, bit, F32)
        assert arr.view(np.uint32)[0] == np.float32(apply_bit_fault(v, kind, bit, F32)).view(np.uint32)


class TestMac:
    def test_examples(self):
        assert mac(0, 99, 5) == 5
        assert mac(3, 4, 5, INT8, INT32) == 17

    def test_repeated_max_product(self):
        acc = 0
        for _ in range(4):
            acc = mac(127, 127, acc, INT8, INT32)
        expected = 0
        for _ in range(4):
            expected += 127 * 127
        assert acc == expected == 64516

    def test_wraps_at_accumulator_width(self):
        assert mac(1, 1, 2**31 - 1, INT8, INT32) == -(2**31)
        assert mac(127, 127, 0, INT8, NumberFormat("int", 16)) == wrap_int(16129, 16)

    @given(st.lists(st.tuples(st.integers(-128, 127), st.integers(-128, 127)), max_size=64))
    def test_sequence_equals_exact_dot(self, pairs):
        acc = 0
        for a, b in pairs:
            acc = mac(a, b, acc, INT8, INT32)
        assert acc == sum(a * b for a, b in pairs)  # fits in 32 bits for <= 64 terms

    def test_float_nan_result_is_canonical(self):
        payload_nan = np.uint32(0x7FA00001).view(np.float32)
        for a, b, acc in [(payload_nan, 1.0, 0.0), (np.inf, 0.0, 1.0), (1.0, 1.0, payload_nan)]:
            out = mac(a, b, acc, F32, F32)
            assert np.float32(out).view(np.uint32) == 0x7FC00000
        assert mac(np.float32(1.5), np.float32(2.0), np.float32(0.25), F32, F32) == np.float32(3.25)

    def test_fixed_accumulator_has_double_frac(self):
        assert default_acc_format(NumberFormat("fixed", 8, 4)).frac_bits == 8
        assert default_acc_format(INT8) == INT32


class TestWrap:
    @given(st.integers(-(2**40), 2**40), st.sampled_from([8, 16, 32]))
    def test_scalar_matches_oracle(self, v, width):
        assert wrap(v, width) == wrap_int(v, width)

    def test_array(self):
        assert wrap(np.array([128, -129, 255]), 8).tolist() == [-128, 127, -1]


class TestTensorFiles:
    @pytest.mark.parametrize(
        "fmt,data",
        [
            (INT8, np.array([[1, -2], [127, -128]])),
            (INT16, np.arange(-6, 6).reshape(2, 3, 2)),
            (INT32, np.array([2**31 - 1, -(2**31)])),
            (F32, np.array([1.5, -0.25, 3e-8], dtype=np.float32)),
            (NumberFormat("fixed", 16, 8), np.array([256, -1])),
        ],
    )
    def test_roundtrip(self, fmt, data, tmp_path):
        scale = fmt.scale if fmt.kind == "fixed" else 0.125
        t = QuantTensor(data, fmt, scale)
        assert decode_tensor(encode_tensor(t)) == t
        save_tensor(tmp_path / "t.bin", t)
        assert load_tensor(tmp_path / "t.bin") == t

    def test_layout(self):
        buf = encode_tensor(QuantTensor(np.array([1, -1]), INT8, 0.5))
        assert buf[:12] == b"UREFI-TENSOR"
        assert buf[16] == 0x01 and buf[17] == 1
        assert int.from_bytes(buf[18:22], "little") == 2
        assert buf[22:24] == bytes([1, 0xFF])
        assert len(buf) == 12 + 4 + 2 + 4 + 2 + 4

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b[:16] + b"\x7f" + b[17:]])
    def test_corrupt_rejected(self, mutate):
        buf = encode_tensor(QuantTensor(np.array([1, 2, 3]), INT8, 1.0))
        with pytest.raises(TensorFileError):
            decode_tensor(mutate(buf))


def test_matmul_reference_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(-128, 128, (3, 5))
        b = rng.integers(-128, 128, (5, 4))
        assert matmul_reference(a.tolist(), b.tolist(), 16) == naive_matmul(a, b, 16)
    assert math.isclose(F32.max_word, np.finfo(np.float32).max) or F32.is_float

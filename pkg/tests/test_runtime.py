from __future__ import annotations

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import direct_conv, wrap_int
from urefi.array import SystolicConfig
from urefi.faults import Fault, expand_fault
from urefi.fixtures import LENET5, lenet5_param_count, synthetic_digits
from urefi.numerics import INT8, INT16, INT32, STUCK1, QuantTensor, save_tensor
from urefi.runtime import (
    ExecutionPlan,
    Layer,
    ModelError,
    NetworkModel,
    conv_reference,
    forward,
    infer_hierarchical,
    infer_reference,
    load_inputs,
    load_model,
    read_idx,
    save_model,
    softmax,
    write_idx,
)

CFG8 = SystolicConfig.build(8, 8, 128)


def q(a, fmt=INT8, scale=1.0):
    return QuantTensor(np.asarray(a), fmt, scale)


def _fc_model(tmp_path):
    w = np.zeros((2, 4), dtype=int)
    w[0, 0] = w[1, 1] = 1
    d = tmp_path / "fc"
    d.mkdir()
    save_tensor(d / "w.bin", q(w))
    (d / "m.json").write_text(json.dumps({
        "format": "urefi-model",
        "input": {"shape": [4], "scale": 1.0},
        "op_format": {"kind": "int", "width": 8},
        "layers": [{"kind": "fc", "weights": "w.bin", "out_scale": 1.0}],
    }))
    return d / "m.json"


class TestModelFiles:
    def test_small_fc(self, tmp_path):
        model = load_model(_fc_model(tmp_path))
        out = forward(model, q([1, 2, 3, 4]))
        assert out.data.tolist() == [1, 2]
        assert infer_reference(model, q([1, 2, 3, 4])).tolist() == [1.0, 2.0]

    def test_missing_tensor_names_path(self, tmp_path):
        m = _fc_model(tmp_path)
        (m.parent / "w.bin").unlink()
        with pytest.raises(ModelError, match="w.bin"):
            load_model(m)

    @pytest.mark.parametrize("text", ["{not json", '{"format": "other"}', '{"format": "urefi-model"}'])
    def test_malformed_manifest(self, tmp_path, text):
        (tmp_path / "m.json").write_text(text)
        with pytest.raises(ModelError):
            load_model(tmp_path / "m.json")

    def test_lenet_param_count(self, lenet_fixture):
        model = lenet_fixture["model"]
        assert [l.kind for l in model.layers] == [k for k, _ in LENET5]
        per_layer = [(6, 1, 5), (16, 6, 5)]
        conv = sum(k * c * s * s + k for k, c, s in per_layer)
        fc = sum(o * i + o for o, i in [(120, 400), (84, 120), (10, 84)])
        assert model.param_count() == conv + fc == lenet5_param_count() == 61706

    def test_save_load_roundtrip(self, lenet_fixture, tmp_path):
        model = lenet_fixture["model"]
        again = load_model(save_model(model, tmp_path))
        x = lenet_fixture["inputs"][0][1]
        assert np.array_equal(infer_reference(model, x), infer_reference(again, x))

    def test_shape_errors(self):
        with pytest.raises(ModelError):
            NetworkModel("bad", (4,), 1.0, INT8, INT32, [Layer("fc", weights=q(np.zeros((2, 3), dtype=int)))])
        with pytest.raises(ModelError):
            NetworkModel("bad", (4,), 1.0, INT8, INT32, [Layer("dropout")])


class TestKernels:
    def test_softmax_uniform(self):
        assert np.allclose(softmax(np.full(7, 3.0)), 1 / 7)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_softmax_is_distribution(self, v):
        p = softmax(np.array(v))
        assert (p >= 0).all() and abs(p.sum() - 1) < 1e-6

    def test_relu(self):
        model = NetworkModel("r", (3,), 1.0, INT8, INT32, [Layer("relu")])
        assert forward(model, q([-3, -1, -128])).data.tolist() == [0, 0, 0]

    def test_conv_reference_matches_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.integers(-128, 128, (3, 7, 7))
        w = rng.integers(-128, 128, (4, 3, 3, 3))
        for stride, pad in [(1, 0), (2, 1), (1, 1)]:
            assert conv_reference(x, w, stride, pad).tolist() == direct_conv(x, w, stride, pad, 64)


def _rational_forward(model, x):
    """Exact-rational forward pass of an fc/relu/softmax chain."""
    v = [int(t) for t in x.data]
    s_in = Fraction(x.scale)
    for layer in model.layers:
        if layer.kind == "fc":
            W = layer.weights.data.tolist()
            b = layer.bias.data.tolist() if layer.bias is not None else [0] * len(W)
            acc = [wrap_int(wrap_int(sum(wi * xi for wi, xi in zip(row, v)), 32) + bi, 32) for row, bi in zip(W, b)]
            m = s_in * Fraction(layer.weights.scale) / Fraction(layer.out_scale)
            v = [max(-128, min(127, round(a * m))) for a in acc]
            s_in = Fraction(layer.out_scale)
        elif layer.kind == "relu":
            v = [max(0, t) for t in v]
    logits = [float(t * s_in) for t in v]
    e = [np.exp(l - max(logits)) for l in logits]
    return [t / sum(e) for t in e]


def test_mlp_forward_matches_rational_oracle():
    rng = np.random.default_rng(9)
    layers = [
        Layer("fc", weights=q(rng.integers(-128, 128, (6, 5)), INT8, 2**-7),
              bias=q(rng.integers(-500, 500, 6), INT32), out_scale=2**-3),
        Layer("relu"),
        Layer("fc", weights=q(rng.integers(-128, 128, (3, 6)), INT8, 2**-6),
              bias=q(rng.integers(-500, 500, 3), INT32), out_scale=2**-4),
        Layer("softmax"),
    ]
    model = NetworkModel("mlp", (5,), 2**-7, INT8, INT32, layers)
    for _ in range(20):
        x = q(rng.integers(-128, 128, 5), INT8, 2**-7)
        got = infer_reference(model, x)
        assert np.allclose(got, _rational_forward(model, x), rtol=0, atol=1e-12)
        plan = ExecutionPlan(0, SystolicConfig.build(2, 2, 2))
        assert np.array_equal(infer_hierarchical(model, x, plan), got)


class TestHierarchical:
    @pytest.mark.parametrize("target", [0, 3, 7, 9, 11])
    def test_golden_equivalence(self, lenet_fixture, target):
        model = lenet_fixture["model"]
        plan = ExecutionPlan(target, CFG8)
        for _, x in lenet_fixture["inputs"][:5]:
            assert np.array_equal(infer_hierarchical(model, x, plan), infer_reference(model, x))

    def test_activations_on_b(self, lenet_fixture):
        model = lenet_fixture["model"]
        x = lenet_fixture["inputs"][0][1]
        plan = ExecutionPlan(3, CFG8, activations_on="B")
        assert np.array_equal(infer_hierarchical(model, x, plan), infer_reference(model, x))

    def test_bad_target(self, lenet_fixture):
        model = lenet_fixture["model"]
        x = lenet_fixture["inputs"][0][1]
        for bad in (1, 99):
            with pytest.raises(ModelError):
                infer_hierarchical(model, x, ExecutionPlan(bad, CFG8))
        with pytest.raises(ModelError):
            infer_hierarchical(model, x, ExecutionPlan(11, SystolicConfig.build(8, 8, 8, op_format=INT16)))

    def test_unused_pe_fault_is_harmless(self, lenet_fixture):
        model = lenet_fixture["model"]
        # fc row vector uses only array row 0: faults on row 7 never see live data
        f = Fault.permanent("A", (7, 3), STUCK1, 6)
        x = lenet_fixture["inputs"][0][1]
        plan = ExecutionPlan(11, CFG8, (f,))
        assert expand_fault(f, CFG8)  # the PE exists and the fault does propagate on the array
        assert np.array_equal(infer_hierarchical(model, x, plan), infer_reference(model, x))

    def test_sign_bit_fault_moves_argmax(self, lenet_fixture):
        model = lenet_fixture["model"]
        flipped = 0
        for _, x in lenet_fixture["inputs"]:
            g = int(np.argmax(infer_reference(model, x)))
            f = Fault.permanent("C", (0, g % CFG8.n2), STUCK1, 31)
            out = infer_hierarchical(model, x, ExecutionPlan(11, CFG8, (f,)))
            flipped += int(np.argmax(out)) != g
        assert flipped >= 1

    def test_locality(self, lenet_fixture):
        model = lenet_fixture["model"]
        x = lenet_fixture["inputs"][1][1]
        _, clean = forward(model, x, collect=True)
        plan = ExecutionPlan(7, CFG8, (Fault.permanent("C", (0, 0), STUCK1, 20),))
        _, faulty = forward(model, x, plan, collect=True)
        for a, b in zip(clean[:7], faulty[:7]):
            assert a == b
        assert clean[7] != faulty[7]


class TestInputs:
    def test_idx_roundtrip(self, tmp_path):
        imgs = synthetic_digits(3, 1)
        write_idx(tmp_path / "x.idx", imgs)
        assert np.array_equal(read_idx(tmp_path / "x.idx"), imgs)
        for arr in (np.arange(6, dtype=np.int16).reshape(2, 3), np.linspace(0, 1, 4).astype(np.float32)):
            write_idx(tmp_path / "y.idx", arr)
            assert np.array_equal(read_idx(tmp_path / "y.idx"), arr)

    def test_not_idx(self, tmp_path):
        (tmp_path / "x.idx").write_bytes(b"hello world")
        with pytest.raises(ModelError):
            read_idx(tmp_path / "x.idx")

    def test_load_directory(self, tmp_path, lenet_fixture):
        model = lenet_fixture["model"]
        d = tmp_path / "in"
        d.mkdir()
        for name, x in lenet_fixture["inputs"][:3]:
            save_tensor(d / f"img{name}.bin", x)
        loaded = load_inputs(d, model)
        assert [n for n, _ in loaded] == ["img0", "img1", "img2"]
        assert all(a[1] == b[1] for a, b in zip(loaded, lenet_fixture["inputs"]))

    def test_fixture_inputs(self, lenet_fixture):
        assert len(lenet_fixture["inputs"]) == 20
        assert len(load_inputs(lenet_fixture["inputs_path"], lenet_fixture["model"], 10)) == 10
        preds = {int(np.argmax(infer_reference(lenet_fixture["model"], x))) for _, x in lenet_fixture["inputs"]}
        assert len(preds) > 2

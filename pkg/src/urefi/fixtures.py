"""Deterministic synthetic models and MNIST-format inputs for tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .numerics import INT32, NumberFormat, QuantTensor, quantize
from .runtime import Layer, NetworkModel, conv_reference, forward, infer_shapes, save_model, write_idx

# (kind, params) of the classic LeNet-5 chain on 28x28 inputs
LENET5 = [
    ("conv", dict(out=6, k=5, padding=2)),
    ("relu", {}),
    ("maxpool", dict(size=2)),
    ("conv", dict(out=16, k=5, padding=0)),
    ("relu", {}),
    ("maxpool", dict(size=2)),
    ("flatten", {}),
    ("fc", dict(out=120)),
    ("relu", {}),
    ("fc", dict(out=84)),
    ("relu", {}),
    ("fc", dict(out=10)),
    ("softmax", {}),
]


def synthetic_digits(count: int, seed: int = 0, size: int = 28) -> np.ndarray:
    """Stroke-and-ring images in ``uint8``, shaped ``(count, size, size)``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((count, size, size), dtype=np.uint8)
    for n in range(count):
        img = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            if rng.random() < 0.5:
                x0, y0, x1, y1 = rng.uniform(4, size - 4, 4)
                t = np.linspace(0, 1, 40)
                px, py = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
                d = np.min(np.hypot(xx[..., None] - px, yy[..., None] - py), axis=-1)
            else:
                cx, cy = rng.uniform(8, size - 8, 2)
                r = rng.uniform(3, 8)
                d = np.abs(np.hypot(xx - cx, yy - cy) - r)
            img = np.maximum(img, np.clip(1.5 - d, 0, 1))
        out[n] = np.round(img * 255).astype(np.uint8)
    return out


def _calibrate_scale(real_max: float, fmt: NumberFormat) -> float:
    if fmt.is_float:
        return 1.0
    return max(real_max, 1e-6) / fmt.max_word


def build_model(
    arch=LENET5,
    input_shape=(1, 28, 28),
    op_format: NumberFormat = NumberFormat("int", 8),
    acc_format: NumberFormat = INT32,
    calibration: np.ndarray | None = None,
    seed: int = 0,
    name: str = "lenet5-synthetic",
) -> NetworkModel:
    """Random-weight model whose activation scales are calibrated on ``calibration``.

    ``calibration`` holds float inputs in [0, 1] shaped like ``input_shape``.
    """
    rng = np.random.default_rng(seed)
    if calibration is None:
        calibration = synthetic_digits(16, seed + 1).astype(np.float64) / 255.0
    calib = calibration.reshape((-1, *input_shape))
    input_scale = 1.0 if op_format.is_float else 1.0 / op_format.max_word
    model = NetworkModel(name, input_shape, input_scale, op_format, acc_format, [])
    acts = [quantize(x, op_format, input_scale) for x in calib]
    shape = tuple(input_shape)
    last_compute = max(i for i, (k, _) in enumerate(arch) if k in ("conv", "fc"))
    for pos, (kind, params) in enumerate(arch):
        is_last = pos == last_compute
        layer = Layer(kind=kind, name=f"{kind}{len(model.layers)}")
        if kind in ("conv", "fc"):
            if kind == "conv":
                fan_in = shape[0] * params["k"] ** 2
                w_shape = (params["out"], shape[0], params["k"], params["k"])
                layer.padding = params.get("padding", 0)
                layer.stride = params.get("stride", 1)
            else:
                fan_in = shape[0]
                w_shape = (params["out"], shape[0])
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), w_shape)
            w_scale = _calibrate_scale(np.abs(w).max(), op_format)
            layer.weights = quantize(w, op_format, w_scale)
            acc_scale = acts[0].scale * layer.weights.scale
            b = rng.normal(0.0, 0.05, w_shape[0])
            if acc_format.is_float:
                layer.bias = QuantTensor(b.astype(np.float32), acc_format, 1.0)
            else:
                bw = np.clip(np.rint(b / acc_scale), acc_format.min_word, acc_format.max_word)
                layer.bias = QuantTensor(bw.astype(np.int64), acc_format, 1.0)
            raw = []
            for x in acts:
                if kind == "conv":
                    raw.append(conv_reference(x.data, layer.weights.data, layer.stride, layer.padding))
                else:
                    raw.append(layer.weights.data @ x.data)
            if kind == "fc" and is_last and not acc_format.is_float:
                # center the logits so that calibration inputs spread over classes
                centred = -np.rint(np.mean(raw, axis=0)).astype(np.int64) + layer.bias.data
                layer.bias = QuantTensor(centred, acc_format, 1.0)
            bias = layer.bias.data[:, None, None] if kind == "conv" else layer.bias.data
            # real-valued accumulator range on the calibration set
            peaks = [np.abs((r + bias).astype(np.float64)).max() * acc_scale for r in raw]
            layer.out_scale = float(_calibrate_scale(float(np.percentile(peaks, 90)), op_format))
        elif kind == "maxpool":
            layer.pool = params.get("size", 2)
            layer.stride = params.get("stride", layer.pool)
        model.layers.append(layer)
        model.shapes = infer_shapes(model)
        idx = len(model.layers) - 1
        acts = [forward(model, x, start=idx, stop=idx + 1) for x in acts]
        shape = model.shapes[-1]
    return NetworkModel(name, input_shape, input_scale, op_format, acc_format, model.layers)


def lenet5_param_count() -> int:
    """Closed-form parameter count of :data:`LENET5` on 28x28 single-channel input."""
    conv1 = 6 * 1 * 5 * 5 + 6
    conv2 = 16 * 6 * 5 * 5 + 16
    fc1 = 120 * 16 * 5 * 5 + 120
    fc2 = 84 * 120 + 84
    fc3 = 10 * 84 + 10
    return conv1 + conv2 + fc1 + fc2 + fc3


def write_fixture(directory, width: int = 8, n_inputs: int = 20, seed: int = 0) -> dict:
    """Write ``model.json`` + tensors and ``inputs-images.idx`` under ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(op_format=NumberFormat("int", width), seed=seed, name=f"lenet5-int{width}")
    manifest = save_model(model, out)
    images = synthetic_digits(n_inputs, seed + 100)
    write_idx(out / "inputs-images.idx", images)
    return {"manifest": manifest, "inputs": out / "inputs-images.idx", "model": model}

"""Quantized DNN inference with one layer optionally executed on the array.

Every layer except the plan's target runs on a NumPy reference path.  The
target conv/fc layer is lowered, multiplied on the simulated array (with the
plan's faults) and lifted back, then requantized exactly like the reference
path, so an empty fault list reproduces the reference bit for bit.
"""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .array import SystolicConfig
from .faults import Fault
from .lolif import ConvShape, lift, lower_activation, lower_weights, tiled_matmul
from .numerics import (
    NumberFormat,
    NumericsError,
    QuantTensor,
    load_tensor,
    quantize,
    save_tensor,
    wrap,
)


class ModelError(ValueError):
    pass


LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "flatten", "softmax")
COMPUTE_KINDS = ("conv", "fc")


@dataclass
class Layer:
    kind: str
    name: str = ""
    weights: QuantTensor | None = None
    bias: QuantTensor | None = None
    stride: int = 1
    padding: int = 0
    pool: int = 2
    out_scale: float = 1.0

    def param_count(self) -> int:
        n = 0
        for t in (self.weights, self.bias):
            if t is not None:
                n += t.data.size
        return n


@dataclass
class NetworkModel:
    name: str
    input_shape: tuple[int, ...]
    input_scale: float
    op_format: NumberFormat
    acc_format: NumberFormat
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = infer_shapes(self)

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def conv_shape(self, index: int) -> ConvShape:
        layer = self.layers[index]
        c, h, w = self.shapes[index]
        k, _, kh, kw = layer.weights.shape
        return ConvShape(c, k, kh, kw, layer.stride, layer.padding, h, w)


def infer_shapes(model: NetworkModel) -> list[tuple[int, ...]]:
    """Input shape of every layer, plus the final output shape at the end."""
    shape = model.input_shape
    shapes = []
    for idx, layer in enumerate(model.layers):
        shapes.append(shape)
        where = f"layer {idx} ({layer.kind})"
        if layer.kind not in LAYER_KINDS:
            raise ModelError(f"{where}: unknown layer kind {layer.kind!r}")
        if layer.kind == "conv":
            if layer.weights is None or len(layer.weights.shape) != 4:
                raise ModelError(f"{where}: conv weights must have shape (K, C, kh, kw)")
            if len(shape) != 3:
                raise ModelError(f"{where}: expects a (C, H, W) input, got {shape}")
            k, c, kh, kw = layer.weights.shape
            if c != shape[0]:
                raise ModelError(f"{where}: weights expect {c} channels, input has {shape[0]}")
            try:
                cs = ConvShape(c, k, kh, kw, layer.stride, layer.padding, shape[1], shape[2])
            except ValueError as exc:
                raise ModelError(f"{where}: {exc}") from exc
            shape = (k, cs.out_h, cs.out_w)
        elif layer.kind == "fc":
            if layer.weights is None or len(layer.weights.shape) != 2:
                raise ModelError(f"{where}: fc weights must have shape (out, in)")
            if len(shape) != 1 or shape[0] != layer.weights.shape[1]:
                raise ModelError(f"{where}: expects a flat input of {layer.weights.shape[1]}, got {shape}")
            shape = (layer.weights.shape[0],)
        elif layer.kind == "maxpool":
            if len(shape) != 3 or shape[1] < layer.pool or shape[2] < layer.pool:
                raise ModelError(f"{where}: cannot pool {shape} with size {layer.pool}")
            s = layer.stride
            shape = (shape[0], (shape[1] - layer.pool) // s + 1, (shape[2] - layer.pool) // s + 1)
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "softmax":
            if len(shape) != 1:
                raise ModelError(f"{where}: softmax expects a flat input, got {shape}")
        if layer.kind in COMPUTE_KINDS:
            out_ch = shape[0]
            if layer.bias is not None and layer.bias.shape != (out_ch,):
                raise ModelError(f"{where}: bias shape {layer.bias.shape} != ({out_ch},)")
            if not layer.out_scale > 0:
                raise ModelError(f"{where}: out_scale must be positive")
            if layer.weights.format != model.op_format:
                raise ModelError(f"{where}: weight format {layer.weights.format} != model {model.op_format}")
    shapes.append(shape)
    return shapes


# --- reference kernels -------------------------------------------------------

def conv_reference(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct convolution, exact in int64 (or float32 for float data)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("chwyx,kcyx->khw", win, w)


def requantize(acc: np.ndarray, acc_scale: float, out_scale: float, fmt: NumberFormat) -> np.ndarray:
    if fmt.is_float:
        return acc.astype(np.float32)
    m = acc_scale / out_scale
    return np.clip(np.rint(acc.astype(np.float64) * m), fmt.min_word, fmt.max_word).astype(np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class ExecutionPlan:
    """Run layer ``target_layer`` on the array described by ``config``."""

    target_layer: int | None
    config: SystolicConfig | None = None
    faults: tuple[Fault, ...] = ()
    activations_on: str = "A"

    def __post_init__(self):
        object.__setattr__(self, "faults", tuple(self.faults))
        if self.activations_on not in ("A", "B"):
            raise ModelError("activations_on must be 'A' or 'B'")
        if self.target_layer is not None and self.config is None:
            raise ModelError("a target layer needs a systolic config")

    def with_faults(self, faults: Sequence[Fault]) -> "ExecutionPlan":
        return replace(self, faults=tuple(faults))


def check_plan(model: NetworkModel, plan: ExecutionPlan) -> None:
    t = plan.target_layer
    if t is None:
        return
    if not 0 <= t < len(model.layers):
        raise ModelError(f"target layer {t} out of range (model has {len(model.layers)} layers)")
    if model.layers[t].kind not in COMPUTE_KINDS:
        raise ModelError(f"target layer {t} is {model.layers[t].kind}; must be conv or fc")
    cfg = plan.config
    if cfg.op_format != model.op_format:
        raise ModelError(f"array operand format {cfg.op_format} != model format {model.op_format}")
    if cfg.acc_format != model.acc_format:
        raise ModelError(f"array accumulator format {cfg.acc_format} != model format {model.acc_format}")


def _array_matmul(a: QuantTensor, b: QuantTensor, plan: ExecutionPlan) -> np.ndarray:
    """``a @ b`` on the array, honoring the operand-to-line assignment."""
    if plan.activations_on == "A":
        return tiled_matmul(a, b, plan.config, plan.faults).data
    at = a.with_data(np.ascontiguousarray(a.data.T))
    bt = b.with_data(np.ascontiguousarray(b.data.T))
    return tiled_matmul(bt, at, plan.config, plan.faults).data.T


def _compute_layer(model: NetworkModel, index: int, x: QuantTensor, on_array: ExecutionPlan | None) -> QuantTensor:
    layer = model.layers[index]
    acc_fmt = model.acc_format
    w = layer.weights
    if layer.kind == "conv":
        if on_array is not None:
            shape = model.conv_shape(index)
            prod = _array_matmul(lower_activation(x, shape), lower_weights(w), on_array)
            acc = lift(QuantTensor(prod, acc_fmt, 1.0), shape).data
        else:
            acc = conv_reference(x.data, w.data, layer.stride, layer.padding)
        bias = layer.bias.data[:, None, None] if layer.bias is not None else 0
    else:
        if on_array is not None:
            row = x.reshape(1, -1)
            wt = w.with_data(np.ascontiguousarray(w.data.T))
            acc = _array_matmul(row, wt, on_array)[0]
        else:
            acc = w.data @ x.data
        bias = layer.bias.data if layer.bias is not None else 0
    if acc_fmt.is_float:
        acc = (acc.astype(np.float32) + np.float32(bias)).astype(np.float32)
    else:
        acc = wrap(wrap(acc, acc_fmt.width) + bias, acc_fmt.width)
    words = requantize(acc, x.scale * w.scale, layer.out_scale, model.op_format)
    return QuantTensor(words, model.op_format, layer.out_scale)


def run_layer(model: NetworkModel, index: int, x: QuantTensor, plan: ExecutionPlan | None = None) -> QuantTensor:
    layer = model.layers[index]
    if layer.kind in COMPUTE_KINDS:
        on_array = plan if plan is not None and plan.target_layer == index else None
        return _compute_layer(model, index, x, on_array)
    if layer.kind == "relu":
        return x.with_data(np.maximum(x.data, 0))
    if layer.kind == "maxpool":
        win = sliding_window_view(x.data, (layer.pool, layer.pool), axis=(1, 2))
        win = win[:, :: layer.stride, :: layer.stride]
        return x.with_data(win.max(axis=(3, 4)))
    if layer.kind == "flatten":
        return x.reshape(-1)
    # softmax is applied on dequantized values by output_vector
    return x


def forward(
    model: NetworkModel,
    x: QuantTensor,
    plan: ExecutionPlan | None = None,
    start: int = 0,
    stop: int | None = None,
    collect: bool = False,
):
    """Run layers ``[start, stop)``; optionally return every intermediate activation."""
    stop = len(model.layers) if stop is None else stop
    if start == 0 and x.shape != model.input_shape:
        raise ModelError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if plan is not None:
        check_plan(model, plan)
    acts = []
    for idx in range(start, stop):
        x = run_layer(model, idx, x, plan)
        if collect:
            acts.append(x)
    return (x, acts) if collect else x


def output_vector(model: NetworkModel, final: QuantTensor) -> np.ndarray:
    values = final.dequantize().reshape(-1)
    if model.layers and model.layers[-1].kind == "softmax":
        return softmax(values)
    return values


def infer_reference(model: NetworkModel, x: QuantTensor) -> np.ndarray:
    return output_vector(model, forward(model, x))


def infer_hierarchical(model: NetworkModel, x: QuantTensor, plan: ExecutionPlan) -> np.ndarray:
    return output_vector(model, forward(model, x, plan))


# --- model files -------------------------------------------------------------

MANIFEST_FORMAT = "urefi-model"


def _tensor_ref(base: Path, ref: str, where: str) -> QuantTensor:
    path = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if not path.exists():
        raise ModelError(f"{where}: missing tensor file {path}")
    try:
        return load_tensor(path)
    except NumericsError as exc:
        raise ModelError(f"{where}: {exc}") from exc


def load_model(manifest_path) -> NetworkModel:
    """Load and validate a JSON manifest plus the tensor files it references."""
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ModelError(f"missing model manifest {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot parse model manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ModelError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    base = path.parent
    try:
        op_fmt = NumberFormat.from_dict(doc.get("op_format"))
        acc_fmt = NumberFormat.from_dict(doc.get("acc_format"), NumberFormat("int", 32))
        inp = doc["input"]
        layers = []
        for idx, spec in enumerate(doc["layers"]):
            kind = spec.get("kind")
            where = f"{path}: layer {idx}"
            if kind not in LAYER_KINDS:
                raise ModelError(f"{where}: unknown layer kind {kind!r}")
            layer = Layer(kind=kind, name=spec.get("name", f"{kind}{idx}"))
            if kind in COMPUTE_KINDS:
                layer.weights = _tensor_ref(base, spec["weights"], where)
                if spec.get("bias"):
                    layer.bias = _tensor_ref(base, spec["bias"], where)
                layer.out_scale = float(spec["out_scale"])
            if kind == "conv":
                layer.stride = int(spec.get("stride", 1))
                layer.padding = int(spec.get("padding", 0))
            if kind == "maxpool":
                layer.pool = int(spec.get("size", 2))
                layer.stride = int(spec.get("stride", layer.pool))
            layers.append(layer)
        return NetworkModel(
            doc.get("name", path.stem), tuple(inp["shape"]), float(inp["scale"]), op_fmt, acc_fmt, layers
        )
    except KeyError as exc:
        raise ModelError(f"{path}: missing field {exc}") from exc
    except NumericsError as exc:
        raise ModelError(f"{path}: {exc}") from exc


def save_model(model: NetworkModel, directory, manifest_name: str = "model.json") -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    for idx, layer in enumerate(model.layers):
        spec = {"kind": layer.kind, "name": layer.name or f"{layer.kind}{idx}"}
        if layer.kind in COMPUTE_KINDS:
            stem = spec["name"]
            save_tensor(out / f"{stem}.weights.bin", layer.weights)
            spec["weights"] = f"{stem}.weights.bin"
            if layer.bias is not None:
                save_tensor(out / f"{stem}.bias.bin", layer.bias)
                spec["bias"] = f"{stem}.bias.bin"
            spec["out_scale"] = layer.out_scale
        if layer.kind == "conv":
            spec.update(stride=layer.stride, padding=layer.padding)
        if layer.kind == "maxpool":
            spec.update(size=layer.pool, stride=layer.stride)
        layers.append(spec)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "name": model.name,
        "input": {"shape": list(model.input_shape), "scale": model.input_scale},
        "op_format": model.op_format.as_dict(),
        "acc_format": model.acc_format.as_dict(),
        "layers": layers,
    }
    path = out / manifest_name
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# --- inputs ------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST container), optionally gzip-compressed."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise ModelError(f"{path}: not an IDX file")
    dtype = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = math.prod(dims)
    off = 4 + 4 * ndim
    if len(raw) != off + count * dtype.itemsize:
        raise ModelError(f"{path}: IDX payload does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, offset=off).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tcode = next((k for k, v in _IDX_TYPES.items() if v.kind == arr.dtype.kind and v.itemsize == arr.dtype.itemsize), None)
    if tcode is None:
        raise ModelError(f"dtype {arr.dtype} not representable in IDX")
    header = bytes([0, 0, tcode, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_TYPES[tcode]).tobytes())


def quantize_input(model: NetworkModel, values: np.ndarray) -> QuantTensor:
    values = np.asarray(values, dtype=np.float64).reshape(model.input_shape)
    return quantize(values, model.op_format, model.input_scale)


def load_inputs(path, model: NetworkModel, count: int | None = None) -> list[tuple[str, QuantTensor]]:
    """Inputs from a directory of tensor files or an IDX image file.

    IDX ``uint8`` images are scaled to [0, 1] before quantization.
    """
    path = Path(path)
    items: list[tuple[str, QuantTensor]] = []
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".bin")
        for p in files[:count] if count is not None else files:
            t = load_tensor(p)
            if t.shape != model.input_shape:
                t = t.reshape(model.input_shape)
            if np.float32(t.scale) == np.float32(model.input_scale):
                # files hold a float32 scale; keep the model's exact value
                t = QuantTensor(t.data, t.format, model.input_scale)
            items.append((p.stem, t))
    elif path.exists():
        arr = read_idx(path)
        if count is not None:
            arr = arr[:count]
        scale = 255.0 if arr.dtype == np.uint8 else 1.0
        for i, img in enumerate(arr):
            items.append((str(i), quantize_input(model, img / scale)))
    else:
        raise ModelError(f"missing input set {path}")
    return items

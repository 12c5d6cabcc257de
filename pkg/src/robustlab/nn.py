"""Layer stack, pooling variants (including drop-max), and checkpointing.

Drop-max pooling forwards each window's second-largest element instead of
its maximum, which keeps a perturbed maximum from propagating downstream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigurationError, ContractViolation, DimensionError
from .tensor import Tensor, add, conv2d, matmul, mean_, relu, reshape, take_flat

_POOL_KINDS = ("maxpool", "dropmax")
_VALID_KINDS = ("conv", "relu", "maxpool", "dropmax", "globalavgpool", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None
    units: Optional[int] = None

    def __post_init__(self):
        if self.kind not in _VALID_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")


def conv(channels: int, kernel: int = 3, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding)


def relu_layer() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(kernel: int = 2, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride if stride is not None else kernel)


def dropmax(kernel: int = 2, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec("dropmax", kernel=kernel, stride=stride if stride is not None else kernel)


def globalavgpool() -> LayerSpec:
    return LayerSpec("globalavgpool")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def default_classifier_spec(pooling: str = "maxpool", classes: int = 2) -> list[LayerSpec]:
    """Small three-conv classifier; the first pooling layer is switchable."""
    if pooling not in _POOL_KINDS:
        raise ConfigurationError(f"pooling must be one of {_POOL_KINDS}, got {pooling!r}")
    first_pool = dropmax(2, 2) if pooling == "dropmax" else maxpool(2, 2)
    return [
        conv(16, kernel=3, padding=1), relu_layer(), first_pool,
        conv(32, kernel=3, padding=1), relu_layer(), maxpool(2, 2),
        conv(64, kernel=3, padding=1), relu_layer(),
        globalavgpool(), dense(classes),
    ]


def encoder_spec(pooling: str = "maxpool") -> list[LayerSpec]:
    """Backbone of the default classifier (everything before the dense head)."""
    return default_classifier_spec(pooling)[:-1]


# ---------------------------------------------------------------------------
# pooling operations
# ---------------------------------------------------------------------------

@lru_cache(maxsize=128)
def _pool_window_index(n, c, h, w, kh, kw, sh, sw):
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    ni, ci, ohi, owi = np.ix_(np.arange(n), np.arange(c),
                              np.arange(ho) * sh, np.arange(wo) * sw)
    base = ((ni * c + ci) * h + ohi) * w + owi          # window top-left, flat
    offsets = (np.arange(kh)[:, None] * w + np.arange(kw)[None, :]).reshape(-1)
    full = base[..., None] + offsets                    # every window element
    base.setflags(write=False)
    offsets.setflags(write=False)
    full.setflags(write=False)
    return base, offsets, full


def _normalize_window(k) -> tuple[int, int]:
    if isinstance(k, int):
        return k, k
    kh, kw = k
    return int(kh), int(kw)


def _pool_select(x: Tensor, k, stride, rank: int) -> Tensor:
    kh, kw = _normalize_window(k)
    sh = sw = int(stride)
    if x.ndim != 4:
        raise DimensionError(f"pooling expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"pooling window {kh}x{kw} larger than input {h}x{w}")
    base, offsets, full = _pool_window_index(n, c, h, w, kh, kw, sh, sw)
    windows = x.data.reshape(-1)[full]                        # (N,C,Ho,Wo,kh*kw)
    if rank == 0:
        sel = np.argmax(windows, axis=-1)                     # first occurrence on ties
    else:
        # stable sort of negated values == descending by value, then by position
        sel = np.argsort(-windows, axis=-1, kind="stable")[..., rank]
    flat = base + offsets[sel]
    unique = sh >= kh and sw >= kw  # non-overlapping windows never share positions
    return take_flat(x, flat, base.shape, scatter_unique=unique)


def maxpool2d(x: Tensor, k, stride: int) -> Tensor:
    """Per-window maximum; gradient routes to the (first) argmax position."""
    return _pool_select(x, k, stride, rank=0)


def dropmax2d(x: Tensor, k, stride: int) -> Tensor:
    """Per-window second-largest element under value-then-position ordering.

    A duplicated maximum yields the duplicate's value (rank-2 of the total
    order), and the gradient routes entirely to the selected position.
    """
    kh, kw = _normalize_window(k)
    if kh * kw < 2:
        raise ContractViolation("drop-max needs windows with at least 2 elements")
    return _pool_select(x, k, stride, rank=1)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global average pool expects NCHW input, got {x.shape}")
    return mean_(x, axis=(2, 3))


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"dense expects 2-d input, got shape {x.shape}")
    return add(matmul(x, weight), reshape(bias, (1, bias.size)))


# ---------------------------------------------------------------------------
# model construction and forward
# ---------------------------------------------------------------------------

class Model:
    """Ordered layer stack with named parameters.

    Parameter names follow ``<layername>.weight`` / ``<layername>.bias`` where
    layer names are per-kind counters (conv1, pool1, dense1, ...). Pooling
    layers share the ``pool`` prefix regardless of variant so matched
    max-pool/drop-max models expose the same activation names.
    """

    def __init__(self, layers, params, layer_names, input_shape, dtype, metadata):
        self.layers = list(layers)
        self.params = params
        self.layer_names = list(layer_names)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.metadata = dict(metadata)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True


def _layer_names(layers) -> list[str]:
    counters: dict[str, int] = {}
    names = []
    for spec in layers:
        prefix = "pool" if spec.kind in _POOL_KINDS else \
            ("gap" if spec.kind == "globalavgpool" else spec.kind)
        counters[prefix] = counters.get(prefix, 0) + 1
        names.append(f"{prefix}{counters[prefix]}")
    return names


def _walk_shapes(layers, input_shape):
    """Yield (index, spec, in_shape, out_shape); raises on non-composing specs."""
    shape = tuple(input_shape)  # (C, H, W) or (D,) once flattened
    out = []
    for i, spec in enumerate(layers):
        if spec.kind == "conv":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: conv needs CHW input, has {shape}")
            c, h, w = shape
            k, s, p = spec.kernel, spec.stride, spec.padding
            if k > h + 2 * p or k > w + 2 * p:
                raise ConfigurationError(
                    f"layer {i}: conv kernel {k} exceeds padded input {h + 2 * p}x{w + 2 * p}")
            new = (spec.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif spec.kind == "relu":
            new = shape
        elif spec.kind in _POOL_KINDS:
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: pooling needs CHW input, has {shape}")
            c, h, w = shape
            k, s = spec.kernel, spec.stride
            if k > h or k > w:
                raise ConfigurationError(f"layer {i}: pooling window {k} exceeds input {h}x{w}")
            new = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif spec.kind == "globalavgpool":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: global pool needs CHW input, has {shape}")
            new = (shape[0],)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(
                    f"layer {i}: dense needs flat input (insert globalavgpool), has {shape}")
            new = (spec.units,)
        else:  # pragma: no cover - guarded by LayerSpec
            raise ConfigurationError(f"layer {i}: unknown kind {spec.kind}")
        out.append((i, spec, shape, new))
        shape = new
    return out


def _check_dropmax_position(layers):
    pool_positions = [i for i, s in enumerate(layers) if s.kind in _POOL_KINDS]
    drop_positions = [i for i, s in enumerate(layers) if s.kind == "dropmax"]
    if len(drop_positions) > 1:
        raise ConfigurationError(
            f"at most one dropmax layer allowed, found at indices {drop_positions}")
    if drop_positions and drop_positions[0] != pool_positions[0]:
        raise ConfigurationError(
            f"dropmax at layer {drop_positions[0]} must occupy the first pooling "
            f"position (layer {pool_positions[0]})")


def spec_hash(layers, input_shape, dtype) -> str:
    blob = json.dumps({
        "layers": [asdict(s) for s in layers],
        "input_shape": list(input_shape),
        "dtype": str(np.dtype(dtype)),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(layers, seed: int, input_shape=(1, 32, 32), dtype=np.float64,
                metadata: Optional[dict] = None) -> Model:
    """Deterministic He-style initialization (fan-in scaled normals, zero biases)."""
    layers = list(layers)
    _check_dropmax_position(layers)
    walk = _walk_shapes(layers, input_shape)
    names = _layer_names(layers)
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)

    params: dict[str, Tensor] = {}
    for (i, spec, in_shape, _), name in zip(walk, names):
        if spec.kind == "conv":
            c_in = in_shape[0]
            fan_in = c_in * spec.kernel * spec.kernel
            w = rng.standard_normal((spec.channels, c_in, spec.kernel, spec.kernel))
            w *= np.sqrt(2.0 / fan_in)
            params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(spec.channels, dtype=dtype),
                                            requires_grad=True)
        elif spec.kind == "dense":
            fan_in = in_shape[0]
            w = rng.standard_normal((fan_in, spec.units)) * np.sqrt(2.0 / fan_in)
            params[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(spec.units, dtype=dtype),
                                            requires_grad=True)

    meta = {"seed": seed, "config_hash": spec_hash(layers, input_shape, dtype),
            "provenance": "scratch"}
    if metadata:
        meta.update(metadata)
    return Model(layers, params, names, input_shape, dtype, meta)


def forward(model: Model, batch: Tensor, capture: Optional[list[str]] = None):
    """Run the stack; differentiable w.r.t. both batch and parameters.

    With ``capture`` given, returns ``(logits, {layer_name: activation})``.
    """
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=model.dtype))
    expected = (batch.shape[0],) + model.input_shape
    if batch.shape != expected:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input {expected}")
    captured: dict[str, Tensor] = {}
    x = batch
    for spec, name in zip(model.layers, model.layer_names):
        if spec.kind == "conv":
            x = conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"],
                       stride=spec.stride, padding=spec.padding)
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "maxpool":
            x = maxpool2d(x, spec.kernel, spec.stride)
        elif spec.kind == "dropmax":
            x = dropmax2d(x, spec.kernel, spec.stride)
        elif spec.kind == "globalavgpool":
            x = global_avg_pool(x)
        elif spec.kind == "dense":
            x = dense_forward(x, model.params[f"{name}.weight"],
                              model.params[f"{name}.bias"])
        if capture is not None and name in capture:
            captured[name] = x
    if capture is not None:
        unknown = set(capture) - set(model.layer_names)
        if unknown:
            raise ConfigurationError(f"unknown layer name(s) {sorted(unknown)}; "
                                     f"model has {model.layer_names}")
        return x, captured
    return x


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "robustlab-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Plain-text JSON header plus raw little-endian parameter blocks."""
    header = {
        "magic": _CKPT_MAGIC,
        "format_version": _CKPT_VERSION,
        "endianness": "little",
        "dtype": str(model.dtype),
        "input_shape": list(model.input_shape),
        "layers": [asdict(s) for s in model.layers],
        "layer_names": model.layer_names,
        "metadata": model.metadata,
        "params": [{"name": n, "shape": list(model.params[n].shape)}
                   for n in model.params],
    }
    le_dtype = np.dtype(model.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in header["params"]:
            fh.write(np.ascontiguousarray(model.params[n["name"]].data,
                                          dtype=le_dtype).tobytes())


def load_checkpoint(path, expect_layers: Optional[list[LayerSpec]] = None) -> Model:
    """Inverse of :func:`save_checkpoint`; raises on any structural damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("magic") != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if header.get("format_version") != _CKPT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}")

    dtype = np.dtype(header["dtype"])
    le_dtype = dtype.newbyteorder("<")
    body = blob[newline + 1:]
    expected = sum(int(np.prod(p["shape"])) for p in header["params"]) * dtype.itemsize
    if len(body) != expected:
        raise CheckpointError(
            f"{path}: parameter block is {len(body)} bytes, expected {expected} "
            f"(truncated or corrupt)")

    layers = [LayerSpec(**s) for s in header["layers"]]
    if expect_layers is not None and layers != list(expect_layers):
        raise ConfigurationError(
            f"{path}: checkpoint layer stack does not match the requested spec")

    params: dict[str, Tensor] = {}
    offset = 0
    for p in header["params"]:
        count = int(np.prod(p["shape"]))
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(body[offset:offset + nbytes], dtype=le_dtype)
        arr = arr.astype(dtype).reshape(p["shape"])
        params[p["name"]] = Tensor(arr.copy(), requires_grad=True)
        offset += nbytes

    model = Model(layers, params, header["layer_names"], header["input_shape"],
                  dtype, header["metadata"])
    _check_dropmax_position(model.layers)
    return model

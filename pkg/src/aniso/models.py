"""Architecture zoo: linear probe, MLP, LeNet-style CNN and a small residual CNN.

Parameters live in one flat array (:class:`ParamVector`); each layer's weight
and bias are reshaped views into it, in the order given by :func:`layout`.
All networks end in a single scalar logit.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .seeding import rng as derive_rng

FAMILIES = ("linear", "mlp", "lenet", "miniresnet")

MLP_S3 = (100, 20)
MLP_S4 = (200, 50)


class IncompatibleShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    input_shape: tuple[int, int, int]
    hidden: tuple[int, ...] = ()
    conv_channels: tuple[int, int] = (6, 16)
    kernel: int = 5
    dense: tuple[int, ...] = (120, 84)
    stem: int = 16
    stages: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        for name in ("hidden", "conv_channels", "dense", "stages"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be three positive ints, got {self.input_shape}")
        widths = self.hidden + self.conv_channels + self.dense + self.stages + (self.stem, self.kernel, self.blocks_per_stage)
        if any(w < 1 for w in widths):
            raise ValueError("all widths, channel counts and block counts must be positive")
        if self.family == "lenet" and len(self.conv_channels) != 2:
            raise ValueError("lenet takes exactly two conv channel counts")
        if self.family == "miniresnet" and not self.stages:
            raise ValueError("miniresnet needs at least one stage")

    @classmethod
    def linear(cls, input_shape) -> ModelSpec:
        return cls("linear", tuple(input_shape))

    @classmethod
    def mlp(cls, input_shape, hidden=MLP_S3) -> ModelSpec:
        return cls("mlp", tuple(input_shape), hidden=tuple(hidden))

    @classmethod
    def lenet(cls, input_shape, conv_channels=(6, 16), dense=(120, 84)) -> ModelSpec:
        return cls("lenet", tuple(input_shape), conv_channels=tuple(conv_channels), dense=tuple(dense))

    @classmethod
    def miniresnet(cls, input_shape, stages=(16, 32, 64), blocks_per_stage=1, stem=16) -> ModelSpec:
        return cls("miniresnet", tuple(input_shape), stages=tuple(stages),
                   blocks_per_stage=blocks_per_stage, stem=stem)

    def canonical(self) -> dict:
        """Only the fields that matter for the family, so unused defaults don't perturb the hash."""
        d = {"family": self.family, "input_shape": list(self.input_shape)}
        if self.family == "mlp":
            d["hidden"] = list(self.hidden)
        elif self.family == "lenet":
            d.update(conv_channels=list(self.conv_channels), kernel=self.kernel, dense=list(self.dense))
        elif self.family == "miniresnet":
            d.update(stem=self.stem, stages=list(self.stages), blocks_per_stage=self.blocks_per_stage)
        return d

    @property
    def hash(self) -> str:
        return _spec_hash(self)

    def with_channels(self, channels: int) -> ModelSpec:
        _, h, w = self.input_shape
        return replace(self, input_shape=(channels, h, w))

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w


@functools.lru_cache(maxsize=256)
def _spec_hash(spec: ModelSpec) -> str:
    blob = json.dumps(spec.canonical(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple[int, ...]
    fan_in: int
    final: bool = False

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class InitScheme:
    seed: int = 0
    kind: str = "fan_in_normal"
    relu_gain: float = math.sqrt(2.0)
    final_gain: float = 1.0

    def __post_init__(self):
        if self.kind != "fan_in_normal":
            raise ValueError(f"unsupported init kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class ParamVector:
    data: np.ndarray
    layout: tuple[Slot, ...]
    spec_hash: str = ""

    def __len__(self) -> int:
        return int(self.data.size)

    def tensors(self) -> dict[str, np.ndarray]:
        return {s.name: self.data[s.offset:s.offset + s.size].reshape(s.shape) for s in self.layout}

    def astype(self, dtype) -> ParamVector:
        return replace(self, data=np.asarray(self.data, dtype=dtype))

    def with_data(self, data: np.ndarray) -> ParamVector:
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ValueError(f"parameter data of shape {data.shape} does not match layout ({self.data.size},)")
        return replace(self, data=data)

    def tobytes(self) -> bytes:
        return np.asarray(self.data, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# layout


def _lenet_dims(spec: ModelSpec) -> tuple[int, int]:
    _, h, w = spec.input_shape
    k = spec.kernel
    for stage in range(2):
        if h < k or w < k:
            raise IncompatibleShapeError(
                f"lenet: spatial size {h}x{w} before conv {stage + 1} is smaller than the {k}x{k} kernel "
                f"(input {spec.input_shape})")
        h, w = (h - k + 1) // 2, (w - k + 1) // 2
        if h < 1 or w < 1:
            raise IncompatibleShapeError(f"lenet: pooling after conv {stage + 1} leaves no spatial extent (input {spec.input_shape})")
    return h, w


@functools.lru_cache(maxsize=256)
def layout(spec: ModelSpec) -> tuple[Slot, ...]:
    """Ordered parameter slots for ``spec``; raises on inputs the stack cannot process."""
    shapes: list[tuple[str, tuple[int, ...], int, bool]] = []

    def dense_layer(name: str, n_in: int, n_out: int, final: bool = False):
        shapes.append((f"{name}.w", (n_out, n_in), n_in, final))
        shapes.append((f"{name}.b", (n_out,), n_in, final))

    def conv_layer(name: str, c_in: int, c_out: int, k: int):
        shapes.append((f"{name}.w", (c_out, c_in, k, k), c_in * k * k, False))
        shapes.append((f"{name}.b", (c_out,), c_in * k * k, False))

    c, h, w = spec.input_shape
    if spec.family == "linear":
        dense_layer("head", spec.input_dim, 1, final=True)
    elif spec.family == "mlp":
        n_in = spec.input_dim
        for i, width in enumerate(spec.hidden):
            dense_layer(f"fc{i}", n_in, width)
            n_in = width
        dense_layer("head", n_in, 1, final=True)
    elif spec.family == "lenet":
        h2, w2 = _lenet_dims(spec)
        c1, c2 = spec.conv_channels
        conv_layer("conv0", c, c1, spec.kernel)
        conv_layer("conv1", c1, c2, spec.kernel)
        n_in = c2 * h2 * w2
        for i, width in enumerate(spec.dense):
            dense_layer(f"fc{i}", n_in, width)
            n_in = width
        dense_layer("head", n_in, 1, final=True)
    else:
        conv_layer("stem", c, spec.stem, 3)
        c_in = spec.stem
        for s, width in enumerate(spec.stages):
            for blk in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and blk == 0) else 1
                name = f"s{s}b{blk}"
                conv_layer(f"{name}.conv0", c_in, width, 3)
                conv_layer(f"{name}.conv1", width, width, 3)
                if stride != 1 or c_in != width:
                    conv_layer(f"{name}.skip", c_in, width, 1)
                c_in = width
        dense_layer("head", c_in, 1, final=True)

    slots, offset = [], 0
    for name, shape, fan_in, final in shapes:
        slot = Slot(name, offset, shape, fan_in, final)
        slots.append(slot)
        offset += slot.size
    return tuple(slots)


def param_count(spec: ModelSpec) -> int:
    return sum(s.size for s in layout(spec))


def build(spec: ModelSpec, init: InitScheme | None = None, dtype=np.float32) -> ParamVector:
    """Fan-in-scaled normal weights, zero biases; a pure function of (spec, init)."""
    init = init or InitScheme()
    slots = layout(spec)
    gen = derive_rng(init.seed, "init:" + spec.hash)
    data = np.zeros(sum(s.size for s in slots), dtype=np.float64)
    for s in slots:
        if s.name.endswith(".w"):
            gain = init.final_gain if s.final else init.relu_gain
            data[s.offset:s.offset + s.size] = gen.standard_normal(s.size) * (gain / math.sqrt(s.fan_in))
    return ParamVector(data.astype(dtype), slots, spec.hash)


def zeros(spec: ModelSpec, dtype=np.float32) -> ParamVector:
    slots = layout(spec)
    return ParamVector(np.zeros(sum(s.size for s in slots), dtype=dtype), slots, spec.hash)


# ---------------------------------------------------------------------------
# forward


def _check_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.spec_hash and params.spec_hash != spec.hash:
        raise ValueError("parameter vector was built for a different model spec")
    expected = param_count(spec)
    if len(params) != expected:
        raise ValueError(f"parameter vector has {len(params)} entries, spec needs {expected}")


def apply(spec: ModelSpec, leaves: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    """Record the forward pass for ``x`` (N, C, H, W); returns logits of shape (N,)."""
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ad.ShapeError("predict", f"input shape {x.shape[1:]} != model input shape {spec.input_shape}")
    p = leaves
    if spec.family == "linear":
        h = ad.dense(ad.flatten(x), p["head.w"], p["head.b"])
    elif spec.family == "mlp":
        h = ad.flatten(x)
        for i in range(len(spec.hidden)):
            h = ad.relu(ad.dense(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        h = ad.dense(h, p["head.w"], p["head.b"])
    elif spec.family == "lenet":
        h = ad.maxpool2d(ad.relu(ad.conv2d(x, p["conv0.w"], p["conv0.b"])))
        h = ad.maxpool2d(ad.relu(ad.conv2d(h, p["conv1.w"], p["conv1.b"])))
        h = ad.flatten(h)
        for i in range(len(spec.dense)):
            h = ad.relu(ad.dense(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        h = ad.dense(h, p["head.w"], p["head.b"])
    else:
        h = ad.relu(ad.conv2d(x, p["stem.w"], p["stem.b"], padding=1))
        for s in range(len(spec.stages)):
            for blk in range(spec.blocks_per_stage):
                stride = 2 if (s > 0 and blk == 0) else 1
                name = f"s{s}b{blk}"
                r = ad.relu(ad.conv2d(h, p[f"{name}.conv0.w"], p[f"{name}.conv0.b"], stride=stride, padding=1))
                r = ad.conv2d(r, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1)
                if f"{name}.skip.w" in p:
                    skip = ad.conv2d(h, p[f"{name}.skip.w"], p[f"{name}.skip.b"], stride=stride)
                else:
                    skip = h
                h = ad.relu(ad.add(r, skip))
        h = ad.dense(ad.global_avgpool(h), p["head.w"], p["head.b"])
    return ad.reshape(h, (h.shape[0],))


def record(spec: ModelSpec, params: ParamVector, x, graph: ad.Graph | None = None,
           input_grad: bool = False, param_grad: bool = True):
    """Build a graph for a batch; returns (graph, input leaf, ordered param leaves, logits)."""
    _check_params(spec, params)
    graph = graph or ad.Graph()
    dtype = params.data.dtype
    xt = graph.leaf(np.asarray(x, dtype=dtype), requires_grad=input_grad)
    leaves = {name: graph.leaf(arr, requires_grad=param_grad) for name, arr in params.tensors().items()}
    logits = apply(spec, leaves, xt)
    return graph, xt, [leaves[s.name] for s in params.layout], logits


def _as_batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ad.ShapeError("predict", f"input shape {x.shape} does not match model input {spec.input_shape}")
    return x, False


def predict(spec: ModelSpec, params: ParamVector, x, batch_size: int = 1024):
    """Logits for a sample (C, H, W) -> float, or a batch (N, C, H, W) -> (N,)."""
    xb, single = _as_batch(spec, x)
    out = []
    for lo in range(0, xb.shape[0], batch_size):
        _, _, _, logits = record(spec, params, xb[lo:lo + batch_size], param_grad=False)
        out.append(logits.data)
    logits = np.concatenate(out) if out else np.zeros(0, dtype=params.data.dtype)
    return float(logits[0]) if single else logits


def classify(logits) -> np.ndarray:
    """sign(logit) with sign(0) = +1."""
    return np.where(np.asarray(logits) >= 0, 1, -1).astype(np.int8)


def gradients(spec: ModelSpec, params: ParamVector, x, labels=None) -> tuple[float, ad.GradientBundle]:
    """Value and gradients for a batch.

    With ``labels`` the objective is the mean logistic loss; without, it is the
    sum of logits, whose input gradient holds each sample's own ∇x f.
    """
    xb, single = _as_batch(spec, x)
    graph, xt, leaves, logits = record(spec, params, xb, input_grad=True)
    out = ad.logistic_loss(logits, labels) if labels is not None else ad.total(logits)
    bundle = ad.backward(graph, out, xt, leaves)
    if single:
        bundle.input_grad = bundle.input_grad[0]
    return float(out.data), bundle


def input_gradients(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Per-sample ∇x f for a batch, shape (N, C, H, W)."""
    xb, _ = _as_batch(spec, x)
    graph, xt, _, logits = record(spec, params, xb, input_grad=True, param_grad=False)
    graph.backward(ad.total(logits))
    return xt.grad


# ---------------------------------------------------------------------------
# serialization

_PARAM_MAGIC = b"ANISOPRM"
_PARAM_VERSION = 1
_PARAM_HEADER = struct.Struct("<8sI32sQ")


def save_params(path, spec: ModelSpec, params: ParamVector) -> None:
    _check_params(spec, params)
    header = _PARAM_HEADER.pack(_PARAM_MAGIC, _PARAM_VERSION, bytes.fromhex(spec.hash), len(params))
    Path(path).write_bytes(header + params.tobytes())


def load_params(path, spec: ModelSpec) -> ParamVector:
    blob = Path(path).read_bytes()
    if len(blob) < _PARAM_HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, spec_hash, count = _PARAM_HEADER.unpack_from(blob)
    if magic != _PARAM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _PARAM_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if spec_hash.hex() != spec.hash:
        raise ValueError(f"{path}: parameters were saved for a different model spec")
    body = blob[_PARAM_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {count} floats, found {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    slots = layout(spec)
    if count != sum(s.size for s in slots):
        raise ValueError(f"{path}: parameter count {count} does not match spec")
    return ParamVector(data, slots, spec.hash)


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["input_shape"] = tuple(d["input_shape"])
    return ModelSpec(**d)


def spec_to_dict(spec: ModelSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}


__all__ = [
    "FAMILIES", "MLP_S3", "MLP_S4", "IncompatibleShapeError", "ModelSpec", "Slot", "InitScheme",
    "ParamVector", "layout", "param_count", "build", "zeros", "apply", "record", "predict",
    "classify", "gradients", "input_gradients", "save_params", "load_params",
    "spec_from_dict", "spec_to_dict",
]

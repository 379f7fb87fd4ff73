"""Dense tensors on top of numpy with a tape-based reverse-mode autodiff.

Every op appends a node to its :class:`Graph`; because nodes are recorded in
creation order the tape is already topologically sorted, so ``backward`` is a
single reverse sweep. Ops keep the dtype of their inputs: float32 for
training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Tensor",
    "GradientBundle",
    "ShapeError",
    "NonFiniteError",
    "OP_KINDS",
    "forward",
    "backward",
    "dense",
    "conv2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "global_avgpool",
    "concat",
    "flatten",
    "reshape",
    "add",
    "scale",
    "weighted_sum",
    "total",
    "logistic_loss",
]


class ShapeError(ValueError):
    """Input shapes do not conform to an op."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "graph", "op", "inputs", "index", "requires_grad", "_backward")

    def __init__(self, data: np.ndarray, graph: Graph, op: str = "leaf",
                 inputs: tuple[Tensor, ...] = (), requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad or any(t.requires_grad for t in inputs)
        self._backward: Callable[[np.ndarray], None] | None = None
        self.index = graph._append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype})"


class Graph:
    """Operation tape. Nodes are stored in the order they were created."""

    def __init__(self, checked: bool = False):
        self.nodes: list[Tensor] = []
        self.checked = checked

    def _append(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def leaf(self, data, requires_grad: bool = True, dtype=None) -> Tensor:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        if self.checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf: non-finite values in input")
        return Tensor(arr, self, requires_grad=requires_grad)

    def constant(self, data, dtype=None) -> Tensor:
        return self.leaf(data, requires_grad=False, dtype=dtype)

    def backward(self, output: Tensor) -> None:
        """Fill ``.grad`` on every tensor that feeds ``output``."""
        if output.graph is not self:
            raise ValueError("output tensor belongs to a different graph")
        if output.data.size != 1:
            raise ShapeError("backward", f"output must be scalar, got shape {output.shape}")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes[: output.index + 1]):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


@dataclass
class GradientBundle:
    input_grad: np.ndarray
    param_grads: np.ndarray


def backward(graph: Graph, output: Tensor, input: Tensor,
             params: Sequence[Tensor] = ()) -> GradientBundle:
    """Run the reverse sweep and collect gradients for ``input`` and ``params``.

    Parameter gradients are flattened and concatenated in the order given, so
    passing a model's leaves in layout order yields a vector aligned with its
    ParamVector.
    """
    graph.backward(output)

    def _grad(t: Tensor) -> np.ndarray:
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    flat = [_grad(p).ravel() for p in params]
    param_grads = np.concatenate(flat) if flat else np.zeros(0, dtype=output.dtype)
    return GradientBundle(input_grad=_grad(input), param_grads=param_grads)


def _node(graph: Graph, data: np.ndarray, op: str, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    if graph.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data, graph, op=op, inputs=inputs)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _check_inputs(op: str, *ts: Tensor) -> Graph:
    graph = ts[0].graph
    for t in ts[1:]:
        if t.graph is not graph:
            raise ValueError(f"{op}: inputs live on different graphs")
    if graph.checked:
        for t in ts:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")
    return graph


# ---------------------------------------------------------------------------
# ops


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w.T + b`` with ``w`` laid out as (out, in)."""
    g = _check_inputs("dense", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("dense", f"expected x (N, in), w (out, in), b (out,), got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("dense", f"input features {x.shape[1]} != weight in-features {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError("dense", f"bias length {b.shape[0]} != weight out-features {w.shape[0]}")
    out_data = x.data @ w.data.T + b.data

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad @ w.data)
        w._accumulate(grad.T @ x.data)
        b._accumulate(grad.sum(axis=0))

    return _node(g, out_data, "dense", (x, w, b), _bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, k, k)."""
    g = _check_inputs("conv2d", x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, kc, kh, kw = w.shape
    if kc != c:
        raise ShapeError("conv2d", f"input channels {c} != kernel input channels {kc}")
    if b.shape != (f,):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", f"invalid stride {stride} / padding {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    out_data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]

    def _bw(grad: np.ndarray) -> None:
        b._accumulate(grad.sum(axis=(0, 2, 3)))
        w._accumulate(np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
        if not x.requires_grad:
            return
        dcols = np.tensordot(grad, w.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        dxp = np.zeros(xp.shape, dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
        x._accumulate(dxp)

    return _node(g, out_data, "conv2d", (x, w, b), _bw)


def relu(x: Tensor) -> Tensor:
    g = _check_inputs("relu", x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0).astype(x.data.dtype)

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad * mask)

    return _node(g, out_data, "relu", (x,), _bw)


def _pool_view(op: str, x: Tensor, k: int) -> tuple[np.ndarray, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(op, f"expected (N, C, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(op, f"spatial size {h}x{w} smaller than pool window {k}")
    n, c = x.shape[:2]
    cropped = x.data[:, :, : ho * k, : wo * k]
    blocks = cropped.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    return blocks, ho, wo


def _unpool(grad_blocks: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    n, c, ho, wo, _ = grad_blocks.shape
    full = np.zeros(shape, dtype=grad_blocks.dtype)
    full[:, :, : ho * k, : wo * k] = (
        grad_blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    )
    return full


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """
    g = _check_inputs("maxpool2d", x)
    blocks, ho, wo = _pool_view("maxpool2d", x, k)
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _bw(grad: np.ndarray) -> None:
        gb = np.zeros(blocks.shape, dtype=grad.dtype)
        np.put_along_axis(gb, arg[..., None], grad[..., None], axis=-1)
        x._accumulate(_unpool(gb, x.shape, k))

    return _node(g, out_data, "maxpool2d", (x,), _bw)


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    g = _check_inputs("avgpool2d", x)
    blocks, ho, wo = _pool_view("avgpool2d", x, k)
    out_data = blocks.mean(axis=-1)

    def _bw(grad: np.ndarray) -> None:
        gb = np.broadcast_to((grad / (k * k))[..., None], blocks.shape)
        x._accumulate(_unpool(np.ascontiguousarray(gb), x.shape, k))

    return _node(g, out_data, "avgpool2d", (x,), _bw)


def global_avgpool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    g = _check_inputs("global_avgpool", x)
    if x.data.ndim != 4:
        raise ShapeError("global_avgpool", f"expected (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out_data = x.data.mean(axis=(2, 3))

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(np.broadcast_to((grad / hw)[:, :, None, None], x.shape))

    return _node(g, out_data, "global_avgpool", (x,), _bw)


def concat(*xs: Tensor, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    g = _check_inputs("concat", *xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ outside axis {axis}")
    out_data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def _bw(grad: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            t._accumulate(np.take(grad, np.arange(lo, hi), axis=axis))

    return _node(g, out_data, "concat", xs, _bw)


def flatten(x: Tensor) -> Tensor:
    g = _check_inputs("flatten", x)
    out_data = x.data.reshape(x.shape[0], -1)

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad.reshape(x.shape))

    return _node(g, out_data, "flatten", (x,), _bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    g = _check_inputs("reshape", x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad.reshape(x.shape))

    return _node(g, out_data, "reshape", (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _check_inputs("add", a, b)
    if a.shape != b.shape:
        raise ShapeError("add", f"operand shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def _bw(grad: np.ndarray) -> None:
        a._accumulate(grad)
        b._accumulate(grad)

    return _node(g, out_data, "add", (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    g = _check_inputs("scale", x)
    out_data = x.data * x.data.dtype.type(c)

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad * c)

    return _node(g, out_data, "scale", (x,), _bw)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant array of x's shape."""
    g = _check_inputs("weighted_sum", x)
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.shape:
        raise ShapeError("weighted_sum", f"weights shape {weights.shape} != input shape {x.shape}")
    out_data = np.asarray(np.sum(x.data * weights), dtype=x.data.dtype)

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(grad * weights)

    return _node(g, out_data, "weighted_sum", (x,), _bw)


def total(x: Tensor) -> Tensor:
    g = _check_inputs("total", x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _bw(grad: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(grad, x.shape))

    return _node(g, out_data, "total", (x,), _bw)


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + exp(z)) without overflow
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def logistic_loss(logits: Tensor, labels) -> Tensor:
    """Mean of ``log(1 + exp(-y * logit))`` over the batch; labels are +-1.

    A scalar logit is treated as a batch of one.
    """
    g = _check_inputs("logistic_loss", logits)
    z = logits.data.reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if y.shape != z.shape:
        raise ShapeError("logistic_loss", f"{z.size} logits but {y.size} labels")
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("logistic_loss: labels must be -1 or +1")
    y = y.astype(z.dtype)
    m = -y * z
    out_data = np.asarray(_softplus(m).mean(), dtype=z.dtype)

    def _bw(grad: np.ndarray) -> None:
        dz = -y * _sigmoid(m) * (grad / z.size)
        logits._accumulate(dz.reshape(logits.shape).astype(z.dtype))

    return _node(g, out_data, "logistic_loss", (logits,), _bw)


OP_KINDS: dict[str, Callable[..., Tensor]] = {
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "global_avgpool": global_avgpool,
    "concat": concat,
    "flatten": flatten,
    "add": add,
    "logistic_loss": logistic_loss,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name; the result is recorded on the inputs' graph."""
    try:
        fn = OP_KINDS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}; expected one of {sorted(OP_KINDS)}") from None
    return fn(*inputs, **kwargs)

"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward rule on the output
tensor. :func:`backward` walks the resulting graph once, in reverse topological
order, and accumulates gradients into leaf tensors.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


# names recorded on graph nodes by the differentiable primitives below
OPS = (
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt", "relu", "clamp_min", "sum", "mean",
    "reshape", "transpose", "getitem", "concat", "matmul", "softmax", "conv2d", "avg_pool2d", "batch_norm",
)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional float array that can take part in gradient recording."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        # float arrays keep their precision; lists, scalars and ints default to float32
        keep = isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(arr.dtype, np.floating)
        if dtype is None and not keep:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _maybe(t: Tensor, fn: Callable[[], np.ndarray]) -> np.ndarray | None:
    return fn() if t.requires_grad else None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _maybe(a, lambda: unbroadcast(g, a.shape)), _maybe(b, lambda: unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _maybe(a, lambda: unbroadcast(g, a.shape)), _maybe(b, lambda: unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (
            _maybe(a, lambda: unbroadcast(g * b.data, a.shape)),
            _maybe(b, lambda: unbroadcast(g * a.data, b.shape)),
        )

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _maybe(a, lambda: unbroadcast(g / b.data, a.shape)),
            _maybe(b, lambda: unbroadcast(-g * out / b.data, b.shape)),
        )

    return _result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    x = a.data

    def bw(g):
        return (g * exponent * x ** (exponent - 1),)

    return _result(x ** a.dtype.type(exponent), (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient flows only where ``a`` exceeds the floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, a.dtype.type(floor))
    return _result(out, (a,), lambda g: (g * keep,), "clamp_min")


# -- reductions and shape manipulation -------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _result(out, (a,), bw, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _maybe(a, lambda: unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        gb = _maybe(b, lambda: unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction, so large inputs cannot overflow."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``[B, C, H, W]`` -> contiguous ``[B*H*W, C*k*k]`` patches under same padding."""
    pad = k // 2
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, h, w, c, k * k), dtype=x.dtype)
    nhwc = padded.transpose(0, 2, 3, 1)
    for i in range(k):
        for j in range(k):
            cols[..., i * k + j] = nhwc[:, i : i + h, j : j + w, :]
    return cols.reshape(b * h * w, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 "same" cross-correlation of ``x`` [B, C, H, W] with odd square kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected input [batch, channels, H, W], got {x.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight {weight.shape} expects {in_ch}")
    b, _, h, w = x.shape
    cols = _im2col(x.data, kh)
    out = cols @ weight.data.reshape(out_ch, -1).T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, h, w, out_ch).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-transposed kernel
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(in_ch, -1)
            gx = _im2col(g, kh) @ flipped.T
            gx = np.ascontiguousarray(gx.reshape(b, h, w, in_ch).transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping mean over ``kernel`` windows of the last two axes (stride == kernel)."""
    kt, kf = kernel
    b, c, t, f = x.shape
    if t % kt:
        raise ShapeError(f"avgpool: time axis of size {t} is not divisible by kernel {kt}")
    if f % kf:
        raise ShapeError(f"avgpool: frequency axis of size {f} is not divisible by kernel {kf}")
    out = np.zeros((b, c, t // kt, f // kf), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            out += x.data[:, :, i::kt, j::kf]
    out /= kt * kf

    def bw(g):
        return (np.repeat(np.repeat(g / (kt * kf), kt, axis=2), kf, axis=3),)

    return _result(out, (x,), bw, "avg_pool2d")


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel (axis 1) inner product accumulated in float64."""
    n, c = a.shape[:2]
    return np.einsum("bci,bci->c", a.reshape(n, c, -1), b.reshape(n, c, -1), dtype=np.float64)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Train-mode batch normalization over every axis except 1.

    Returns the output plus the batch mean and biased variance (for running
    statistics). Moments are accumulated in float64.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = -1
    count = x.data.size // x.shape[1]
    mu = x.data.sum(axis=axes, dtype=np.float64) / count
    centered = x.data - mu.astype(x.dtype).reshape(bshape)
    var = _channel_dot(centered, centered) / count
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    x_hat = centered * inv_std
    out = x_hat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        g_sum = g.sum(axis=axes, dtype=np.float64)
        g_mean = (g_sum / count).astype(x.dtype).reshape(bshape)
        gx_hat = _channel_dot(g, x_hat)
        gx = None
        if x.requires_grad:
            proj = (gx_hat / count).astype(x.dtype).reshape(bshape)
            gx = (gamma.data.reshape(bshape) * inv_std) * (g - g_mean - x_hat * proj)
        ggamma = gx_hat.astype(x.dtype) if gamma.requires_grad else None
        gbeta = g_sum.astype(x.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bw, "batch_norm"), mu, var


# -- backward pass -----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()

"""Neural network layers built on :mod:`msav.tensor`.

Layers accept either a single sequence ``[L, D]`` or a batch ``[B, L, D]``.
Dropout layers draw masks from a ``numpy.random.Generator`` passed to the
forward call; in eval mode no generator is needed.
"""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Minimal container tracking parameters, buffers and train/eval mode.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain arrays registered in ``self.buffers``. Names follow attribute order.
    """

    training = True

    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name == "buffers":
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grads(self) -> None:
        T.zero_grads(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by dotted name (arrays are live views)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if own[name].shape != np.shape(value):
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {np.shape(value)}")
        for name, value in state.items():
            own[name][...] = value

    def to_dtype(self, dtype) -> "Module":
        """Cast all parameters and buffers in place (gradient checks use float64)."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    setattr(m, name, Tensor(value.data.astype(dtype), requires_grad=True))
            for name in m.buffers:
                m.buffers[name] = m.buffers[name].astype(dtype)
        return self


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        bound = math.sqrt(1.0 / in_features)
        self.weight = _uniform(rng, bound, (in_features, out_features))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input feature dim {x.shape[-1]} != {self.weight.shape[0]}")
        return x @ self.weight + self.bias


class Conv2d(Module):
    """3x3 (by default) convolution with stride 1 and same padding."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        bound = math.sqrt(1.0 / (in_ch * kernel * kernel))
        self.weight = _uniform(rng, bound, (out_ch, in_ch, kernel, kernel))
        self.bias = parameter(np.zeros(out_ch))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm: expected [batch, {self.gamma.shape[0]}, T, F], got {x.shape}")
        shape = (1, -1, 1, 1)
        if self.training:
            group = x.shape[0] * x.shape[2] * x.shape[3]
            if group < 2:
                raise ValueError("batchnorm: train mode needs more than one value per channel")
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - m) * rm + m * mu).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - m) * rv + m * var).astype(rv.dtype)
            return out
        rm = self.buffers["running_mean"].reshape(shape)
        rv = self.buffers["running_var"].reshape(shape)
        x_hat = (x - rm) / np.sqrt(rv + self.eps).astype(x.dtype)
        return x_hat * self.gamma.reshape(shape) + self.beta.reshape(shape)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def normalize(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.gamma + self.beta


class Dropout(Module):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout: a random generator is required in train mode")
        keep = rng.random(x.shape, dtype=np.float32) >= self.rate
        return x * (keep / (1.0 - self.rate)).astype(x.dtype)


class AvgPool2d(Module):
    """Non-overlapping average pooling over the last two axes (kernel == stride)."""

    def __init__(self, kernel: tuple[int, int]):
        super().__init__()
        self.kernel = tuple(kernel)

    def __call__(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(x, self.kernel)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.attn_dropout = Dropout(dropout)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for name, x in (("query", q), ("key", k), ("value", v)):
            if x.shape[-1] != self.d_model:
                raise ShapeError(f"attention: {name} feature dim {x.shape[-1]} != d_model {self.d_model}")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"attention: key length {k.shape[-2]} != value length {v.shape[-2]}")
        q, squeeze = _batched(q)
        k, _ = _batched(k)
        v, _ = _batched(v)
        qh = self._split(self.query(q))
        kh = self._split(self.key(k))
        vh = self._split(self.value(v))
        scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        weights = scores.softmax(axis=-1)
        self.last_weights = weights.data
        ctx = self.attn_dropout(weights, rng) @ vh
        b, _, n, _ = ctx.shape
        out = self.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, self.d_model))
        return out.reshape(out.shape[1:]) if squeeze else out


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout, rng)
        self.ffn = FeedForward(d_model, ffn_dim, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        x = self.norm1(x + self.drop1(self.self_attn(x, x, x, rng), rng))
        return self.norm2(x + self.drop2(self.ffn(x), rng))


class MultiSourceSerialDecoderLayer(Module):
    """Decoder layer with one cross-attention block per memory, applied in series.

    ``memories[i]`` feeds the keys and values of ``cross_attn{i}``; the order of
    the blocks is the order of the memories.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        ffn_dim: int,
        dropout: float,
        rng: np.random.Generator,
        n_sources: int = 2,
    ):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout, rng)
        self.cross_attn = [MultiHeadAttention(d_model, n_heads, dropout, rng) for _ in range(n_sources)]
        self.ffn = FeedForward(d_model, ffn_dim, rng)
        self.norm = [LayerNorm(d_model) for _ in range(n_sources + 2)]
        self.drop = [Dropout(dropout) for _ in range(n_sources + 2)]

    def __call__(self, q: Tensor, memories: Sequence[Tensor], rng: np.random.Generator | None = None) -> Tensor:
        if len(memories) != len(self.cross_attn):
            raise ValueError(f"decoder layer expects {len(self.cross_attn)} memories, got {len(memories)}")
        q = self.norm[0](q + self.drop[0](self.self_attn(q, q, q, rng), rng))
        for i, (attn, mem) in enumerate(zip(self.cross_attn, memories), start=1):
            q = self.norm[i](q + self.drop[i](attn(q, mem, mem, rng), rng))
        return self.norm[-1](q + self.drop[-1](self.ffn(q), rng))


def sinusoidal_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table.astype(dtype)

"""Finite-difference verification of every differentiable op, layer and the model.

Each case builds a float64 scalar loss ``sum(out * R)`` (``R`` a fixed random
weighting) and compares tape gradients against central differences, both along
a random +-1 direction per tensor and at a few single coordinates.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import nn
from . import tensor as T
from .model import MultiSourceTransformer, tiny_config
from .tensor import Tensor
from .training import categorical_cross_entropy

F64 = np.float64
H = 1e-4
TOLERANCE = 1e-3
ABS_FLOOR = 1e-7

LossFn = Callable[[], Tensor]
CaseBuilder = Callable[[np.random.Generator], tuple[LossFn, dict[str, Tensor]]]
# single-coordinate probes per tensor, on top of the random-direction probe
COORD_PROBES = {"model_tiny": 0, "ms_decoder_layer": 1, "encoder_layer": 1}


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def _evaluate(loss_fn: LossFn) -> float:
    with T.no_grad():
        return float(loss_fn().data)


def check_gradients(
    loss_fn: LossFn, tensors: dict[str, Tensor], rng: np.random.Generator, h: float = H, n_coords: int = 2
) -> dict[str, float]:
    """Worst relative error per tensor between tape and central-difference gradients."""
    for t in tensors.values():
        t.zero_grad()
    loss_fn().backward()
    worst = {}
    for name, t in tensors.items():
        grad = t.grad.astype(F64).copy()
        errors = []
        probes = [rng.choice([-1.0, 1.0], size=t.shape)]
        for flat in rng.choice(t.data.size, size=min(n_coords, t.data.size), replace=False):
            e = np.zeros(t.data.size)
            e[flat] = 1.0
            probes.append(e.reshape(t.shape))
        for u in probes:
            original = t.data.copy()
            t.data[...] = original + h * u
            up = _evaluate(loss_fn)
            t.data[...] = original - h * u
            down = _evaluate(loss_fn)
            t.data[...] = original
            errors.append(rel_error(float((grad * u).sum()), (up - down) / (2 * h)))
        worst[name] = max(errors)
    return worst


# -- cases ----------------------------------------------------------------------------


def _leaf(rng, *shape, positive=False) -> Tensor:
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data.astype(F64), requires_grad=True)


def _weighted(out_fn: Callable[[], Tensor], rng) -> LossFn:
    weights = {}

    def loss():
        out = out_fn()
        if "r" not in weights:
            weights["r"] = rng.normal(size=out.shape)
        return (out * weights["r"]).sum()

    return loss


def _module_params(module: nn.Module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def _elementwise(op):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 1, 4, positive=True)
        return _weighted(lambda: op(a, b), rng), {"a": a, "b": b}

    return build


def _unary(op, positive=False):
    def build(rng):
        x = _leaf(rng, 2, 5, positive=positive)
        return _weighted(lambda: op(x), rng), {"x": x}

    return build


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    return _weighted(lambda: a @ b, rng), {"a": a, "b": b}


def _reshape_transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    return _weighted(lambda: x.transpose(2, 0, 1).reshape(4, 6), rng), {"x": x}


def _getitem_concat(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 2, 4)
    return _weighted(lambda: T.concat([a[1:], b], axis=0) * a[0], rng), {"a": a, "b": b}


def _reductions(rng):
    x = _leaf(rng, 3, 4, 2)
    return _weighted(lambda: x.sum(axis=1) * x.mean(axis=(0, 2), keepdims=True).reshape(1, 4)[:, :2], rng), {"x": x}


def _conv2d(rng):
    layer = nn.Conv2d(2, 3, rng).to_dtype(F64)
    x = _leaf(rng, 2, 2, 5, 4)
    return _weighted(lambda: layer(x), rng), {"x": x, **_module_params(layer)}


def _batchnorm(rng):
    layer = nn.BatchNorm2d(3).to_dtype(F64)
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, size=3)
    layer.beta.data[...] = rng.normal(size=3)
    x = _leaf(rng, 2, 3, 4, 3)
    return _weighted(lambda: layer(x), rng), {"x": x, **_module_params(layer)}


def _avgpool(rng):
    layer = nn.AvgPool2d((3, 2))
    x = _leaf(rng, 2, 2, 6, 4)
    return _weighted(lambda: layer(x), rng), {"x": x}


def _dropout(rng):
    layer = nn.Dropout(0.33)
    x = _leaf(rng, 4, 6)
    seed = int(rng.integers(2**31))
    return _weighted(lambda: layer(x, np.random.default_rng(seed)), rng), {"x": x}


def _linear(rng):
    layer = nn.Linear(5, 3, rng).to_dtype(F64)
    x = _leaf(rng, 2, 4, 5)
    return _weighted(lambda: layer(x), rng), {"x": x, **_module_params(layer)}


def _layernorm(rng):
    layer = nn.LayerNorm(6).to_dtype(F64)
    layer.gamma.data[...] = rng.uniform(0.5, 1.5, size=6)
    x = _leaf(rng, 3, 6)
    return _weighted(lambda: layer(x), rng), {"x": x, **_module_params(layer)}


def _attention(rng):
    layer = nn.MultiHeadAttention(6, 2, 0.1, rng).to_dtype(F64)
    q, kv = _leaf(rng, 2, 3, 6), _leaf(rng, 2, 4, 6)
    seed = int(rng.integers(2**31))
    loss = _weighted(lambda: layer(q, kv, kv, np.random.default_rng(seed)), rng)
    return loss, {"q": q, "kv": kv, **_module_params(layer)}


def _encoder(rng):
    layer = nn.EncoderLayer(6, 2, 6, 0.1, rng).to_dtype(F64)
    x = _leaf(rng, 2, 3, 6)
    seed = int(rng.integers(2**31))
    return _weighted(lambda: layer(x, np.random.default_rng(seed)), rng), {"x": x, **_module_params(layer)}


def _decoder(rng):
    layer = nn.MultiSourceSerialDecoderLayer(6, 2, 6, 0.1, rng).to_dtype(F64)
    q, ma, mb = _leaf(rng, 2, 1, 6), _leaf(rng, 2, 3, 6), _leaf(rng, 2, 4, 6)
    seed = int(rng.integers(2**31))
    loss = _weighted(lambda: layer(q, [ma, mb], np.random.default_rng(seed)), rng)
    return loss, {"q": q, "mem_a": ma, "mem_b": mb, **_module_params(layer)}


def _cross_entropy(rng):
    logits = _leaf(rng, 4, 5)
    targets = rng.dirichlet(np.ones(5), size=4)
    return (lambda: categorical_cross_entropy(logits.softmax(axis=-1), targets)), {"logits": logits}


def _model(rng):
    cfg = tiny_config()
    model = MultiSourceTransformer(cfg, seed=int(rng.integers(2**31))).to_dtype(F64)
    # zero-initialised biases can leave LayerNorm at a zero-variance input
    for p in model.parameters():
        p.data += rng.normal(scale=0.1, size=p.shape)
    b = 3
    spectral = rng.normal(size=(b, 4, cfg.spectral_bins))
    paudio = rng.normal(size=(b, 1, cfg.paudio_dim))
    pvisual = rng.normal(size=(b, 3, cfg.pvisual_dim))
    targets = np.eye(cfg.n_classes)[rng.integers(cfg.n_classes, size=b)]
    seed = int(rng.integers(2**31))

    def loss():
        probs = model(spectral, paudio, pvisual, rng=np.random.default_rng(seed))
        return categorical_cross_entropy(probs, targets)

    return loss, _module_params(model)


CASES: dict[str, CaseBuilder] = {
    "add": _elementwise(lambda a, b: a + b),
    "sub": _elementwise(lambda a, b: a - b),
    "mul": _elementwise(lambda a, b: a * b),
    "div": _elementwise(lambda a, b: a / b),
    "matmul": _matmul,
    "pow": _unary(lambda x: x**3),
    "exp": _unary(lambda x: x.exp()),
    "log": _unary(lambda x: x.log(), positive=True),
    "sqrt": _unary(lambda x: x.sqrt(), positive=True),
    "relu": _unary(lambda x: x.relu()),
    "clamp_min": _unary(lambda x: T.clamp_min(x, 0.1)),
    "softmax": _unary(lambda x: x.softmax(axis=-1)),
    "sum_mean": _reductions,
    "reshape_transpose": _reshape_transpose,
    "getitem_concat": _getitem_concat,
    "conv2d": _conv2d,
    "batchnorm2d": _batchnorm,
    "avgpool2d": _avgpool,
    "dropout": _dropout,
    "linear": _linear,
    "layernorm": _layernorm,
    "multi_head_attention": _attention,
    "encoder_layer": _encoder,
    "ms_decoder_layer": _decoder,
    "cross_entropy": _cross_entropy,
    "model_tiny": _model,
}


@dataclass
class CaseResult:
    name: str
    seeds: int
    max_rel_error: float
    worst_tensor: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_case(name: str, seeds: range) -> CaseResult:
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    for seed in seeds:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        loss_fn, tensors = CASES[name](rng)
        n_coords = COORD_PROBES.get(name, 2)
        for tensor_name, err in check_gradients(loss_fn, tensors, rng, n_coords=n_coords).items():
            if not err <= worst:
                worst, worst_name = err, tensor_name
    return CaseResult(name, len(seeds), worst, worst_name, time.perf_counter() - start)


def run_suite(seed: int = 0, n_seeds: int = 20, names=None) -> list[CaseResult]:
    seeds = range(seed, seed + n_seeds)
    return [run_case(name, seeds) for name in (names or CASES)]


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 1.1) -> Iterator[None]:
    """Scale the backward rule of every ``op`` node by ``scale`` (negative control)."""
    original = T._result

    def faulty(data, parents, backward_fn, op_name):
        if op_name == op:
            def scaled(g, fn=backward_fn):
                return [None if x is None else x * scale for x in fn(g)]

            return original(data, parents, scaled, op_name)
        return original(data, parents, backward_fn, op_name)

    T._result = faulty
    try:
        yield
    finally:
        T._result = original


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'check':<22} {'seeds':>5} {'max rel err':>12}  {'worst tensor':<28} result"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<22} {r.seeds:>5} {r.max_rel_error:>12.3e}  {r.worst_tensor:<28} {status}")
    return "\n".join(lines)

"""The multi-source serial transformer classifier and its checkpoints."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ftz
from .nn import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dropout,
    EncoderLayer,
    Linear,
    Module,
    MultiSourceSerialDecoderLayer,
    sinusoidal_encoding,
)
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    n_classes: int = 10
    d_model: int = 96
    n_heads: int = 3
    ffn_dim: int = 96
    n_encoder_layers: int = 3
    n_decoder_layers: int = 3
    cnn_channels: list[int] = field(default_factory=lambda: [12, 24, 48, 96])
    cnn_pools: list[tuple[int, int]] = field(default_factory=lambda: [(3, 4), (2, 4), (2, 4), (1, 2)])
    cnn_dropout: float = 0.33
    embed_dropout: float = 0.33
    transformer_dropout: float = 0.1
    head_dropout: float = 0.33
    spectral_bins: int = 128
    paudio_dim: int = 128
    pvisual_dim: int = 4096
    positional_encoding: bool = False

    def __post_init__(self):
        self.cnn_channels = [int(c) for c in self.cnn_channels]
        self.cnn_pools = [tuple(int(k) for k in p) for p in self.cnn_pools]
        if len(self.cnn_channels) != len(self.cnn_pools):
            raise ValueError("cnn_channels and cnn_pools must have the same length")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.spectral_bins != self.freq_reduction:
            raise ValueError(
                f"spectral_bins {self.spectral_bins} must equal the product of frequency pools "
                f"({self.freq_reduction}) so the frequency axis collapses to one"
            )

    @property
    def time_reduction(self) -> int:
        return int(np.prod([p[0] for p in self.cnn_pools]))

    @property
    def freq_reduction(self) -> int:
        return int(np.prod([p[1] for p in self.cnn_pools]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_pools"] = [list(p) for p in self.cnn_pools]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Scaled-down configuration for fast gradient checks."""
    base = dict(
        n_classes=3,
        d_model=8,
        n_heads=2,
        ffn_dim=8,
        n_encoder_layers=1,
        n_decoder_layers=1,
        cnn_channels=[2, 3],
        cnn_pools=[(2, 2), (1, 2)],
        spectral_bins=4,
        paudio_dim=5,
        pvisual_dim=6,
    )
    base.update(overrides)
    return ModelConfig(**base)


class CNNBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, pool: tuple[int, int], dropout: float, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, rng)
        self.bn = BatchNorm2d(out_ch)
        self.drop = Dropout(dropout)
        self.pool = AvgPool2d(pool)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.pool(self.drop(self.bn(self.conv(x)).relu(), rng))


class CNN(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        channels = [1, *cfg.cnn_channels]
        self.block = [
            CNNBlock(channels[i], channels[i + 1], cfg.cnn_pools[i], cfg.cnn_dropout, rng)
            for i in range(len(cfg.cnn_pools))
        ]

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        for block in self.block:
            x = block(x, rng)
        return x


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.layer = [
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.transformer_dropout, rng)
            for _ in range(cfg.n_encoder_layers)
        ]

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        for layer in self.layer:
            x = layer(x, rng)
        return x


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.layer = [
            MultiSourceSerialDecoderLayer(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.transformer_dropout, rng)
            for _ in range(cfg.n_decoder_layers)
        ]

    def __call__(self, q: Tensor, memories, rng=None) -> Tensor:
        for layer in self.layer:
            q = layer(q, memories, rng)
        return q


class MultiSourceTransformer(Module):
    """CNN + three embeddings + two encoders + serial decoder + softmax head.

    Inputs are batched: spectral ``[B, T, bins]``, pretrained audio
    ``[B, 1, paudio_dim]`` and pretrained visual ``[B, Lv, pvisual_dim]``.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.cnn = CNN(cfg, rng)
        self.embed_spectral = Linear(cfg.cnn_channels[-1], cfg.d_model, rng)
        self.embed_paudio = Linear(cfg.paudio_dim, cfg.d_model, rng)
        self.embed_pvisual = Linear(cfg.pvisual_dim, cfg.d_model, rng)
        self.embed_drop = Dropout(cfg.embed_dropout)
        self.encoder_spectral = Encoder(cfg, rng)
        self.encoder_pvisual = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.head_drop = Dropout(cfg.head_dropout)
        self.head = Linear(cfg.d_model, cfg.n_classes, rng)

    def check_inputs(self, spectral: Tensor, paudio: Tensor, pvisual: Tensor) -> None:
        cfg = self.config
        if spectral.ndim != 3 or spectral.shape[2] != cfg.spectral_bins:
            raise ShapeError(f"spectral stream: expected [batch, T, {cfg.spectral_bins}], got {spectral.shape}")
        if spectral.shape[1] % cfg.time_reduction or spectral.shape[1] == 0:
            raise ShapeError(
                f"spectral stream: frame count {spectral.shape[1]} is not a positive multiple of {cfg.time_reduction}"
            )
        if paudio.ndim != 3 or paudio.shape[2] != cfg.paudio_dim:
            raise ShapeError(f"pretrained audio stream: expected [batch, L, {cfg.paudio_dim}], got {paudio.shape}")
        if pvisual.ndim != 3 or pvisual.shape[2] != cfg.pvisual_dim or pvisual.shape[1] == 0:
            raise ShapeError(f"pretrained visual stream: expected [batch, Lv, {cfg.pvisual_dim}], got {pvisual.shape}")
        batches = {spectral.shape[0], paudio.shape[0], pvisual.shape[0]}
        if len(batches) != 1:
            raise ShapeError(
                f"streams disagree on batch size: spectral {spectral.shape[0]}, "
                f"pretrained audio {paudio.shape[0]}, pretrained visual {pvisual.shape[0]}"
            )

    @property
    def dtype(self):
        return self.head.weight.dtype

    def cnn_forward(self, spectral: Tensor, rng=None) -> Tensor:
        """``[B, T, bins]`` -> ``[B, T / time_reduction, channels]``."""
        spectral = _as_tensor(spectral, self.dtype)
        b, t, f = spectral.shape
        if t % self.config.time_reduction:
            raise ShapeError(f"spectral stream: frame count {t} is not divisible by {self.config.time_reduction}")
        x = self.cnn(spectral.reshape(b, 1, t, f), rng)
        # frequency axis is 1 here; drop it and move channels last
        b, c, t, _ = x.shape
        return x.reshape(b, c, t).transpose(0, 2, 1)

    def _encode(self, embed: Linear, encoder: Encoder, x: Tensor, rng) -> Tensor:
        e = self.embed_drop(embed(x), rng)
        if self.config.positional_encoding:
            e = e + sinusoidal_encoding(e.shape[1], e.shape[2], e.dtype)
        return encoder(e, rng)

    def fuse(self, conv_audio: Tensor, paudio: Tensor, pvisual: Tensor, rng=None) -> Tensor:
        """Everything after the CNN: embeddings, encoders, decoder and head."""
        conv_audio, paudio, pvisual = (_as_tensor(x, self.dtype) for x in (conv_audio, paudio, pvisual))
        memory_a = self._encode(self.embed_spectral, self.encoder_spectral, conv_audio, rng)
        memory_b = self._encode(self.embed_pvisual, self.encoder_pvisual, pvisual, rng)
        query = self.embed_drop(self.embed_paudio(paudio), rng)
        out = self.decoder(query, [memory_a, memory_b], rng)
        b, lq, d = out.shape
        pooled = out.reshape(b * lq, d) if lq == 1 else out.mean(axis=1)
        logits = self.head(self.head_drop(pooled, rng))
        return logits.softmax(axis=-1)

    def __call__(self, spectral, paudio, pvisual, rng=None) -> Tensor:
        spectral, paudio, pvisual = (_as_tensor(x, self.dtype) for x in (spectral, paudio, pvisual))
        self.check_inputs(spectral, paudio, pvisual)
        if self.training and rng is None:
            raise ValueError("train-mode forward needs a random generator for dropout")
        return self.fuse(self.cnn_forward(spectral, rng), paudio, pvisual, rng)

    def predict(self, spectral, paudio, pvisual, batch_size: int = 64) -> np.ndarray:
        """Eval-mode probabilities for a stack of samples, computed in chunks."""
        from .tensor import no_grad

        was_training = self.training
        self.eval()
        try:
            with no_grad():
                chunks = [
                    self(spectral[i : i + batch_size], paudio[i : i + batch_size], pvisual[i : i + batch_size]).data
                    for i in range(0, len(spectral), batch_size)
                ]
        finally:
            self.train(was_training)
        return np.concatenate(chunks, axis=0)


def _as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# -- checkpoints --------------------------------------------------------------


class CheckpointError(Exception):
    pass


class MissingTensorError(CheckpointError):
    pass


class UnexpectedTensorError(CheckpointError):
    pass


class TensorShapeMismatch(CheckpointError):
    pass


class CorruptTensorError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    role: str = "student"

    def build(self) -> MultiSourceTransformer:
        model = MultiSourceTransformer(self.config, seed=self.seed)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(
    model: MultiSourceTransformer, path: str | os.PathLike, step: int = 0, seed: int = 0, role: str = "student"
) -> None:
    if role not in ("student", "teacher"):
        raise ValueError(f"role must be 'student' or 'teacher', got {role!r}")
    root = Path(path)
    params_dir = root / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    for stale in params_dir.glob("*.ftz"):
        if stale.stem not in state:
            stale.unlink()
    for name, value in state.items():
        ftz.save(params_dir / f"{name}.ftz", value)
    meta = {"config": model.config.to_dict(), "step": int(step), "seed": int(seed), "role": role}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: value.shape for name, value in MultiSourceTransformer(cfg).state_dict().items()}


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    expected = expected_shapes(cfg)
    found = {p.stem: p for p in (root / "params").glob("*.ftz")}
    missing = sorted(set(expected) - set(found))
    if missing:
        raise MissingTensorError(f"checkpoint {root} lacks tensors: {missing}")
    extra = sorted(set(found) - set(expected))
    if extra:
        raise UnexpectedTensorError(f"checkpoint {root} has unexpected tensors: {extra}")
    params = {}
    for name in expected:
        try:
            arr = ftz.load(found[name])
        except ftz.FTZFormatError as exc:
            raise CorruptTensorError(f"{found[name]}: {exc}") from exc
        if arr.shape != expected[name]:
            raise TensorShapeMismatch(f"{name}: config implies shape {expected[name]}, file holds {arr.shape}")
        params[name] = arr
    return Checkpoint(cfg, params, int(meta.get("step", 0)), int(meta.get("seed", 0)), meta.get("role", "student"))


def load_model(path: str | os.PathLike) -> MultiSourceTransformer:
    return load_checkpoint(path).build()

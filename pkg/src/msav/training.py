"""Loss, Adam, learning-rate schedule, mean-teacher EMA and the training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import FeatureSet, Manifest, MixupConfig, epoch_batches, load_features, mixup
from .metrics import MetricReport, evaluate
from .model import MultiSourceTransformer, save_checkpoint
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    peak_lr: float = 0.00025
    warmup_steps: int = 675
    decay_rate: float = 0.999
    warmup_shape: str = "gaussian"
    ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("decay_rate", "ema_decay", "adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if self.warmup_shape not in ("gaussian", "geometric"):
            raise ValueError(f"warmup_shape must be 'gaussian' or 'geometric', got {self.warmup_shape!r}")


# -- loss and schedule -----------------------------------------------------------


def categorical_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Batch mean of ``-sum_c t_c log(max(p_c, 1e-12))``; targets may be soft."""
    targets = np.asarray(targets, dtype=probs.dtype)
    if probs.shape != targets.shape:
        raise ShapeError(f"cross-entropy: probabilities {probs.shape} vs targets {targets.shape}")
    logp = T.clamp_min(probs, LOSS_FLOOR).log()
    return -(logp * targets).sum(axis=1).mean()


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Warm up to ``peak_lr`` over ``warmup_steps``, then decay by ``decay_rate`` per step.

    The default ramp is ``exp(-5 (1 - step/warmup)^2)``; ``warmup_shape="geometric"``
    instead interpolates log-linearly from the same starting value.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= cfg.warmup_steps:
        x = step / cfg.warmup_steps
        if cfg.warmup_shape == "gaussian":
            return cfg.peak_lr * math.exp(-5.0 * (1.0 - x) ** 2)
        return cfg.peak_lr * math.exp(-5.0 * (1.0 - x))
    return cfg.peak_lr * cfg.decay_rate ** (step - cfg.warmup_steps)


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place, in each parameter's own dtype."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:5]}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


# -- mean teacher ------------------------------------------------------------------


def ema_update_arrays(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray], decay: float) -> None:
    if set(teacher) != set(student):
        diff = sorted(set(teacher) ^ set(student))
        raise KeyError(f"ema_update: teacher and student names differ: {diff[:5]}")
    # t + (1 - d)(s - t) rather than d*t + (1 - d)*s: identical in exact arithmetic,
    # but leaves t bit-unchanged when s == t
    for name, t in teacher.items():
        t += ((1.0 - decay) * (student[name] - t)).astype(t.dtype)


def ema_update(teacher: MultiSourceTransformer, student: MultiSourceTransformer, decay: float = 0.999) -> None:
    """``teacher <- decay * teacher + (1 - decay) * student`` for weights and BN statistics."""
    ema_update_arrays(teacher.state_dict(), student.state_dict(), decay)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    student: MultiSourceTransformer
    teacher: MultiSourceTransformer
    history: list[dict]
    steps: int
    best_ce: MetricReport | None = None
    best_ce_epoch: int | None = None
    best_acc: MetricReport | None = None
    best_acc_epoch: int | None = None

    def report(self) -> dict:
        def entry(rep, epoch):
            return None if rep is None else {"epoch": epoch, **rep.to_dict()}

        return {
            "best_macro_ce": entry(self.best_ce, self.best_ce_epoch),
            "best_accuracy": entry(self.best_acc, self.best_acc_epoch),
            "epochs": len(self.history),
            "steps": self.steps,
        }


def evaluate_model(model: MultiSourceTransformer, feats: FeatureSet, batch_size: int = 128) -> MetricReport:
    probs = model.predict(feats.spectral, feats.paudio, feats.pvisual, batch_size)
    return evaluate(probs, feats.labels)


def _as_features(data: Manifest | FeatureSet) -> FeatureSet:
    return data if isinstance(data, FeatureSet) else load_features(data)


def train(
    train_data: Manifest | FeatureSet,
    val_data: Manifest | FeatureSet,
    model: MultiSourceTransformer,
    cfg: TrainConfig,
    mixup_cfg: MixupConfig | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train ``model`` (the student) and track its EMA teacher.

    After each epoch the teacher is scored on ``val_data``; the lowest macro-CE
    and the highest accuracy are retained independently, each with its own
    teacher checkpoint under ``out_dir``.
    """
    mixup_cfg = mixup_cfg or MixupConfig()
    train_feats = _as_features(train_data)
    val_feats = _as_features(val_data)
    if train_feats.n_classes != model.config.n_classes:
        raise ValueError(f"manifest has {train_feats.n_classes} classes, model expects {model.config.n_classes}")
    sampler_rng, mixup_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    student = model
    teacher = copy.deepcopy(student)
    teacher.eval()
    params = dict(student.named_parameters())
    adam = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")
    result = TrainResult(student, teacher, [], 0)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            student.train()
            losses = []
            for idx in epoch_batches(train_feats.parents, cfg.batch_size, sampler_rng):
                streams = [train_feats.spectral[idx], train_feats.paudio[idx], train_feats.pvisual[idx]]
                streams, targets, _ = mixup(streams, train_feats.one_hot(idx), mixup_cfg, mixup_rng)
                probs = student(*streams, rng=dropout_rng)
                loss = categorical_cross_entropy(probs, targets)
                student.zero_grads()
                loss.backward()
                lr = lr_at(step, cfg)
                adam_step(params, {n: p.grad for n, p in params.items()}, adam, lr, cfg)
                ema_update(teacher, student, cfg.ema_decay)
                losses.append(loss.item())
                step += 1
            rep = evaluate_model(teacher, val_feats, cfg.eval_batch_size)
            record = {
                "epoch": epoch,
                "step": step,
                "lr": lr_at(max(step - 1, 0), cfg),
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_macro_ce": rep.macro_ce,
                "val_accuracy": rep.accuracy,
            }
            result.history.append(record)
            log.info("epoch %d step %d loss %.4f val_ce %.4f val_acc %.4f", epoch, step,
                     record["train_loss"] or float("nan"), rep.macro_ce, rep.accuracy)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if result.best_ce is None or rep.macro_ce < result.best_ce.macro_ce:
                result.best_ce, result.best_ce_epoch = rep, epoch
                if out is not None:
                    save_checkpoint(teacher, out / "best_ce", step, cfg.seed, "teacher")
            if result.best_acc is None or rep.accuracy > result.best_acc.accuracy:
                result.best_acc, result.best_acc_epoch = rep, epoch
                if out is not None:
                    save_checkpoint(teacher, out / "best_acc", step, cfg.seed, "teacher")
    finally:
        if log_file is not None:
            log_file.close()
    result.steps = step
    if out is not None:
        save_checkpoint(student, out / "final_student", step, cfg.seed, "student")
        save_checkpoint(teacher, out / "final_teacher", step, cfg.seed, "teacher")
        (out / "report.json").write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    return result


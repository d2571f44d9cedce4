"""Macro-averaged multi-class cross-entropy and accuracy."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass
class MetricReport:
    macro_ce: float
    accuracy: float
    per_class_ce: list[float | None]
    per_class_accuracy: list[float | None]
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def absent_classes(self) -> list[int]:
        return [c for c, v in enumerate(self.per_class_ce) if v is None]


def _validate(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2:
        raise ValueError(f"probabilities must be [N, n_classes], got shape {probs.shape}")
    if len(probs) == 0:
        raise ValueError("cannot compute metrics on an empty evaluation set")
    if labels.shape != (len(probs),):
        raise ValueError(f"labels shape {labels.shape} does not match {len(probs)} probability rows")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(f"labels must lie in 0..{probs.shape[1] - 1}")
    return probs, labels


def macro_cross_entropy(probs, labels) -> tuple[float, list[float | None]]:
    """Mean over present classes of the per-class mean ``-log p_true``.

    Classes with no samples get ``None`` and do not enter the average.
    """
    probs, labels = _validate(probs, labels)
    nll = -np.log(np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR))
    per_class: list[float | None] = []
    for c in range(probs.shape[1]):
        mask = labels == c
        per_class.append(float(nll[mask].mean()) if mask.any() else None)
    present = [v for v in per_class if v is not None]
    return math.fsum(present) / len(present), per_class


def accuracy(probs, labels) -> tuple[float, list[float | None]]:
    """Overall and per-class accuracy; argmax ties resolve to the lowest class index."""
    probs, labels = _validate(probs, labels)
    correct = np.argmax(probs, axis=1) == labels
    per_class = [float(correct[labels == c].mean()) if (labels == c).any() else None for c in range(probs.shape[1])]
    return float(correct.mean()), per_class


def evaluate(probs, labels) -> MetricReport:
    macro, per_ce = macro_cross_entropy(probs, labels)
    acc, per_acc = accuracy(probs, labels)
    return MetricReport(macro, acc, per_ce, per_acc, int(len(labels)))

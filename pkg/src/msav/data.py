"""Manifests, file-unique batching, mixup and the synthetic audiovisual corpus."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import ftz

SCENES = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
]


class ManifestError(ValueError):
    pass


@dataclass
class SampleRecord:
    id: str
    parent_file: str
    label: int
    spectral_path: str
    paudio_path: str | None
    pvisual_path: str | None
    n_frames: int | None = None


@dataclass
class Manifest:
    records: list[SampleRecord]
    split: str = "train"
    class_names: list[str] = field(default_factory=lambda: list(SCENES))
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ManifestError(f"split must be 'train' or 'val', got {self.split!r}")
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if not 0 <= r.label < len(self.class_names):
                raise ManifestError(f"record {r.id!r}: label {r.label} outside 0..{len(self.class_names) - 1}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def parent_files(self) -> list[str]:
        return sorted({r.parent_file for r in self.records})

    def resolve(self, rel: str | None) -> Path:
        if rel is None:
            raise ManifestError("record is missing a feature path")
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "class_names": list(self.class_names),
            "records": [asdict(r) for r in self.records],
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not isinstance(doc, dict) or "records" not in doc:
            raise ManifestError(f"{path}: manifest must be an object with a 'records' list")
        try:
            records = [SampleRecord(**r) for r in doc["records"]]
        except TypeError as exc:
            raise ManifestError(f"{path}: malformed record: {exc}") from exc
        return cls(records, doc.get("split", "train"), doc.get("class_names", list(SCENES)), root=path.parent)


@dataclass
class FeatureSet:
    """All features of a manifest stacked in memory, in manifest order."""

    spectral: np.ndarray
    paudio: np.ndarray
    pvisual: np.ndarray
    labels: np.ndarray
    parents: list[str]
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def one_hot(self, idx) -> np.ndarray:
        return np.eye(self.n_classes, dtype=np.float32)[self.labels[idx]]


def load_features(manifest: Manifest) -> FeatureSet:
    if not manifest.records:
        raise ManifestError("manifest has no records")
    streams: dict[str, list[np.ndarray]] = {"spectral": [], "paudio": [], "pvisual": []}
    for r in manifest.records:
        for name in streams:
            path = manifest.resolve(getattr(r, f"{name}_path"))
            if not path.exists():
                raise ManifestError(f"record {r.id!r}: {name} file {path} does not exist")
            streams[name].append(ftz.load(path))
    stacked = {}
    for name, arrays in streams.items():
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ManifestError(f"{name} features have inconsistent shapes: {sorted(shapes)}")
        stacked[name] = np.stack(arrays)
    return FeatureSet(
        stacked["spectral"],
        stacked["paudio"],
        stacked["pvisual"],
        np.array([r.label for r in manifest.records], dtype=np.int64),
        [r.parent_file for r in manifest.records],
        len(manifest.class_names),
    )


# -- batching -------------------------------------------------------------------


def _group_by_parent(parents: Sequence[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(parents):
        groups.setdefault(p, []).append(i)
    return groups


def sample_batch(manifest: Manifest, batch_size: int, rng: np.random.Generator) -> list[SampleRecord]:
    """Draw ``batch_size`` records whose parent files are pairwise distinct."""
    groups = _group_by_parent([r.parent_file for r in manifest.records])
    if len(groups) < batch_size:
        raise ValueError(f"batch of {batch_size} needs that many distinct files, manifest has {len(groups)}")
    names = sorted(groups)
    chosen = rng.choice(len(names), size=batch_size, replace=False)
    return [manifest.records[groups[names[i]][rng.integers(len(groups[names[i]]))]] for i in chosen]


def epoch_batches(parents: Sequence[str], batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index batches covering every sample once, each with distinct parent files.

    Each batch takes one pending segment from each of the ``batch_size`` files
    with the most pending segments (random tie-break), which keeps the tail of
    the epoch from running out of distinct files. Batches smaller than two
    samples are dropped.
    """
    groups = _group_by_parent(parents)
    if len(groups) < batch_size:
        raise ValueError(f"batch of {batch_size} needs that many distinct files, got {len(groups)}")
    queues = [list(rng.permutation(groups[name])) for name in sorted(groups)]
    while True:
        pending = np.array([len(q) for q in queues])
        live = np.flatnonzero(pending)
        if len(live) < 2:
            return
        ranked = live[np.lexsort((rng.random(len(live)), -pending[live]))]
        yield np.array([queues[i].pop() for i in ranked[:batch_size]])


# -- mixup ------------------------------------------------------------------------


@dataclass
class MixupConfig:
    activation_prob: float = 0.5
    beta_shape: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.activation_prob <= 1.0:
            raise ValueError(f"activation_prob must lie in [0, 1], got {self.activation_prob}")
        if self.beta_shape <= 0:
            raise ValueError(f"beta_shape must be positive, got {self.beta_shape}")


def gamma_sample(shape: float, rng: np.random.Generator) -> float:
    """Marsaglia-Tsang Gamma(shape, 1); shapes below one use the ``U**(1/a)`` boost."""
    if shape <= 0:
        raise ValueError(f"gamma shape must be positive, got {shape}")
    if shape < 1.0:
        u = rng.random()
        return gamma_sample(shape + 1.0, rng) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = (1.0 + c * x) ** 3
        if v <= 0:
            continue
        u = rng.random()
        if u < 1.0 - 0.0331 * x**4 or math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def beta_sample(a: float, b: float, rng: np.random.Generator) -> float:
    """Beta(a, b) as ``X / (X + Y)`` with independent Gamma draws, kept inside (0, 1)."""
    if a <= 0 or b <= 0:
        raise ValueError(f"beta shapes must be positive, got {a}, {b}")
    while True:
        x = gamma_sample(a, rng)
        y = gamma_sample(b, rng)
        if x + y > 0:
            break
    lam = x / (x + y)
    return min(max(lam, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))


def _check_one_hot(targets: np.ndarray) -> None:
    t = np.asarray(targets)
    if t.ndim != 2 or not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=1) == 1):
        raise ValueError("mixup expects one-hot targets of shape [batch, n_classes]")


def mix(inputs: Sequence[np.ndarray], targets: np.ndarray, lam: float, perm: np.ndarray):
    """Convex combination ``lam * x + (1 - lam) * x[perm]`` applied to every stream and the targets."""
    mixed = [(lam * x + (1.0 - lam) * x[perm]).astype(x.dtype) for x in inputs]
    return mixed, (lam * targets + (1.0 - lam) * targets[perm]).astype(targets.dtype)


def mixup(
    inputs: Sequence[np.ndarray], targets: np.ndarray, cfg: MixupConfig, rng: np.random.Generator
) -> tuple[list[np.ndarray], np.ndarray, float | None]:
    """Per-batch mixup. Returns the (possibly) mixed streams, targets and the lambda used (None if inactive)."""
    _check_one_hot(targets)
    if rng.random() >= cfg.activation_prob:
        return list(inputs), targets, None
    lam = beta_sample(cfg.beta_shape, cfg.beta_shape, rng)
    perm = rng.permutation(len(targets))
    mixed, mixed_targets = mix(inputs, targets, lam, perm)
    return mixed, mixed_targets, lam


# -- synthetic corpus ---------------------------------------------------------------

SYNTH_SHAPES = {"spectral": (60, 128), "paudio": (1, 128), "pvisual": (30, 4096)}


def synth_dataset(
    out_dir: str | os.PathLike,
    n_classes: int = 10,
    files_per_class: int = 2,
    segments_per_file: int = 10,
    seed: int = 0,
    noise_std: float = 1.0,
    anchor_scale: float = 1.0,
    shapes: dict[str, tuple[int, ...]] | None = None,
    split: str = "train",
) -> Manifest:
    """Write a class-anchored Gaussian corpus and its manifest.json into ``out_dir``.

    Each class owns one random anchor per stream; a sample is its class anchor
    plus isotropic noise. Anchors are redrawn until every pair is at least
    ``5 * noise_std`` apart in every stream.
    """
    if n_classes < 1 or files_per_class < 1 or segments_per_file < 1:
        raise ValueError("n_classes, files_per_class and segments_per_file must all be >= 1")
    shapes = shapes or SYNTH_SHAPES
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    anchors = {}
    for name, shape in shapes.items():
        for _ in range(100):
            a = rng.normal(0.0, anchor_scale, size=(n_classes, *shape))
            if n_classes < 2 or min_pairwise_distance(a) >= 5 * noise_std:
                break
        else:
            raise ValueError(f"could not separate {name} anchors; increase anchor_scale")
        anchors[name] = a
    class_names = SCENES if n_classes == len(SCENES) else [f"class{c:02d}" for c in range(n_classes)]
    records = []
    for c in range(n_classes):
        for f in range(files_per_class):
            parent = f"{class_names[c]}-f{f:03d}"
            for k in range(segments_per_file):
                rid = f"{parent}-{k}"
                paths = {}
                for name, shape in shapes.items():
                    sample = anchors[name][c] + rng.normal(0.0, noise_std, size=shape)
                    rel = f"features/{rid}.{name}.ftz"
                    ftz.save(out / rel, sample)
                    paths[f"{name}_path"] = rel
                records.append(SampleRecord(rid, parent, c, n_frames=shapes["spectral"][0], **paths))
    manifest = Manifest(records, split, list(class_names), root=out)
    manifest.save(out / "manifest.json")
    return manifest


def min_pairwise_distance(anchors: np.ndarray) -> float:
    flat = anchors.reshape(len(anchors), -1).astype(np.float64)
    sq = (flat**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T
    return float(np.sqrt(np.maximum(d2[np.triu_indices(len(flat), 1)], 0.0)).min())

"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import MixupConfig
from .dsp import MelExtractorConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mel: MelExtractorConfig = field(default_factory=MelExtractorConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    seed: int = 0
    train_manifest: str | None = None
    val_manifest: str | None = None
    out_dir: str | None = None

    SECTIONS = {"model": ModelConfig, "train": TrainConfig, "mel": MelExtractorConfig, "mixup": MixupConfig}
    SCALARS = ("seed", "train_manifest", "val_manifest", "out_dir")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(cls.SECTIONS) - set(cls.SCALARS))
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        kwargs = {name: _strict(kind, name, doc[name]) for name, kind in cls.SECTIONS.items() if name in doc}
        kwargs.update({k: doc[k] for k in cls.SCALARS if k in doc})
        cfg = cls(**kwargs)
        if "seed" in doc and "seed" not in doc.get("train", {}):
            cfg.train.seed = int(doc["seed"])
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "mel": dataclasses.asdict(self.mel),
            "mixup": dataclasses.asdict(self.mixup),
            "seed": self.seed,
            "train_manifest": self.train_manifest,
            "val_manifest": self.val_manifest,
            "out_dir": self.out_dir,
        }

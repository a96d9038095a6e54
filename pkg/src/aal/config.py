"""Experiment configuration: one JSON document per run.

The document has four top-level sections (dataset, model, train, out_dir).
Unknown keys anywhere are rejected; defaults fill everything omitted, and
the resolved document is echoed into the output directory as the run's
provenance record.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from aal.attack import AttackConfig
from aal.training import TrainConfig

__all__ = ["ConfigError", "DatasetConfig", "ModelConfig", "RunConfig", "load_run_config"]

DATASET_NAMES = ("synthetic", "mnist", "cifar10")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    data_dir: str | None = None
    train_size: int = 5000
    test_size: int = 1000
    seed: int = 0

    def validate(self):
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"dataset.name must be one of {DATASET_NAMES}, got {self.name!r}")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("dataset sizes must be >= 1")
        return self


@dataclass
class ModelConfig:
    widths: list = field(default_factory=lambda: [6, 12, 24])
    attention_kernel: int = 7

    def validate(self):
        if len(self.widths) != 3 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"model.widths must be three positive ints, got {self.widths}")
        if self.attention_kernel % 2 == 0 or self.attention_kernel < 1:
            raise ConfigError(f"model.attention_kernel must be odd, got {self.attention_kernel}")
        return self


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/out"

    def validate(self):
        self.dataset.validate()
        self.model.validate()
        try:
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def echo(self, directory=None):
        """Write the resolved config into the output directory."""
        directory = Path(self.out_dir if directory is None else directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "attack":
            kwargs[key] = _build(AttackConfig, value, f"{where}.attack")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def run_config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(data) - {"dataset", "model", "train", "out_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig(
        dataset=_build(DatasetConfig, data.get("dataset", {}), "dataset"),
        model=_build(ModelConfig, data.get("model", {}), "model"),
        train=_build(TrainConfig, data.get("train", {}), "train"),
        out_dir=data.get("out_dir", "runs/out"),
    )
    if not isinstance(cfg.out_dir, str) or not cfg.out_dir:
        raise ConfigError("out_dir must be a non-empty string")
    return cfg.validate()


def load_run_config(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return run_config_from_dict(data)

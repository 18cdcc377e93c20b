"""Experiment configuration: one flat, typed, versioned TOML table."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .nn import ConfigurationError
from .phantom import MORPHOLOGIES

CONFIG_VERSION = 1


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0  # test phantom
    out_dir: str = "runs/default"

    # phantom
    phases: int = 2
    size: int = 128
    morphology: str = "lamellar"
    period: float = 0.5
    waviness: float = 0.03
    blob_sigma: float = 4.0
    noise_fraction: float = 0.01
    lambda_scale: float = 2.0
    ill_lambda: float = 20.0
    noise_mode: str = "scaled"

    # library
    p: int = 2040
    library_size: int = 24
    train_per_phase: int = 12
    library_seed: int = 7

    # networks
    network_seed: int = 0
    detector_iter: int = 2000
    detector_learning_rate: float = 3e-4
    classifier_iter: int = 300
    classifier_learning_rate: float = 0.003
    batch_size: int = 32
    momentum: float = 0.9
    calibration_draws: int = 1000

    # ERD training
    train_seeds: list = field(default_factory=lambda: [1001, 1002, 1003, 1004])
    coverage_levels: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4, 0.8])
    samples_per_level: int = 500
    ridge_lambda: float = 1e-6

    # sampling
    initial_fraction: float = 0.01
    stop_fraction: float = 0.15
    n_neighbors: int = 10
    density_radius: int = 4
    snapshot_stride: int = 0
    random_baseline: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"config version {self.version} != {CONFIG_VERSION}")
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            want = {"int": int, "float": (int, float), "str": str, "bool": bool, "list": list}[f.type]
            if not isinstance(value, want) or (f.type in ("int", "float") and isinstance(value, bool)):
                raise ConfigurationError(f"{f.name}: expected {f.type}, got {value!r}")
        if self.phases < 2 or self.size < 8:
            raise ConfigurationError("need phases >= 2 and size >= 8")
        if self.morphology not in MORPHOLOGIES:
            raise ConfigurationError(f"morphology must be one of {MORPHOLOGIES}")
        if not 0 <= self.noise_fraction < 1:
            raise ConfigurationError("noise_fraction must be in [0, 1)")
        if not 2 <= self.train_per_phase < self.library_size:
            raise ConfigurationError("need 2 <= train_per_phase < library_size")
        if not 0 < self.initial_fraction <= self.stop_fraction <= 1:
            raise ConfigurationError("need 0 < initial_fraction <= stop_fraction <= 1")
        if not self.train_seeds:
            raise ConfigurationError("train_seeds is empty")
        if self.seed in self.train_seeds:
            raise ConfigurationError(f"test seed {self.seed} is also a training seed")
        if any(not 0 < c < 1 for c in self.coverage_levels):
            raise ConfigurationError("coverage levels must lie in (0, 1)")
        if self.noise_mode not in ("scaled", "offset"):
            raise ConfigurationError("noise_mode must be 'scaled' or 'offset'")

    def morphology_params(self):
        if self.morphology == "lamellar":
            return {"period": self.period, "waviness": self.waviness}
        if self.morphology == "blobs":
            return {"blob_sigma": self.blob_sigma}
        return {}

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if "version" not in data:
            raise ConfigurationError("config has no version")
        return cls(**data)

    def replace(self, **changes):
        return self.from_dict({**self.to_dict(), **changes})

    def save(self, path):
        Path(path).write_text(tomli_w.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

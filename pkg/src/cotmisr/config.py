"""Experiment configuration: one flat key-value file, canonically printed.

The file format is plain ``key = value`` lines (''#'' comments and blank
lines ignored). The canonical printer emits every known key in sorted
order with round-trippable value formatting, so parse -> print -> parse
is a fixed point and two runs of the same experiment serialize
identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from cotmisr.errors import ConfigError
from cotmisr.model import CotConfig, LrcaConfig, TBlockConfig
from cotmisr.train import TrainConfig

__all__ = ["DataConfig", "ExperimentConfig"]

BAND_CHOICES = ("NIR", "RED", "ALL")


@dataclass
class DataConfig:
    root: str = ""
    band: str = "ALL"
    split_ratio: float = 0.9
    split_seed: int = 0

    def validate(self) -> "DataConfig":
        if self.band not in BAND_CHOICES:
            raise ConfigError(f"data.band must be one of {BAND_CHOICES}, got {self.band!r}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"data.split_ratio must be in (0,1), got {self.split_ratio}")
        return self


@dataclass
class ExperimentConfig:
    model: CotConfig = field(default_factory=CotConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    # key -> (attribute path, type)
    SCHEMA = {
        "model.k": ("model.k", int),
        "model.c_in": ("model.c_in", int),
        "model.c_e": ("model.c_e", int),
        "model.r": ("model.r", int),
        "model.arch": ("model.arch", str),
        "model.use_ca": ("model.lrca.use_ca", bool),
        "model.use_sa": ("model.lrca.use_sa", bool),
        "model.ca_reduction": ("model.lrca.ca_reduction", int),
        "model.sa_kernel": ("model.lrca.sa_kernel", int),
        "model.t_layers": ("model.tblock.layers", int),
        "model.heads": ("model.tblock.heads", int),
        "model.ff_dim": ("model.tblock.ff_dim", int),
        "model.dropout": ("model.tblock.dropout", float),
        "model.pos_tokens": ("model.tblock.pos_tokens", int),
        "train.lr_encoder": ("train.lr_encoder", float),
        "train.lr_cot": ("train.lr_cot", float),
        "train.batch_size": ("train.batch_size", int),
        "train.epochs": ("train.epochs", int),
        "train.max_steps": ("train.max_steps", int),
        "train.seed": ("train.seed", int),
        "train.loss": ("train.loss_kind", str),
        "train.beta1": ("train.beta1", float),
        "train.beta2": ("train.beta2", float),
        "train.eps": ("train.eps", float),
        "train.lr_decay": ("train.lr_decay", float),
        "train.min_clearance": ("train.min_clearance", float),
        "data.root": ("data.root", str),
        "data.band": ("data.band", str),
        "data.split_ratio": ("data.split_ratio", float),
        "data.split_seed": ("data.split_seed", int),
    }

    def _resolve(self, path: str):
        obj = self
        parts = path.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        return obj, parts[-1]

    def get(self, key: str):
        path, _ = self.SCHEMA[key]
        obj, attr = self._resolve(path)
        return getattr(obj, attr)

    def set(self, key: str, raw: str):
        if key not in self.SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        path, typ = self.SCHEMA[key]
        obj, attr = self._resolve(path)
        try:
            if typ is bool:
                if raw not in ("true", "false"):
                    raise ValueError(raw)
                value = raw == "true"
            else:
                value = typ(raw)
        except ValueError:
            raise ConfigError(f"cannot parse {raw!r} as {typ.__name__} for key {key!r}") from None
        setattr(obj, attr, value)

    @staticmethod
    def _format(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def to_text(self) -> str:
        lines = [f"{key} = {self._format(self.get(key))}" for key in sorted(self.SCHEMA)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls(
            model=CotConfig(lrca=LrcaConfig(), tblock=TBlockConfig()),
            train=TrainConfig(),
            data=DataConfig(),
        )
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: configuration file not found")
        return cls.from_text(path.read_text())

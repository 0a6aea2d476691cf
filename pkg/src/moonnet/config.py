"""Experiment configuration: flat key=value files and validation."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

from .attention import GateKind
from .augment import AugmentPackage
from .backbone import ConfigError

__all__ = ["ExperimentConfig", "parse_config_text", "load_config_file", "ConfigError"]

_GATES = {g.value: g for g in GateKind}
_PACKAGES = {"ver1": AugmentPackage.VER1, "ver2": AugmentPackage.VER2,
             "ver3": AugmentPackage.VER3}


@dataclass
class ExperimentConfig:
    design_id: int = 5
    gate: GateKind = GateKind.RESIDUAL_TANH
    width: float = 0.25
    input_size: int = 64
    augment: AugmentPackage = AugmentPackage.VER1
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 4
    epochs: int = 5
    steps_per_epoch: int = 100
    seed: int = 0

    def validate(self):
        if self.input_size % 32:
            raise ConfigError(f"input_size must be a multiple of 32, got {self.input_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0 <= self.design_id <= 6:
            raise ConfigError(f"design_id must be in 0..6, got {self.design_id}")
        if not 0.0 < self.width <= 1.0:
            raise ConfigError(f"width must be in (0, 1], got {self.width}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        return self

    def to_text(self) -> str:
        d = asdict(self)
        d["gate"] = self.gate.value
        d["augment"] = self.augment.name.lower()
        return "\n".join(f"{k}={v}" for k, v in d.items()) + "\n"


_INT_KEYS = {"design_id", "input_size", "batch", "epochs", "steps_per_epoch", "seed"}
_FLOAT_KEYS = {"width", "lr", "momentum"}


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse `key=value` lines (# starts a comment) on top of a base config."""
    cfg = base if base is not None else ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                setattr(cfg, key, int(value))
            elif key in _FLOAT_KEYS:
                setattr(cfg, key, float(value))
            elif key == "gate":
                cfg.gate = _GATES[value]
            elif key == "augment":
                cfg.augment = _PACKAGES[value.lower()]
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except (ValueError, KeyError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from e
    return cfg


def load_config_file(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), base)

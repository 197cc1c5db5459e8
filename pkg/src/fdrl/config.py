"""Training configuration, its INI-style file format and the ablation presets."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

TOGGLES = ("alignment_global", "alignment_local", "disparity_adv", "disparity_orth", "predictor")

# Rows of the ablation table: which loss toggles each system switches off.
ABLATIONS: dict[str, tuple[str, ...]] = {
    "none": (),
    "s0": (),
    "s1": ("alignment_global", "alignment_local", "disparity_adv", "disparity_orth"),
    "s2": ("alignment_global",),
    "s3": ("alignment_local",),
    "s4": ("alignment_global", "alignment_local"),
    "s5": ("disparity_adv", "disparity_orth"),
    "s6": ("predictor",),
}

_SECTIONS = {
    "model": ("d_in", "d", "hidden", "classes", "heads"),
    "loss": ("alpha", "beta", "gamma") + TOGGLES,
    "optim": ("lr", "beta1", "beta2", "eps", "weight_decay", "batch_size", "epochs", "grad_clip"),
    "schedule": ("lambda_schedule", "lambda_value", "lambda_gamma"),
    "run": ("seed", "folds", "select_best"),
}


@dataclass
class TrainConfig:
    # model; d_in / classes of 0 mean "take from the data"
    d_in: int = 0
    d: int = 32
    hidden: int = 0
    classes: int = 0
    heads: int = 4
    # trade-off weights and loss toggles
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 1.0
    alignment_global: bool = True
    alignment_local: bool = True
    disparity_adv: bool = True
    disparity_orth: bool = True
    predictor: bool = True
    # AdamW
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 100
    grad_clip: float = 0.0
    # GRL coefficient: "dann" ramp or "constant"
    lambda_schedule: str = "dann"
    lambda_value: float = 1.0
    lambda_gamma: float = 10.0
    seed: int = 0
    folds: int = 5
    select_best: bool = False

    @property
    def hidden_dim(self):
        return self.hidden or self.d

    @property
    def head_dim(self):
        return self.d // self.heads

    def validate(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"trade-off parameter {name} must be >= 0, got {getattr(self, name)}")
        if self.d <= 0 or self.heads <= 0:
            raise ConfigError("d and heads must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.classes < 0:
            raise ConfigError("classes must be >= 1 (or 0 to take it from the data)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lambda_schedule not in ("dann", "constant"):
            raise ConfigError(f"unknown lambda_schedule {self.lambda_schedule!r}")
        if self.lambda_value < 0:
            raise ConfigError("lambda_value must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        return self

    def term_active(self, term):
        """A loss term runs only when its toggle is on and its weight is nonzero."""
        weight = {
            "alignment_global": self.alpha,
            "alignment_local": self.alpha,
            "disparity_adv": self.beta,
            "disparity_orth": self.beta,
            "predictor": self.gamma,
        }[term]
        return bool(getattr(self, term)) and weight > 0

    def lambda_at(self, progress):
        from .diffcore import dann_lambda
        if self.lambda_schedule == "constant":
            return self.lambda_value
        return dann_lambda(progress, self.lambda_gamma)

    def with_ablation(self, name):
        key = name.lower()
        if key not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        cfg = dataclasses.replace(self, **{t: True for t in TOGGLES})
        return dataclasses.replace(cfg, **{t: False for t in ABLATIONS[key]})

    def to_dict(self):
        return dataclasses.asdict(self)


# Desk-scale preset for the synthetic fixture. The library defaults above
# (lr 1e-5, batch 8, 100 epochs) target pretrained speech/text features and
# barely move a freshly initialised model on 2000 synthetic records.
QUICKSTART = {"d": 32, "heads": 4, "epochs": 50, "batch_size": 32, "lr": 1e-3}


def quickstart_config(**overrides):
    return dataclasses.replace(TrainConfig(), **{**QUICKSTART, **overrides})


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    text = str(raw).strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings; keys may carry a ``section.`` prefix."""
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().split(".")[-1]
        updates[key] = _coerce(key, value)
    return dataclasses.replace(cfg, **updates)


def load_config(path):
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def dump_config(cfg):
    """Serialize to the sectioned key-value text form (stable ordering)."""
    lines = []
    data = cfg.to_dict()
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = data[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    Path(path).write_text(dump_config(cfg), encoding="utf-8")

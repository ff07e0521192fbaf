"""Run configuration: one flat dataclass, loadable from ``key = value`` files.

Precedence is ``--set`` overrides > config file > defaults. Unknown keys and
out-of-range values raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .style_stats import StyleRecallConfig

_CHOICES = {
    "meta_update_mode": ("carry_forward", "literal"),
    "style_source": ("feature", "input"),
    "gap_log_base": ("10", "e"),
    "meta_optimizer": ("sgd", "adam"),
    "fdrt_optimizer": ("adam", "sgd"),
    "dtype": ("float32", "float64"),
    "cons_reduction": ("pixel_mean", "sum"),
    "scenario": ("brats-like", "abdominal-like"),
}


@dataclass
class TrainConfig:
    # meta-learning
    gamma: float = 0.01
    beta: float = 0.005
    epochs_meta: int = 200
    batch_size: int = 8
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    meta_update_mode: str = "carry_forward"
    meta_optimizer: str = "sgd"
    style_source: str = "feature"
    # style statistics and losses
    alpha: float = 0.5
    epsilon: float = 1e-5
    sensitivity: float = 10.0
    margin: float = 1.0
    lam: float = 0.5
    cons_reduction: str = "pixel_mean"
    # augmentation
    num_aug_domains: int = 3
    strength: float = 0.9
    # feedback-driven retraining
    eta: float = 0.01
    epochs_fdrt: int = 100
    max_rounds: int = 3
    plateau_tol: float = 0.002
    fdrt_meta_epochs: int = 1
    gap_log_base: str = "10"
    fdrt_optimizer: str = "adam"
    # module toggles
    mka: bool = True
    metastyle: bool = True
    fdrt: bool = True
    l_align: bool = True
    l_cons: bool = True
    # backbone
    depth: int = 3
    base_channels: int = 16
    dtype: str = "float32"
    # run
    seeds: tuple = (0, 1, 2, 3, 4)
    scenario: str = "brats-like"
    eval_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.gamma >= 0 and self.beta >= 0 and self.eta >= 0, "learning rates must be non-negative")
        need(self.epochs_meta >= 0 and self.epochs_fdrt >= 0, "epoch counts must be non-negative")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(0 < self.lr_decay_factor <= 1 and self.lr_decay_every >= 1, "bad learning-rate decay schedule")
        need(0 <= self.alpha <= 1, "alpha must lie in [0, 1]")
        need(self.epsilon > 0, "epsilon must be positive")
        need(self.sensitivity > 0, "sensitivity must be positive")
        need(self.margin > 0, "margin must be positive")
        need(0 <= self.lam <= 1, "lam must lie in [0, 1]")
        need(self.num_aug_domains >= 1, "num_aug_domains must be >= 1")
        need(0 <= self.strength <= 1, "strength must lie in [0, 1]")
        need(self.max_rounds >= 1, "max_rounds must be >= 1")
        need(self.plateau_tol >= 0, "plateau_tol must be non-negative")
        need(self.fdrt_meta_epochs >= 0, "fdrt_meta_epochs must be non-negative")
        need(self.depth >= 1 and self.base_channels >= 1, "bad backbone size")
        need(len(self.seeds) >= 1, "need at least one seed")
        for key, allowed in _CHOICES.items():
            need(getattr(self, key) in allowed, f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    @property
    def recall(self) -> StyleRecallConfig:
        return StyleRecallConfig(self.alpha, self.epsilon, self.sensitivity)

    def lr_at(self, base: float, epoch: int) -> float:
        return base * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from None
    return raw


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    changes = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse(key, raw, getattr(cfg, key))
    return cfg.replace(**changes)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    if path is not None:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply_overrides(cfg, parse_pairs(text, str(path)))
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value
        cfg = apply_overrides(cfg, pairs)
    return cfg

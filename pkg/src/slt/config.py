"""Training/evaluation configuration and the flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .boxgeom import PerturbConfig
from .tracker import STYLES, TrackerConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class TrainConfig:
    seed: int = 0
    # sequence-level training
    T: int = 24
    k: int = 8
    max_interval: int = 10
    lambda_l1: float = 0.33
    lambda_giou: float = 0.13
    lr: float = 1e-5
    lr_final: float = 1e-6
    epochs: int = 10
    videos_per_epoch: int = 400
    grad_clip: float = 10.0
    freeze_norm_stats: bool = True
    sequence_sampling: bool = True
    sequence_objective: bool = True
    checkpoint_every: int = 50
    # tracker post-processing
    distribution_style: str = "logit-softmax"
    penalty_weight: float = 0.3
    # frame-level pre-training
    pretrain_epochs: int = 3
    pretrain_steps_per_epoch: int = 100
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3
    pretrain_lr_final: float = 2e-4
    flt_lambda_l1: float = 5.0
    flt_lambda_giou: float = 2.0
    perturb_shift: float = 0.3
    perturb_scale: float = 0.25
    positive_frac: float = 0.5
    val_pairs: int = 64

    def __post_init__(self):
        validate(self)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.videos_per_epoch // self.k)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(self.perturb_shift, self.perturb_scale)

    def tracker_config(self, base: TrackerConfig | None = None) -> TrackerConfig:
        base = base or TrackerConfig()
        return dataclasses.replace(
            base, penalty_weight=self.penalty_weight, distribution_style=self.distribution_style
        )


@dataclass
class EvalProtocol:
    interval: int = 1
    thresholds: int = 21
    precision_threshold: float = 20.0

    def __post_init__(self):
        validate(self)


_POSITIVE_INT = {"T", "k", "max_interval", "interval", "pretrain_batch", "checkpoint_every"}
_NON_NEGATIVE = {
    "lambda_l1", "lambda_giou", "lr", "lr_final", "epochs", "videos_per_epoch", "grad_clip",
    "flt_lambda_l1", "flt_lambda_giou", "pretrain_epochs", "pretrain_steps_per_epoch", "pretrain_lr", "pretrain_lr_final",
    "perturb_shift", "perturb_scale", "val_pairs", "precision_threshold",
}


def validate(cfg) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _POSITIVE_INT and v < 1:
            raise ConfigError(f.name, f"must be >= 1, got {v}")
        if f.name in _NON_NEGATIVE and v < 0:
            raise ConfigError(f.name, f"must be >= 0, got {v}")
    if getattr(cfg, "distribution_style", STYLES[0]) not in STYLES:
        raise ConfigError("distribution_style", f"must be one of {STYLES}")
    pw = getattr(cfg, "penalty_weight", 0.0)
    if not 0 <= pw < 1:
        raise ConfigError("penalty_weight", f"must lie in [0, 1), got {pw}")
    if getattr(cfg, "thresholds", 2) < 2:
        raise ConfigError("thresholds", "must be >= 2")
    if not 0 < getattr(cfg, "positive_frac", 0.5) <= 1:
        raise ConfigError("positive_frac", "must lie in (0, 1]")


def _coerce(key: str, typ, raw: str):
    raw = raw.strip()
    if typing.get_origin(typ) is tuple:
        parts = [p for p in raw.strip("()[] ").replace(" ", "").split(",") if p]
        args = typing.get_args(typ)
        types = [args[0]] * len(parts) if len(args) == 2 and args[1] is Ellipsis else list(args)
        if len(types) != len(parts):
            raise ConfigError(key, f"expected {len(types)} comma-separated values, got {raw!r}")
        return tuple(_coerce(key, t, p) for t, p in zip(types, parts))
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def parse_lines(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_lines(Path(path).read_text())


def build(cls, values: dict[str, str], strict: bool = True):
    """Instantiate ``cls`` from string values; unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            if strict:
                raise ConfigError(key, f"unknown key for {cls.__name__}")
            continue
        kwargs[key] = _coerce(key, hints[key], raw)
    return cls(**kwargs)


def split_known(values: dict[str, str], *classes) -> list[dict[str, str]]:
    """Partition ``values`` among ``classes``; keys nobody knows raise."""
    names = [{f.name for f in fields(c)} for c in classes]
    parts = [{} for _ in classes]
    for key, raw in values.items():
        hit = False
        for n, part in zip(names, parts):
            if key in n:
                part[key] = raw
                hit = True
        if not hit:
            raise ConfigError(key, "unknown configuration key")
    return parts


def dump(cfg) -> str:
    lines = [f"# {type(cfg).__name__}"]
    for f in fields(cfg):
        lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"

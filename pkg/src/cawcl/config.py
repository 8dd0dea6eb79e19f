"""Flat ``key = value`` configuration files and the training configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

CAMERA_LOSSES = ("none", "ce", "confusion")
CONTRASTIVE = ("none", "plain", "knn_weighted")
PACES = ("knn", "growth")


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_kv_text(text, str(p))


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool or kind == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int or kind == "int":
            return int(value)
        if kind is float or kind == "float":
            return float(value)
        if kind in ("tuple[int, ...]",):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 24
    lr: float = 3e-4
    lr_decay_epochs: tuple[int, ...] = (10, 20, 30)
    lr_decay: float = 0.1
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 30
    warmup_lr: float = 1e-2
    delta1: float = 1.0
    delta2: float = 0.2
    delta3: float = 1.0
    camera_loss: str = "confusion"
    contrastive: str = "knn_weighted"
    n_clips: int = 2
    n_chunks: int = 4
    pace: str = "knn"
    gamma0: float = 0.1
    alpha: float = 0.1
    knn_k: int = 4
    cluster_k: int = 20
    cluster_eps: float = 0.6
    min_pts: int = 4
    momentum: float = 0.2
    source_keys: bool = True
    temperature: float = 1.0
    d_hidden: int = 32
    feat_dim: int = 16
    grl_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.camera_loss not in CAMERA_LOSSES:
            raise ConfigError(f"camera_loss must be one of {CAMERA_LOSSES}")
        if self.contrastive not in CONTRASTIVE:
            raise ConfigError(f"contrastive must be one of {CONTRASTIVE}")
        if self.pace not in PACES:
            raise ConfigError(f"pace must be one of {PACES}")
        if self.n_clips < 1 or self.n_chunks < 1:
            raise ConfigError("n_clips and n_chunks must be >= 1")
        if min(self.delta1, self.delta2, self.delta3) < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.gamma0 <= 0 or self.alpha < 0:
            raise ConfigError("gamma0 must be > 0 and alpha >= 0")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(kinds))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parsed = {k: _coerce(str(v), kinds[k], k) if isinstance(v, str) else v
                  for k, v in values.items()}
        return dataclasses.replace(base or cls(), **parsed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def default_seed() -> int:
    env = os.environ.get("CAWCL_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"CAWCL_SEED must be an integer, got {env!r}") from None


def load_train_config(path: str | Path | None = None,
                      overrides: Mapping[str, str] | None = None) -> TrainConfig:
    values: dict[str, str] = {}
    if path is not None:
        values.update(read_kv_file(path))
    values.update(overrides or {})
    if "seed" not in values:
        values["seed"] = str(default_seed())
    return TrainConfig.from_mapping(values)

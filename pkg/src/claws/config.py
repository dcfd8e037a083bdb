"""Run configuration: a flat JSON file whose keys mirror the CLI flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .trainer import Toggles, TrainConfig

ABLATION_KEYS = ("rbs", "nsm1", "nsm2", "loss_ts_s", "loss_c")


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get("CLAWS_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CLAWS_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    # paths
    train_manifest: str | None = None
    test_manifest: str | None = None
    annotations: str | None = None
    stats: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    # data
    d: int = 2048
    segment_len: int = 16
    normalize_std: bool = False
    # model
    z1: int = 512
    z2: int = 32
    dropout_rate: float = 0.6
    gate_after_relu: bool = False
    # losses
    lambda1: float = 0.90
    lambda2: float = 8.0e-5
    alpha: float = 1.0
    # optimisation
    total_iters: int = 100_000
    lr: float = 1e-4
    lr_drop_at: int = 80_000
    lr_drop_factor: float = 0.1
    batch_size: int = 64
    rho: float = 0.99
    eps: float = 1e-8
    seed: int = field(default_factory=default_seed)
    cluster_mode: str = "assignment"
    kmeans_iters: int = 100
    clip_norm: float | None = None
    checkpoint_every: int = 0
    # ablation toggles
    rbs: bool = True
    nsm1: bool = True
    nsm2: bool = True
    loss_ts_s: bool = True
    loss_c: bool = True
    # evaluation
    per_video: bool = False

    @classmethod
    def from_file(cls, path) -> RunConfig:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls().updated(doc, source=str(path))

    def updated(self, values: dict, source: str = "overrides") -> RunConfig:
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
        return replace(self, **values)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def toggles(self) -> Toggles:
        return Toggles(self.rbs, self.nsm1, self.nsm2, self.loss_ts_s, self.loss_c)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2, self.alpha)

    def model_config(self, train: bool = False) -> ModelConfig:
        return ModelConfig(self.nsm1, self.nsm2, self.dropout_rate, train, self.gate_after_relu)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            total_iters=self.total_iters, lr=self.lr, lr_drop_at=self.lr_drop_at,
            lr_drop_factor=self.lr_drop_factor, batch_size=self.batch_size, seed=self.seed,
            rho=self.rho, eps=self.eps, dropout_rate=self.dropout_rate, toggles=self.toggles(),
            loss=self.loss_config(), dims=(self.d, self.z1, self.z2), cluster_mode=self.cluster_mode,
            kmeans_iters=self.kmeans_iters, clip_norm=self.clip_norm,
            checkpoint_every=self.checkpoint_every, gate_after_relu=self.gate_after_relu,
        )

    def require_paths(self, *names: str):
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"--{name.replace('_', '-')} is required")
            if not Path(value).exists():
                raise ConfigError(f"{name.replace('_', '-')} does not exist: {value}")


def parse_ablation(items) -> dict[str, bool]:
    """``["nsm1=off", "rbs=on"]`` -> ``{"nsm1": False, "rbs": True}``."""
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in ABLATION_KEYS:
            raise ConfigError(f"bad --ablation {item!r}; expected one of {', '.join(ABLATION_KEYS)}=on|off")
        val = val.strip().lower()
        if val not in ("on", "off"):
            raise ConfigError(f"bad --ablation value {item!r}; use on or off")
        out[key] = val == "on"
    return out

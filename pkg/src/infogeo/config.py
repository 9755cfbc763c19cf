"""Training/model configuration with the desk and paper presets."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, InputError

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    # object-centric learning
    n_slots: int = 8
    iters: int = 3
    slot_dim: int = 64
    decoder: str = "mixture"
    mask_source: str = "clue"
    decoder_hidden: int = 128
    aggregate_mode: str = "mean"
    # structure / augmentation
    r: int = 4
    alpha: float = 0.8
    heads: int = 4
    c_cond: int | None = None
    d_depth: int = 32
    n_rows: int = 4
    mix_depth: int = 2
    rd_form: str = "scaled"
    # features
    grid_size: int = 32
    patch: int = 4
    channels: int = 64
    featurizer_seed: int = 1652
    # objective
    tau: float = 0.1
    lambda1: float = 0.05
    lambda2: float = 0.05
    lambda3: float = 0.85
    symmetric_nce: bool = True
    pairwise_align: bool = True
    # optimization
    lr: float = 1e-2
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 30
    warmup_ratio: float = 0.1
    batch_sampler: str = "fixed"
    train_variants: int = 16
    seed: int = 7
    # ablation switches
    cacs: bool = True
    struct: bool = True
    rd: bool = True
    ocva: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        for name in ("n_slots", "iters", "slot_dim", "decoder_hidden", "heads", "d_depth",
                     "n_rows", "grid_size", "patch", "channels", "batch_size", "epochs",
                     "train_variants"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_slots < 2 and self.ocva and self.struct:
            raise ConfigError("the structural loss needs at least two slots")
        if not 1 <= self.r <= self.n_slots - 1 and self.ocva and self.struct:
            raise ConfigError(f"r={self.r} must lie in [1, K-1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight decay non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if self.grid_size % self.patch:
            raise ConfigError("grid_size must be divisible by patch")
        if self.n_tokens % self.heads:
            raise ConfigError(f"H'*W'={self.n_tokens} not divisible by {self.heads} heads")
        if self.decoder != "mixture":
            raise ConfigError("only the mixture decoder is implemented")
        if self.mask_source not in ("clue", "position"):
            raise ConfigError("mask_source must be 'clue' or 'position'")
        if self.batch_sampler not in ("fixed", "shuffle"):
            raise ConfigError("batch_sampler must be 'fixed' or 'shuffle'")
        if self.rd_form not in ("literal", "scaled"):
            raise ConfigError("rd_form must be 'literal' or 'scaled'")
        if self.aggregate_mode not in ("mean", "sum"):
            raise ConfigError("aggregate_mode must be 'mean' or 'sum'")

    @property
    def side(self) -> int:
        return self.grid_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.side * self.side

    @property
    def cond_dim(self) -> int:
        return self.channels if self.c_cond is None else self.c_cond

    @property
    def descriptor_dim(self) -> int:
        return self.d_depth * self.n_rows

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(preset="desk", **kw)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(preset="paper", n_slots=16, iters=3, slot_dim=1024, channels=768,
                    decoder_hidden=1024, d_depth=1024, n_rows=4, alpha=0.8,
                    lambda1=0.05, lambda2=0.05, lambda3=0.85, lr=6.5e-4, batch_size=8,
                    epochs=40, warmup_ratio=0.1)
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        preset = d.get("preset", "desk")
        if preset == "paper":
            return cls.paper(**{k: v for k, v in d.items() if k != "preset"})
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return f"{zlib.crc32(self.canonical_json().encode('utf-8')):08x}"


def load_config(path: str | Path | None, **overrides) -> TrainConfig:
    """Read a JSON config (or the desk preset when ``path`` is None) and apply overrides."""
    base: dict = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config JSON must be an object")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)

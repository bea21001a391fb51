from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

CONTRASTIVE_MODES = ("adaptive", "plain", "none")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 128
    d_emb: int = 300
    depth: int = 5
    batch_size: int = 32
    lr: float = 3e-4
    epochs: int = 10
    margin: float = 1.0
    o_p: float = 2.0
    o_n: float = 0.0
    tau: int = 3
    conv_width: int = 3
    heads: int = 4
    seed: int = 0
    pairs_per_product: int = 5
    contrastive: str = "adaptive"
    same_product_negatives: bool = False
    attn_residual: bool = True
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.d < 1 or self.d_emb < 1 or self.depth < 0 or self.epochs < 0:
            raise ConfigError("d, d_emb must be positive; depth, epochs nonnegative")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.contrastive not in CONTRASTIVE_MODES:
            raise ConfigError(f"contrastive must be one of {CONTRASTIVE_MODES}")
        if not self.o_p > self.o_n:
            raise ConfigError("o_p must exceed o_n")
        if not 0 <= self.tau <= 4:
            raise ConfigError("tau must lie in [0, 4]")
        if self.margin < 0 or self.lr <= 0 or self.conv_width < 1 or self.pairs_per_product < 1:
            raise ConfigError("margin >= 0, lr > 0, conv_width >= 1, pairs_per_product >= 1 required")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw)

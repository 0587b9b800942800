"""Serializable run configuration.

Configs are JSON documents carrying a versioned ``schema`` field; unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA = "atrous-lab/run-config/v1"
# "block" places a residual adapter on the token stream after a block; the
# others wrap that block's attention projections.
PLACEMENTS = ("block", "q", "k", "v", "proj")


@dataclass
class ModelConfig:
    img_size: int = 64
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    corner_embed_dim: int = 96
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 2
    decoder_mlp_ratio: float = 4.0
    freeze_decoder: bool = False

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def decoder_resolution(self) -> int:
        return self.grid * 4

    def validate(self) -> None:
        if self.img_size <= 0 or self.patch_size <= 0 or self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % 8 or self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_dim {self.decoder_dim} must be divisible by 8 and decoder_heads")
        if self.corner_embed_dim % 4:
            raise ConfigError(f"corner_embed_dim {self.corner_embed_dim} must be divisible by 4")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ConfigError("depth and decoder_depth must be >= 1")


@dataclass
class AdapterConfig:
    placement: list[str] = field(default_factory=lambda: ["block"])
    blocks: list[int] | None = None
    rank: int = 4
    rates: list[int] = field(default_factory=lambda: [1, 6, 12, 18])
    atrous_attention: bool = True

    def validate(self, depth: int) -> None:
        bad = [p for p in self.placement if p not in PLACEMENTS]
        if bad:
            raise ConfigError(f"unknown adapter placement {bad}; choose from {PLACEMENTS}")
        if len(set(self.placement)) != len(self.placement):
            raise ConfigError(f"duplicate adapter placement in {self.placement}")
        if self.blocks is not None and any(not 0 <= b < depth for b in self.blocks):
            raise ConfigError(f"adapter blocks {self.blocks} out of range for depth {depth}")
        if not self.rates or min(self.rates) < 1:
            raise ConfigError(f"dilation rates must be positive, got {self.rates}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")

    def block_indices(self, depth: int) -> list[int]:
        return list(range(depth)) if self.blocks is None else list(self.blocks)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    train_data: str | None = None
    eval_data: str | None = None
    eval_every: int = 0
    bbox_max_shift: int = 5
    threshold: float = 0.5
    hd_spacing: float = 1.0
    schema: str = SCHEMA

    def validate(self) -> "RunConfig":
        if self.schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {self.schema!r}, expected {SCHEMA!r}")
        self.model.validate()
        self.adapter.validate(self.model.depth)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.optim.lr < 0 or self.optim.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.bbox_max_shift < 0:
            raise ConfigError("bbox_max_shift must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optim"]["betas"] = list(self.optim.betas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"model": ModelConfig, "adapter": AdapterConfig, "optim": OptimConfig}
        kwargs = {}
        for key, sub in sections.items():
            if key in d:
                kwargs[key] = _build(sub, d.pop(key), key)
        top = _build(cls, d, "config", partial=True)
        cfg = dataclasses.replace(top, **kwargs)
        if isinstance(cfg.optim.betas, list):
            cfg.optim.betas = tuple(cfg.optim.betas)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _build(klass, values, where: str, partial: bool = False):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return klass(**values)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def desk_config(**changes) -> RunConfig:
    return RunConfig(**changes).validate()


def paper_config() -> RunConfig:
    """ViT-B scale settings; only practical for parameter accounting."""
    return RunConfig(
        model=ModelConfig(img_size=1024, patch_size=16, embed_dim=768, depth=12, heads=12,
                          corner_embed_dim=256, decoder_dim=256, decoder_heads=8,
                          decoder_mlp_ratio=8.0),
        epochs=100,
    ).validate()

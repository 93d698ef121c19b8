"""Dataclass configs and the key-value config-file format."""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    tracts_x: int = 45
    tracts_y: int = 45
    tract_km: float = 14.0
    cell_km: float = 1.25
    channels: int = 8
    features: int = 12
    ref_lon: float = -100.0
    ref_lat: float = 40.0
    # latent order: vision-dominant, tabular-dominant, shared, tabular-only
    length_scales_km: tuple = (30.0, 45.0, 40.0, 50.0)
    bump_density: float = 1.5
    corner_jitter: float = 0.15
    edge_jitter: float = 0.15
    warp: float = 0.3
    rep_jitter_km: float = 0.0
    nuisance_std: float = 0.8
    feature_noise: float = 0.2
    missing_frac: float = 0.0  # fraction of feature entries blanked (median-imputed)
    vision_noise: float = 0.02
    target_noise: float = 0.1
    target_radius_km: float = 20.0
    region_km: float = 80.0
    grid: int = 64
    holdout_frac: float = 0.3  # holdout box side as a fraction of the world side

    @property
    def extent_km(self) -> tuple[float, float]:
        return self.tracts_x * self.tract_km, self.tracts_y * self.tract_km


@dataclass
class ViTConfig:
    patch: int = 8
    grid: int = 64
    channels: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    dec_dim: int = 48
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads or self.dec_dim % self.dec_heads:
            raise ConfigError("token widths must be divisible by head counts")
        if self.grid % self.patch:
            raise ConfigError("grid must be divisible by the patch size")

    @property
    def num_patches(self) -> int:
        return (self.grid // self.patch) ** 2


@dataclass
class TabConfig:
    features: int = 12
    col_dim: int = 16
    col_depth: int = 3
    col_heads: int = 4
    dim: int = 64
    row_depth: int = 2
    row_heads: int = 4
    row_attention: bool = True
    use_encodings: bool = True
    dec_depth: int = 1
    dec_row_attention: bool = True
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.col_dim % self.col_heads or self.dim % self.row_heads:
            raise ConfigError("token widths must be divisible by head counts")


@dataclass
class FusionConfig:
    layers: int = 1
    heads_tab_from_vis: int = 8
    heads_vis_from_tab: int = 2
    d0_km: float = 10.0
    tau_km: float = 25.0
    gain_init: float = 1.0
    use_bias: bool = True
    enabled: bool = True
    mlp_ratio: float = 4.0


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    tab: TabConfig = field(default_factory=TabConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.04
    warmup_epochs: float = 2.0
    epochs: int = 50
    regions_per_epoch: int = 500
    batch_size: int = 16
    vis_mask: float = 0.5
    tab_mask: float = 0.5
    lam: float = 1.0
    beta_cos: float = 0.0
    seed: int = 42
    freeze_vit: bool = True
    val_regions: int = 32

    def __post_init__(self):
        if not (0 < self.vis_mask < 1 and 0 < self.tab_mask < 1):
            raise ConfigError("mask ratios must lie in (0, 1)")
        if self.lam < 0 or self.beta_cos < 0:
            raise ConfigError("loss weights must be non-negative")


def pretrain_defaults() -> TrainConfig:
    return TrainConfig(lr=1e-3, weight_decay=0.05, warmup_epochs=2, epochs=40,
                       regions_per_epoch=500, vis_mask=0.75, beta_cos=1.0, freeze_vit=False)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(*cfgs) -> str:
    blob = json.dumps([to_dict(c) for c in cfgs], sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def from_dict(cls, data: dict):
    """Rebuild a (possibly nested) dataclass; unknown keys are an error."""
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in data.items():
        if k not in names:
            raise ConfigError(f"unknown {cls.__name__} key: {k}")
        ftype = names[k].type
        sub = {"ViTConfig": ViTConfig, "TabConfig": TabConfig,
               "FusionConfig": FusionConfig}.get(ftype if isinstance(ftype, str) else "")
        if sub is not None and isinstance(v, dict):
            v = from_dict(sub, v)
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_kv(lines) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dotted keys nest."""
    out: dict = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(val)
    return out


def read_kv(path) -> dict:
    try:
        return parse_kv(Path(path).read_text().splitlines())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out

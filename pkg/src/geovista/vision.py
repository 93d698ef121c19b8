"""Vision masked autoencoder: patchify, random masking, ViT encoder/decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .config import ViTConfig
from .core import Parameter, Tensor
from .geo import GeoPoint, LocalProjection, PositionEncoder
from .nn import LayerNorm, Linear, Module, TransformerBlock


@dataclass
class VisionGrid:
    """An (H, W, C) raster. Row 0 is the northern edge; ``origin`` is the
    north-west corner and ``projection`` maps planar km to lon/lat."""

    data: np.ndarray
    origin: GeoPoint
    cell_km: float
    projection: LocalProjection

    @property
    def shape(self):
        return self.data.shape

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) lon/lat of every cell centre."""
        h, w = self.data.shape[:2]
        ox, oy = self.projection.to_km(np.array([self.origin.lon, self.origin.lat]))
        xs = ox + (np.arange(w) + 0.5) * self.cell_km
        ys = oy - (np.arange(h) + 0.5) * self.cell_km
        xx, yy = np.meshgrid(xs, ys)
        return self.projection.to_geo(np.stack([xx, yy], axis=-1))

    def patch_centers(self, patch: int) -> np.ndarray:
        """(N_v, 2) lon/lat of every patch centre in row-major patch order."""
        h, w = self.data.shape[:2]
        ox, oy = self.projection.to_km(np.array([self.origin.lon, self.origin.lat]))
        xs = ox + (np.arange(w // patch) + 0.5) * patch * self.cell_km
        ys = oy - (np.arange(h // patch) + 0.5) * patch * self.cell_km
        xx, yy = np.meshgrid(xs, ys)
        return self.projection.to_geo(np.stack([xx.ravel(), yy.ravel()], axis=-1))


@dataclass
class PatchSequence:
    tokens: np.ndarray  # (N_v, P*P*C)
    patch_centers: np.ndarray  # (N_v, 2) lon/lat


@dataclass
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n(self) -> int:
        return len(self.visible) + len(self.masked)


def patchify_array(x: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N_v, P*P*C): row-major patches, then row-major
    pixels within a patch, channels fastest."""
    *lead, h, w, c = x.shape
    if h % patch or w % patch:
        raise ValueError(f"grid {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    y = x.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    y = np.moveaxis(y, nl + 2, nl + 1)
    return y.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify_array(tokens: np.ndarray, h: int, w: int, c: int, patch: int) -> np.ndarray:
    *lead, n, d = tokens.shape
    if n * d != h * w * c or d != patch * patch * c:
        raise ValueError(f"cannot unpatchify {tokens.shape} into {h}x{w}x{c} with P={patch}")
    gh, gw = h // patch, w // patch
    y = tokens.reshape(*lead, gh, gw, patch, patch, c)
    nl = len(lead)
    y = np.moveaxis(y, nl + 1, nl + 2)
    return y.reshape(*lead, h, w, c)


def patchify(grid: VisionGrid, patch: int) -> PatchSequence:
    return PatchSequence(patchify_array(grid.data, patch), grid.patch_centers(patch))


def unpatchify(seq: PatchSequence | np.ndarray, h: int, w: int, c: int, patch: int) -> np.ndarray:
    tokens = seq.tokens if isinstance(seq, PatchSequence) else seq
    return unpatchify_array(np.asarray(tokens), h, w, c, patch)


def sample_mask(n: int, ratio: float, seed=None) -> MaskPlan:
    """Uniformly random split keeping ``n - floor(ratio * n)`` tokens visible.

    ``seed`` may be an int or a numpy Generator.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must lie in (0, 1)")
    n_mask = int(np.floor(ratio * n))
    if n_mask == 0 or n_mask == n:
        raise ValueError(f"ratio {ratio} leaves no masked or no visible token out of {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[n_mask:]), np.sort(perm[:n_mask]), ratio)


class ViT(Module):
    """ViT encoder over visible patches plus a lightweight MAE decoder."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, offset_scale: float = 1.0):
        self.cfg = cfg
        n = cfg.num_patches
        pdim = cfg.patch * cfg.patch * cfg.channels
        self.patch_embed = Linear(pdim, cfg.dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(n, cfg.dim)))
        self.f_vis = PositionEncoder(2, cfg.dim, rng, input_scale=[offset_scale, offset_scale])
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng, cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.decoder = VisionDecoder(cfg, rng)

    def encoder_modules(self) -> list[Module]:
        return [self.patch_embed, self.f_vis, self.norm, *self.blocks]

    def encoder_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if not n.startswith("decoder.")}

    def encode_positions(self, offsets: np.ndarray) -> Tensor:
        return self.f_vis(offsets)

    def encode_visible(self, tokens, visible_idx: np.ndarray, e_vis: Tensor) -> Tensor:
        """(B, N, P^2C) tokens + (B, N, D) e_vis -> (B, k, D) encoded visible."""
        tok = core.gather_rows(core.as_tensor(tokens), visible_idx)
        x = self.patch_embed(tok)
        x = core.add(x, core.take_rows(self.pos, visible_idx))
        x = core.add(x, core.gather_rows(e_vis, visible_idx))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def decode(self, fused: Tensor, visible_idx: np.ndarray, e_vis: Tensor) -> Tensor:
        return self.decoder(fused, visible_idx, e_vis)


class VisionDecoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        n = cfg.num_patches
        self.n = n
        self.embed = Linear(cfg.dim, cfg.dec_dim, rng)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=cfg.dec_dim))
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(n, cfg.dec_dim)))
        self.geo = Linear(cfg.dim, cfg.dec_dim, rng, bias=False)
        self.blocks = [TransformerBlock(cfg.dec_dim, cfg.dec_heads, rng, cfg.mlp_ratio)
                       for _ in range(cfg.dec_depth)]
        self.norm = LayerNorm(cfg.dec_dim)
        self.head = Linear(cfg.dec_dim, cfg.patch * cfg.patch * cfg.channels, rng)

    def __call__(self, fused: Tensor, visible_idx: np.ndarray, e_vis: Tensor) -> Tensor:
        x = core.scatter_with_fill(self.embed(fused), self.mask_token, visible_idx, self.n)
        x = core.add(x, self.pos)
        x = core.add(x, self.geo(e_vis))
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


def vision_loss(pred: Tensor, target: np.ndarray, masked, beta: float = 0.0) -> Tensor:
    """Masked-patch MSE plus ``beta`` times the masked cosine distance."""
    mse = core.masked_mse(pred, target, masked)
    if beta == 0.0:
        return mse
    return core.weighted_sum([(1.0, mse), (beta, core.cosine_distance_loss(pred, target, masked))])

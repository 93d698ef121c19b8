"""Bilateral vision/tabular cross-attention with a gain-scaled distance bias."""

from __future__ import annotations

import numpy as np

from .config import FusionConfig
from .core import Tensor
from .geo import DistanceBiasConfig, build_bias  # noqa: F401  (re-exported)
from .nn import CrossBlock, Module


def cross_attend(q_tokens: Tensor, kv_tokens: Tensor, phi: np.ndarray | None,
                 block: CrossBlock, key_valid: np.ndarray | None = None) -> Tensor:
    if kv_tokens.shape[1] == 0:
        raise ValueError("cross-attention needs at least one context token")
    return block(q_tokens, kv_tokens, phi, key_valid)


class BilateralBlock(Module):
    """vis<-tab and tab<-vis updates computed in parallel from the same inputs."""

    def __init__(self, dim_vis: int, dim_tab: int, cfg: FusionConfig, rng: np.random.Generator):
        self.vis_from_tab = CrossBlock(dim_vis, dim_tab, cfg.heads_vis_from_tab, rng,
                                       cfg.mlp_ratio, cfg.gain_init)
        self.tab_from_vis = CrossBlock(dim_tab, dim_vis, cfg.heads_tab_from_vis, rng,
                                       cfg.mlp_ratio, cfg.gain_init)

    def __call__(self, z_vis: Tensor, z_tab: Tensor, phi_vt: np.ndarray | None,
                 tab_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        phi_tv = None if phi_vt is None else np.swapaxes(phi_vt, -1, -2)
        new_vis = cross_attend(z_vis, z_tab, phi_vt, self.vis_from_tab, tab_valid)
        new_tab = cross_attend(z_tab, z_vis, phi_tv, self.tab_from_vis)
        return new_vis, new_tab


def bilateral_block(z_vis, z_tab, phi_vt, block: BilateralBlock, tab_valid=None):
    return block(z_vis, z_tab, phi_vt, tab_valid)


class BilateralFusion(Module):
    def __init__(self, dim_vis: int, dim_tab: int, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [BilateralBlock(dim_vis, dim_tab, cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, z_vis: Tensor, z_tab: Tensor, phi_vt: np.ndarray | None,
                 tab_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        if not self.cfg.use_bias:
            phi_vt = None
        for layer in self.layers:
            z_vis, z_tab = layer(z_vis, z_tab, phi_vt, tab_valid)
        return z_vis, z_tab

    def tab_from_vis_weights(self, layer: int = -1) -> np.ndarray | None:
        """Last forward's tab<-vis attention, (B, H, N_tab, N_vis)."""
        return self.layers[layer].tab_from_vis.last_weights


def attention_locality_stats(weights: np.ndarray, distances: np.ndarray,
                             radius_km: float, query_valid: np.ndarray | None = None) -> float:
    """Mean over queries of the attention mass on keys within ``radius_km``.

    ``weights`` is (..., Nq, Nk) with rows summing to one; ``distances`` has
    the same trailing shape (or broadcasts to it).
    """
    w = np.asarray(weights, dtype=float)
    near = np.broadcast_to(np.asarray(distances) <= radius_km, w.shape)
    mass = (w * near).sum(axis=-1)
    if query_valid is not None:
        return float(mass[np.broadcast_to(query_valid, mass.shape)].mean())
    return float(mass.mean())


def uniform_locality(distances: np.ndarray, radius_km: float,
                     query_valid: np.ndarray | None = None) -> float:
    """Locality mass a uniform attention distribution would give."""
    d = np.asarray(distances)
    w = np.full(d.shape, 1.0 / d.shape[-1])
    return attention_locality_stats(w, d, radius_km, query_valid)

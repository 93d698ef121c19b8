"""Tabular transformer with column attention, row reduction and row attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .config import TabConfig
from .core import Parameter, Tensor
from .geo import GeoPoint, PositionEncoder, TractPolygon
from .nn import LayerNorm, Linear, Module, TransformerBlock
from .vision import MaskPlan, sample_mask


@dataclass
class TractRecord:
    id: int
    features: np.ndarray
    rep_point: GeoPoint
    polygon: TractPolygon


@dataclass
class TractTable:
    records: list[TractRecord]

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("tract ids must be unique")

    def __len__(self):
        return len(self.records)

    @property
    def features(self) -> np.ndarray:
        return np.stack([r.features for r in self.records])


class FeatureTokenizer(Module):
    """Per-feature affine scalar embedding: token_j = x_j * w_j + b_j."""

    def __init__(self, features: int, dim: int, rng: np.random.Generator):
        lim = 1.0 / np.sqrt(dim)
        self.weight = Parameter(rng.uniform(-lim, lim, size=(features, dim)))
        self.bias = Parameter(rng.uniform(-lim, lim, size=(features, dim)))

    def __call__(self, x) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        w, b = self.weight, self.bias
        out = x[..., None] * w.data + b.data

        def backward(g):
            if w.requires_grad:
                w._accumulate((g * x[..., None]).reshape(-1, *w.shape).sum(axis=0))
            if b.requires_grad:
                b._accumulate(g.reshape(-1, *b.shape).sum(axis=0))

        return core.make_op(out, (w, b), backward)


def tokenize(x, tok: FeatureTokenizer) -> Tensor:
    return tok(x)


def mask_rows(n: int, ratio: float, seed=None) -> MaskPlan:
    """Whole-row masking; same contract as vision patch masking."""
    return sample_mask(n, ratio, seed)


def pad_index(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Ragged index lists -> (B, K) int array padded with -1, and validity."""
    k = max(len(r) for r in rows)
    idx = np.full((len(rows), k), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        idx[i, :len(r)] = r
    return idx, idx >= 0


class TabularTransformer(Module):
    def __init__(self, cfg: TabConfig, rng: np.random.Generator,
                 summary_shift=None, summary_scale=None):
        self.cfg = cfg
        self.tokenizer = FeatureTokenizer(cfg.features, cfg.col_dim, rng)
        self.col_blocks = [TransformerBlock(cfg.col_dim, cfg.col_heads, rng, cfg.mlp_ratio)
                           for _ in range(cfg.col_depth)]
        self.col_norm = LayerNorm(cfg.col_dim)
        self.reduce = Linear(cfg.features * cfg.col_dim, cfg.dim, rng)
        self.f_tab = PositionEncoder(5, cfg.dim, rng, summary_shift, summary_scale)
        self.row_blocks = [TransformerBlock(cfg.dim, cfg.row_heads, rng, cfg.mlp_ratio,
                                            attention=cfg.row_attention)
                           for _ in range(cfg.row_depth)]
        self.norm = LayerNorm(cfg.dim)
        self.decoder = TabularDecoder(cfg, rng)

    def encode_positions(self, summaries: np.ndarray) -> Tensor | None:
        if not self.cfg.use_encodings:
            return None
        return self.f_tab(summaries)

    def column_encode(self, tokens: Tensor) -> Tensor:
        """(B, N, F, Dc) -> (B, N, F, Dc); attention runs within each row."""
        b, n, f, d = tokens.shape
        x = core.reshape(tokens, (b * n, f, d))
        for blk in self.col_blocks:
            x = blk(x)
        return core.reshape(self.col_norm(x), (b, n, f, d))

    def row_reduce(self, z_col: Tensor) -> Tensor:
        b, n, f, d = z_col.shape
        return self.reduce(core.reshape(z_col, (b, n, f * d)))

    def row_encode(self, reduced: Tensor, e_tab: Tensor | None,
                   valid: np.ndarray | None = None) -> Tensor:
        x = reduced if e_tab is None else core.add(reduced, e_tab)
        for blk in self.row_blocks:
            x = blk(x, key_valid=valid)
        return self.norm(x)

    def encode(self, x_vis: np.ndarray, e_tab_rows: Tensor | None,
               valid: np.ndarray | None = None) -> Tensor:
        """Visible rows (B, V, F) -> Z_tab (B, V, D_t)."""
        z = self.column_encode(self.tokenizer(x_vis))
        return self.row_encode(self.row_reduce(z), e_tab_rows, valid)

    def decode(self, fused: Tensor, visible_idx: np.ndarray, n: int,
               e_tab: Tensor | None, valid: np.ndarray | None = None) -> Tensor:
        return self.decoder(fused, visible_idx, n, e_tab, valid)


class TabularDecoder(Module):
    def __init__(self, cfg: TabConfig, rng: np.random.Generator):
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=cfg.dim))
        self.blocks = [TransformerBlock(cfg.dim, cfg.row_heads, rng, cfg.mlp_ratio,
                                        attention=cfg.dec_row_attention)
                       for _ in range(cfg.dec_depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.features, rng)

    def __call__(self, fused: Tensor, visible_idx: np.ndarray, n: int,
                 e_tab: Tensor | None, valid: np.ndarray | None = None) -> Tensor:
        x = core.scatter_with_fill(fused, self.mask_token, visible_idx, n)
        if e_tab is not None:
            x = core.add(x, e_tab)
        for blk in self.blocks:
            x = blk(x, key_valid=valid)
        return self.head(self.norm(x))


class TabularMAE(Module):
    """Row-independent tabular MAE used by the late-fusion baseline.

    With no row or vision context a whole masked row cannot be recovered,
    so this model masks individual feature tokens instead (a learned mask
    token per feature position) and reconstructs the full row from its
    reduced latent.
    """

    def __init__(self, cfg: TabConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tokenizer = FeatureTokenizer(cfg.features, cfg.col_dim, rng)
        self.feature_mask = Parameter(rng.normal(0.0, 0.02, size=(cfg.features, cfg.col_dim)))
        self.col_blocks = [TransformerBlock(cfg.col_dim, cfg.col_heads, rng, cfg.mlp_ratio)
                           for _ in range(cfg.col_depth)]
        self.col_norm = LayerNorm(cfg.col_dim)
        self.reduce = Linear(cfg.features * cfg.col_dim, cfg.dim, rng)
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.features, rng)

    def latent(self, x: np.ndarray, feature_masked: np.ndarray | None = None) -> Tensor:
        """(N, F) rows -> (N, D_t) latents; masked features use the mask token."""
        tok = self.tokenizer(x)
        if feature_masked is not None:
            keep = (~feature_masked)[..., None].astype(float)
            tok = core.add(core.mul(tok, Tensor(np.broadcast_to(keep, tok.shape))),
                           core.mul(Tensor(np.broadcast_to(1.0 - keep, tok.shape)),
                                    _tile(self.feature_mask, tok.shape)))
        n, f, d = tok.shape
        z = tok
        for blk in self.col_blocks:
            z = blk(z)
        z = self.col_norm(z)
        return self.norm(self.reduce(core.reshape(z, (n, f * d))))

    def __call__(self, x: np.ndarray, feature_masked: np.ndarray) -> Tensor:
        return self.head(self.latent(x, feature_masked))


def _tile(p: Parameter, shape) -> Tensor:
    out = np.broadcast_to(p.data, shape).copy()

    def backward(g):
        p._accumulate(g.reshape(-1, *p.shape).sum(axis=0))

    return core.make_op(out, (p,), backward)

"""Layers built on :mod:`geovista.core`: linear maps, norms, MLPs, attention."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core
from .core import Parameter, Tensor


class Module:
    """Parameter container. Parameters are discovered from attributes."""

    training_frozen: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, p in own.items():
            if n in state:
                if state[n].shape != p.shape:
                    raise core.ShapeError(f"{n}: {state[n].shape} != {p.shape}")
                p.data[...] = state[n]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = core.matmul(x, self.weight)
        return core.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return core.layer_norm(x, self.gain, self.shift, self.eps)


class MLP(Module):
    """Two affine layers with a GELU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(core.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return core.transpose(core.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return core.reshape(core.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def key_padding_bias(key_valid: np.ndarray | None, n_query: int) -> np.ndarray | None:
    """(B, Nk) validity mask -> additive (B, 1, Nq, Nk) constant bias."""
    if key_valid is None:
        return None
    bias = np.where(key_valid, 0.0, core.NEG_INF)[:, None, None, :]
    return np.broadcast_to(bias, (key_valid.shape[0], 1, n_query, key_valid.shape[1]))


class Attention(Module):
    """Multi-head attention from ``dim_q`` queries onto ``dim_kv`` context.

    Key/value projections map the context into the query width, so the two
    token spaces may differ. The optional ``spatial`` bias (B, Nq, Nk) is
    scaled per head by a learnable gain and added to the logits.
    """

    def __init__(self, dim_q: int, dim_kv: int, heads: int, rng: np.random.Generator,
                 spatial_gain: bool = False, gain_init: float = 1.0):
        if dim_q % heads:
            raise ValueError(f"width {dim_q} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim_q, dim_q, rng)
        self.k = Linear(dim_kv, dim_q, rng)
        self.v = Linear(dim_kv, dim_q, rng)
        self.out = Linear(dim_q, dim_q, rng)
        self.gains = Parameter(np.full(heads, gain_init)) if spatial_gain else None
        self.last_weights: np.ndarray | None = None

    def __call__(self, xq: Tensor, xkv: Tensor, spatial: np.ndarray | None = None,
                 key_valid: np.ndarray | None = None) -> Tensor:
        b, nq, _ = xq.shape
        nk = xkv.shape[1]
        if nk == 0:
            raise ValueError("attention needs at least one key")
        q = split_heads(self.q(xq), self.heads)
        k = split_heads(self.k(xkv), self.heads)
        v = split_heads(self.v(xkv), self.heads)
        dh = q.shape[-1]
        logits = core.scale(core.matmul(q, core.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        pad = key_padding_bias(key_valid, nq)
        if spatial is not None and self.gains is not None:
            logits = core.add(logits, head_scaled_bias(np.asarray(spatial), self.gains))
        if pad is not None:
            logits = core.add(logits, Tensor(np.broadcast_to(pad, logits.shape)))
        weights = core.softmax(logits)
        self.last_weights = weights.data
        return self.out(merge_heads(core.matmul(weights, v)))


def head_scaled_bias(phi: np.ndarray, gains: Tensor) -> Tensor:
    """``gains[h] * phi[b, q, k]`` -> (B, H, Nq, Nk); gradient flows to gains."""
    out = phi[:, None, :, :] * gains.data[None, :, None, None]

    def backward(g):
        gains._accumulate((g * phi[:, None, :, :]).sum(axis=(0, 2, 3)))

    return core.make_op(out, (gains,), backward)


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(LN x)`` then ``x + mlp(LN x)``.

    With ``attention=False`` the attention sublayer is absent and tokens are
    processed independently.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, attention: bool = True):
        self.norm1 = LayerNorm(dim) if attention else None
        self.attn = Attention(dim, dim, heads, rng) if attention else None
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng)

    def __call__(self, x: Tensor, key_valid: np.ndarray | None = None) -> Tensor:
        if self.attn is not None:
            h = self.norm1(x)
            x = core.add(x, self.attn(h, h, key_valid=key_valid))
        return core.add(x, self.mlp(self.norm2(x)))


class CrossBlock(Module):
    """Query tokens attend to context tokens of the other modality.

    ``x + attn(LN q, LN kv, gains * phi)`` followed by ``x + ffn(LN x)``.
    """

    def __init__(self, dim_q: int, dim_kv: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, gain_init: float = 1.0):
        self.norm_q = LayerNorm(dim_q)
        self.norm_kv = LayerNorm(dim_kv)
        self.attn = Attention(dim_q, dim_kv, heads, rng, spatial_gain=True, gain_init=gain_init)
        self.norm_ff = LayerNorm(dim_q)
        self.ffn = MLP(dim_q, int(dim_q * mlp_ratio), dim_q, rng)

    @property
    def gains(self) -> Parameter:
        return self.attn.gains

    def __call__(self, xq: Tensor, xkv: Tensor, phi: np.ndarray | None,
                 key_valid: np.ndarray | None = None) -> Tensor:
        x = core.add(xq, self.attn(self.norm_q(xq), self.norm_kv(xkv), spatial=phi,
                                   key_valid=key_valid))
        return core.add(x, self.ffn(self.norm_ff(x)))

    @property
    def last_weights(self) -> np.ndarray | None:
        return self.attn.last_weights

"""Dense float64 tensors with a reverse-mode gradient tape.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient (and grad mode is on) the op records a closure that pushes the
output gradient back into its inputs. ``Tensor.backward`` walks the tape in
reverse topological order and then discards it.

Broadcasting is deliberately narrow: the second operand of ``add`` may have
a shape equal to a trailing suffix of the first operand's shape (bias and
positional-table addition). Everything else requires equal shapes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -1e9  # additive logit for keys that must receive zero attention

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_owns_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owns_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # the first incoming gradient may be shared with other nodes, so it is
        # only copied when a second contribution arrives
        if self.grad is None:
            self.grad = np.asarray(g, dtype=DTYPE)
            self._owns_grad = False
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # the tape lives for one pass only; leaves keep their .grad
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None

    # operator sugar for the ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of an op; record ``backward`` if needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _sum_to_suffix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_suffix(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible")


# ----------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(_sum_to_suffix(g, b.shape))

    return make_op(a.data + b.data, (a, b), backward)


add_bias = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-_sum_to_suffix(g, b.shape))

    return make_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(_sum_to_suffix(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c)

    return make_op(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; a 2-D ``b`` is shared across a's batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return make_op(a.data @ b.data, (a, b), backward)


# --------------------------------------------------------------- elementwise

GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return make_op(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - t * t))

    return make_op(t, (x,), backward)


# ------------------------------------------------------------- normalisation

def softmax_with_bias(logits: Tensor, bias: Tensor | np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` may be a Tensor (gradient flows into it) or a constant array; its
    shape must equal a trailing suffix of the logits shape.
    """
    logits = as_tensor(logits)
    z = logits.data
    bias_t = None
    if bias is not None:
        bias_t = as_tensor(bias)
        _check_suffix(logits, bias_t, "softmax_with_bias")
        z = z + bias_t.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        if logits.requires_grad:
            logits._accumulate(gz)
        if bias_t is not None and bias_t.requires_grad:
            bias_t._accumulate(_sum_to_suffix(gz, bias_t.shape))

    parents = (logits,) if bias_t is None else (logits, bias_t)
    return make_op(s, parents, backward)


def softmax(logits: Tensor) -> Tensor:
    return softmax_with_bias(logits, None)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_sum_to_suffix(g * xhat, gain.shape))
        if shift.requires_grad:
            shift._accumulate(_sum_to_suffix(g, shift.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d))

    return make_op(out, (x, gain, shift), backward)


# ------------------------------------------------------------------ structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return make_op(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return make_op(np.transpose(x.data, axes), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=ax)):
            if x.requires_grad:
                x._accumulate(piece)

    return make_op(np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: ``x[b, idx[b, i]]`` for ``x`` of shape (B, N, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(x.shape[0])[:, None]
    out = x.data[b, idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (b, idx), g)
        x._accumulate(full)

    return make_op(out, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather from a shared table: ``x[idx]`` for ``x`` of shape (N, ...)."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return make_op(x.data[idx], (x,), backward)


def scatter_with_fill(visible: Tensor, fill: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place ``visible[b, i]`` at row ``idx[b, i]`` of an (B, n, D) output;
    every other row takes the shared ``fill`` vector (the mask token).

    ``idx`` entries equal to -1 are padding and are ignored.
    """
    idx = np.asarray(idx, dtype=np.int64)
    bsz, k, d = visible.shape
    out = np.broadcast_to(fill.data, (bsz, n, d)).copy()
    occupied = np.zeros((bsz, n), dtype=bool)
    bi, ki = np.nonzero(idx >= 0)
    out[bi, idx[bi, ki]] = visible.data[bi, ki]
    occupied[bi, idx[bi, ki]] = True

    def backward(g):
        if visible.requires_grad:
            gv = np.zeros_like(visible.data)
            gv[bi, ki] = g[bi, idx[bi, ki]]
            visible._accumulate(gv)
        if fill.requires_grad:
            fill._accumulate(g[~occupied].sum(axis=0))

    return make_op(out, (visible, fill), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return make_op(np.array(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return make_op(np.array(x.data.mean()), (x,), backward)


def weighted_sum(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    terms = list(terms)
    out = sum(w * t.data for w, t in terms)

    def backward(g):
        for w, t in terms:
            if t.requires_grad:
                t._accumulate(g * w)

    return make_op(np.asarray(out, dtype=DTYPE), [t for _, t in terms], backward)


# -------------------------------------------------------------------- losses

def _mask_matrix(mask, lead_shape: tuple[int, ...]) -> np.ndarray:
    """Normalise a mask to a boolean array over the token axes.

    Accepts an index collection (single sample, shape (N, d) inputs) or a
    boolean array shaped like the leading axes.
    """
    m = np.asarray(mask)
    if m.dtype == bool:
        if m.shape != lead_shape:
            raise ShapeError(f"mask shape {m.shape} != token shape {lead_shape}")
        out = m
    else:
        if len(lead_shape) != 1:
            raise ShapeError("index masks apply to single-sample (N, d) inputs")
        out = np.zeros(lead_shape, dtype=bool)
        idx = m.astype(np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= lead_shape[0]):
            raise IndexError("mask index out of range")
        out[idx] = True
    counts = out.reshape(-1, out.shape[-1]).sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("empty mask: masked reconstruction loss is undefined")
    return out


def _masked_mean(err: np.ndarray, m: np.ndarray):
    """Per-sample mean of ``err`` over masked tokens, then mean over samples.

    Returns the scalar and the weight array d(loss)/d(err).
    """
    d = err.shape[-1]
    flat = m.reshape(-1, m.shape[-1])
    per_sample = flat.sum(axis=-1) * d
    w = flat / per_sample[:, None] / flat.shape[0]
    w = w.reshape(m.shape)[..., None]
    return float((err * w).sum()), w


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != t.shape:
        raise ShapeError(f"pred {pred.shape} vs target {t.shape}")
    m = _mask_matrix(mask, pred.shape[:-1])
    diff = pred.data - t
    val, w = _masked_mean(diff * diff, m)

    def backward(g):
        pred._accumulate(g * 2.0 * diff * w)

    return make_op(np.array(val), (pred,), backward)


def masked_l1(pred: Tensor, target, mask) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != t.shape:
        raise ShapeError(f"pred {pred.shape} vs target {t.shape}")
    m = _mask_matrix(mask, pred.shape[:-1])
    diff = pred.data - t
    val, w = _masked_mean(np.abs(diff), m)

    def backward(g):
        pred._accumulate(g * np.sign(diff) * w)

    return make_op(np.array(val), (pred,), backward)


def cosine_distance_loss(pred: Tensor, target, mask, eps: float = 1e-8) -> Tensor:
    """Mean over masked rows of ``1 - cos(pred_i, target_i)``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != t.shape:
        raise ShapeError(f"pred {pred.shape} vs target {t.shape}")
    m = _mask_matrix(mask, pred.shape[:-1])
    p = pred.data
    pn = np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), eps)
    tn = np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), eps)
    cos = (p * t).sum(axis=-1, keepdims=True) / (pn * tn)
    flat = m.reshape(-1, m.shape[-1])
    w = (flat / flat.sum(axis=-1, keepdims=True) / flat.shape[0]).reshape(m.shape)[..., None]
    val = float(((1.0 - cos) * w).sum())

    def backward(g):
        # d cos / d p = t/(|p||t|) - cos * p/|p|^2
        dcos = t / (pn * tn) - cos * p / (pn * pn)
        pred._accumulate(-g * w * dcos)

    return make_op(np.array(val), (pred,), backward)


# ----------------------------------------------------------- gradient checks

def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    The error for each parameter is ``||g_tape - g_fd|| / max(||g_tape||,
    ||g_fd||, floor * g_max)`` over the probed entries, where ``g_max`` is
    the largest tape-gradient norm among ``params`` (at least 1). Entries are
    subsampled to ``max_entries`` per parameter when given. The floor keeps
    parameters whose true gradient is identically zero (an attention key
    bias, say) from turning difference noise into a relative error of one.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    scale = floor * max([1.0] + [float(np.linalg.norm(g)) for g in analytic])
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n)
            if max_entries is not None and n > max_entries:
                idx = rng.choice(n, size=max_entries, replace=False)
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * h)
            ana = ga.reshape(-1)[idx]
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), scale)
            worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    for p in params:
        p.grad = None
    return worst

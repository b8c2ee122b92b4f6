"""Fused differentiable functions built on :mod:`mixreorg.numerics.tensor`."""

from __future__ import annotations

import math
import warnings

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make

CE_EPS = 1e-8
NORM_EPS = 1e-12
DEBUG = False

_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward, "softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"logsumexp over empty axis {axis}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.data if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx_hat = g * w if w is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gw = (g * xhat).sum(axis=lead) if weight is not None else None
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight if weight is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0))
    return make(out.astype(xd.dtype, copy=False), parents, backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make(out, (x,), backward, "gelu")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    xd = x.data
    raw = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if DEBUG and (raw < eps).any():
        warnings.warn("l2_normalize: zero-norm vector floored to epsilon", RuntimeWarning, stacklevel=2)
    floored = raw < eps
    norm = np.maximum(raw, eps)
    out = xd / norm

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(floored, g / norm, (g - out * proj) / norm),)

    return make(out, (x,), backward, "l2_normalize")


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return make(table.data[ids], (table,), backward, "embed_lookup")


def cross_entropy(p: Tensor, q_onehot, axis: int = -1, eps: float = CE_EPS) -> Tensor:
    """Mean over non-``axis`` positions of ``-sum(q * log p)``.

    ``log`` is taken of ``(p + eps) / (1 + eps)`` so exact zeros in ``p`` stay
    finite and a perfect prediction costs exactly zero.
    """
    q = q_onehot.data if isinstance(q_onehot, Tensor) else np.asarray(q_onehot)
    if q.shape != p.shape:
        raise ShapeError(f"cross_entropy shapes differ: {p.shape} vs {q.shape}")
    pd = p.data
    count = pd.size // pd.shape[axis]
    logp = np.log((pd + eps) / (1.0 + eps))
    val = -(q * logp).sum() / count

    def backward(g):
        return (-g * q / ((pd + eps) * count),)

    return make(np.asarray(val, dtype=pd.dtype), (p,), backward, "cross_entropy")


def gumbel_softmax_st(
    logits: Tensor,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    axis: int = -1,
    hard: bool = True,
) -> Tensor:
    """Straight-through Gumbel-softmax.

    Forward returns the one-hot argmax of ``logits + gumbel`` (or the soft
    relaxation when ``hard`` is false); backward always uses the gradient of
    ``softmax((logits + gumbel) / temperature)``.  ``rng=None`` disables noise.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    noisy = logits.data
    if rng is not None:
        u = rng.random(logits.shape)
        gumbel = -np.log(-np.log(u + 1e-20) + 1e-20)
        noisy = noisy + gumbel.astype(logits.dtype)
    z = noisy / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=axis, keepdims=True)

    if hard:
        idx = np.expand_dims(np.argmax(noisy, axis=axis), axis)
        out = np.zeros_like(soft)
        np.put_along_axis(out, idx, 1.0, axis=axis)
    else:
        out = soft

    def backward(g):
        return (soft * (g - (g * soft).sum(axis=axis, keepdims=True)) / temperature,)

    return make(out, (logits,), backward, "gumbel_softmax_st")


def gather_positions(x: Tensor, source: np.ndarray) -> Tensor:
    """``out[b, i] = x[source[b, i], i]`` for every position ``i``.

    When every column of ``source`` is a permutation the backward pass is the
    inverse gather; otherwise gradients are scatter-added.
    """
    source = np.asarray(source)
    if source.shape != x.shape[:2]:
        raise ShapeError(f"index shape {source.shape} does not match leading dims of {x.shape}")
    cols = np.arange(source.shape[1])[None, :]
    b = source.shape[0]
    inverse = None
    sorted_cols = np.sort(source, axis=0)
    if (sorted_cols == np.arange(b)[:, None]).all():
        inverse = np.empty_like(source)
        np.put_along_axis(inverse, source, np.arange(b)[:, None].repeat(source.shape[1], 1), axis=0)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        if inverse is not None:
            return (g[inverse, cols],)
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (source, np.broadcast_to(cols, source.shape)), g)
        return (full,)

    return make(x.data[source, cols], (x,), backward, "gather_positions")


def one_hot(indices, depth: int, dtype=None) -> np.ndarray:
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (depth,), dtype=dtype or np.float64)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


__all__ = [
    "softmax",
    "logsumexp",
    "log_softmax",
    "layer_norm",
    "gelu",
    "l2_normalize",
    "embed_lookup",
    "cross_entropy",
    "gumbel_softmax_st",
    "gather_positions",
    "one_hot",
    "linear",
    "as_tensor",
]

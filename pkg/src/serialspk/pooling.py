"""Temporal aggregation: plain, attentive, and self-attentive statistics pooling.

All poolers take frames shaped ``[T, d]`` or ``[B, T, d]`` and reduce the
time axis (second from last).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import DenseParams, Module, dense, param
from .tensor import Tensor

# float32 softmax over long utterances drifts further from 1
WEIGHT_SUM_TOL = {np.dtype(np.float64): 1e-6, np.dtype(np.float32): 1e-4}


@dataclass
class PoolingStats:
    mu: Tensor
    sigma: Tensor

    def concat(self) -> Tensor:
        return tn.concat([self.mu, self.sigma], axis=-1)


def _check_frames(h: Tensor) -> None:
    if h.ndim < 2:
        raise tn.ShapeError(f"expected frames [..., T, d], got {h.shape}")
    if h.shape[-2] == 0:
        raise tn.ShapeError("pooling over zero frames")


def statistics_pool(h: Tensor) -> PoolingStats:
    _check_frames(h)
    mu = tn.mean(h, axis=-2)
    second = tn.mean(h * h, axis=-2)
    return PoolingStats(mu, tn.sqrt(second - mu * mu))


def weighted_stats(h: Tensor, alpha: Tensor) -> PoolingStats:
    """Weighted mean and standard deviation of frames under weights ``alpha[..., T]``."""
    _check_frames(h)
    if alpha.shape != h.shape[:-1]:
        raise tn.ShapeError(f"weights {alpha.shape} do not match frames {h.shape}")
    a = alpha.data
    tol = WEIGHT_SUM_TOL.get(a.dtype, 1e-6)
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1, dtype=np.float64) - 1) > tol):
        raise ValueError("attention weights must be nonnegative and sum to 1")
    w = tn.broadcast_to(tn.reshape(alpha, alpha.shape + (1,)), h.shape)
    mu = tn.sum(w * h, axis=-2)
    second = tn.sum(w * (h * h), axis=-2)
    return PoolingStats(mu, tn.sqrt(second - mu * mu))


class AttentiveStatParams(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.hidden = DenseParams(d, hidden, rng, dtype=dtype)
        self.v = param((rng.uniform(-1, 1, size=(hidden, 1)) * np.sqrt(3.0 / hidden)).astype(dtype))
        self.k = param(np.zeros(1, dtype=dtype))


def attentive_scores(h: Tensor, p: AttentiveStatParams) -> Tensor:
    e = tn.matmul(tn.relu(dense(h, p.hidden)), p.v)
    e = tn.reshape(e, e.shape[:-1])
    return e + tn.broadcast_to(p.k, e.shape)


def attentive_stats_pool(h: Tensor, p: AttentiveStatParams) -> PoolingStats:
    _check_frames(h)
    return weighted_stats(h, tn.softmax_over_time(attentive_scores(h, p)))


class SelfAttentivePoolParams(Module):
    def __init__(self, key_in: int, d_k: int, rng: np.random.Generator, dtype=np.float64):
        self.d_k = d_k
        self.key = DenseParams(key_in, d_k, rng, dtype=dtype)
        self.q = param((rng.uniform(-1, 1, size=d_k) * np.sqrt(3.0 / d_k)).astype(dtype))


def dot_attention(keys: Tensor, q: Tensor) -> Tensor:
    """Softmax over time of ``q . k_t / sqrt(d_k)``; ``q`` is ``[d_k]`` or one query per batch row."""
    d_k = keys.shape[-1]
    if q.ndim == keys.ndim - 1:
        q = tn.reshape(q, q.shape[:-1] + (1, d_k))
    scores = tn.sum(keys * tn.broadcast_to(q, keys.shape), axis=-1)
    return tn.softmax_over_time(scores * (1.0 / math.sqrt(d_k)))


def self_attentive_pool(h: Tensor, p: SelfAttentivePoolParams, key_input: Tensor | None = None) -> PoolingStats:
    """Attention with a learned constant query; values are ``h`` itself.

    ``key_input`` lets keys come from a different layer than the values.
    """
    _check_frames(h)
    src = h if key_input is None else key_input
    if src.shape[:-1] != h.shape[:-1]:
        raise tn.ShapeError(f"key source {src.shape} does not align with values {h.shape}")
    alpha = dot_attention(dense(src, p.key), p.q)
    return weighted_stats(h, alpha)

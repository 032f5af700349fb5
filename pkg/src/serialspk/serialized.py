"""Serialized multi-layer attention: stacked input-aware self-attention and feed-forward blocks.

Each layer emits one utterance-level head from its weighted statistics; the
heads of all layers are summed into the embedding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .layers import DenseParams, Module, NormParams, batch_norm, dense, layer_norm
from .pooling import PoolingStats, dot_attention, statistics_pool, weighted_stats
from .tensor import Tensor


class SerializedLayerParams(Module):
    def __init__(self, d: int, d_k: int, d_ff: int, d_emb: int, rng: np.random.Generator, dtype=np.float64):
        self.d, self.d_k, self.d_ff, self.d_emb = d, d_k, d_ff, d_emb
        self.attn_norm = NormParams(d, dtype=dtype)
        self.W_q = DenseParams(2 * d, d_k, rng, bias=False, dtype=dtype)
        self.W_k = DenseParams(d, d_k, rng, bias=False, dtype=dtype)
        self.residual_affine = DenseParams(d, d, rng, dtype=dtype)
        self.head_affine = DenseParams(2 * d, d_emb, rng, dtype=dtype)
        self.ffw_norm = NormParams(d, dtype=dtype)
        self.ffw1 = DenseParams(d, d_ff, rng, dtype=dtype)
        self.ffw2 = DenseParams(d_ff, d, rng, dtype=dtype)


class SerializedStackParams(Module):
    def __init__(self, num_layers: int, d: int, d_k: int, d_ff: int, d_emb: int, rng: np.random.Generator,
                 dropout: float = 0.1, dtype=np.float64):
        if num_layers < 1:
            raise ValueError("serialized stack needs at least one layer")
        if not 0 <= dropout < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {dropout}")
        self.layers = [SerializedLayerParams(d, d_k, d_ff, d_emb, rng, dtype) for _ in range(num_layers)]
        self.out_norm = NormParams(d_emb, dtype=dtype, running=True)
        self.dropout = dropout
        self.d_emb = d_emb


def input_aware_query(h: Tensor, W_q: DenseParams) -> Tensor:
    """Query projected from the utterance's own mean and standard deviation."""
    return dense(statistics_pool(h).concat(), W_q)


def self_attention_module(h: Tensor, p: SerializedLayerParams, training: bool = False,
                          rng: np.random.Generator | None = None, dropout: float = 0.0
                          ) -> tuple[Tensor, PoolingStats]:
    x = layer_norm(h, p.attn_norm)
    q = input_aware_query(x, p.W_q)
    alpha = dot_attention(dense(x, p.W_k), q)
    stats = weighted_stats(x, alpha)
    r = tn.dropout(dense(stats.mu, p.residual_affine), dropout, rng, training)
    # one residual vector per utterance, added to each of its frames
    r = tn.reshape(r, r.shape[:-1] + (1, r.shape[-1]))
    return h + tn.broadcast_to(r, h.shape), stats


def feed_forward_module(h: Tensor, p: SerializedLayerParams, training: bool = False,
                        rng: np.random.Generator | None = None, dropout: float = 0.0) -> Tensor:
    x = layer_norm(h, p.ffw_norm)
    y = dense(tn.relu(dense(x, p.ffw1)), p.ffw2)
    return h + tn.dropout(y, dropout, rng, training)


def serialized_heads(h: Tensor, p: SerializedStackParams, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Sum of the per-layer heads (the extractable speaker embedding)."""
    if h.ndim < 2 or h.shape[-2] == 0:
        raise tn.ShapeError(f"serialized stack needs at least one frame, got {h.shape}")
    total = None
    for layer in p.layers:
        h, stats = self_attention_module(h, layer, training, rng, p.dropout)
        h = feed_forward_module(h, layer, training, rng, p.dropout)
        head = dense(stats.concat(), layer.head_affine)
        total = head if total is None else total + head
    return total


def serialized_embed(h: Tensor, p: SerializedStackParams, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Head sum passed through ReLU and batch norm, as fed to the classifier."""
    return batch_norm(tn.relu(serialized_heads(h, p, training, rng)), p.out_norm, training)


def layer_param_count(d: int, d_k: int, d_ff: int, d_emb: int) -> dict[str, int]:
    """Closed-form trainable-scalar count of one serialized layer, by component."""
    return {
        "attn_norm": 2 * d,
        "W_q": d_k * 2 * d,
        "W_k": d_k * d,
        "residual_affine": d * d + d,
        "head_affine": d_emb * 2 * d + d_emb,
        "ffw_norm": 2 * d,
        "ffw1": d_ff * d + d_ff,
        "ffw2": d * d_ff + d,
    }

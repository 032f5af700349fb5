"""Neural building blocks over :mod:`serialspk.tensor`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = tn.SQRT_EPS


class Module:
    """Parameter container; attributes that are Tensors with ``requires_grad`` are parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class DenseParams(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float64, zero: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        w = np.zeros((out_dim, in_dim), dtype=dtype) if zero else glorot(rng, out_dim, in_dim, dtype)
        self.W = param(w)
        self.b = param(np.zeros(out_dim, dtype=dtype)) if bias else None


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """Affine map ``x W^T + b`` along the trailing axis."""
    if x.shape[-1] != p.in_dim:
        raise tn.ShapeError(f"dense: input trailing dim {x.shape[-1]} != {p.in_dim}")
    y = tn.matmul(x, tn.transpose(p.W))
    if p.b is not None:
        y = y + tn.broadcast_to(p.b, y.shape)
    return y


class NormParams(Module):
    def __init__(self, dim: int, dtype=np.float64, running: bool = False):
        self.dim = dim
        self.gain = param(np.ones(dim, dtype=dtype))
        self.bias = param(np.zeros(dim, dtype=dtype))
        if running:
            self.running_mean = np.zeros(dim, dtype=dtype)
            self.running_var = np.ones(dim, dtype=dtype)


def _affine(xhat: Tensor, p: NormParams) -> Tensor:
    return xhat * tn.broadcast_to(p.gain, xhat.shape) + tn.broadcast_to(p.bias, xhat.shape)


def layer_norm(x: Tensor, p: NormParams, eps: float = LN_EPS) -> Tensor:
    """Normalize each position over the feature axis, then apply gain and bias."""
    mu = tn.broadcast_to(tn.mean(x, axis=-1, keepdims=True), x.shape)
    xc = x - mu
    var = tn.mean(xc * xc, axis=-1, keepdims=True)
    std = tn.sqrt(var, eps)
    xhat = xc * tn.broadcast_to(tn.reciprocal(std), x.shape)
    return _affine(xhat, p)


def batch_norm(x: Tensor, p: NormParams, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Normalize each feature over every leading axis (batch and, if present, time).

    In training mode the running statistics are blended in with ``momentum``;
    evaluation mode uses the running statistics alone.
    """
    C = x.shape[-1]
    if C != p.dim:
        raise tn.ShapeError(f"batch_norm: feature dim {C} != {p.dim}")
    if not training:
        scale = (1.0 / np.sqrt(p.running_var + eps)).astype(x.dtype)
        shift = (-p.running_mean * scale).astype(x.dtype)
        xhat = x * Tensor(np.broadcast_to(scale, x.shape)) + Tensor(np.broadcast_to(shift, x.shape))
        return _affine(xhat, p)
    n = x.data.size // C
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 rows per feature")
    flat = tn.reshape(x, (n, C))
    mu = tn.mean(flat, axis=0, keepdims=True)
    xc = flat - tn.broadcast_to(mu, flat.shape)
    var = tn.mean(xc * xc, axis=0, keepdims=True)
    std = tn.sqrt(var, eps)
    xhat = xc * tn.broadcast_to(tn.reciprocal(std), flat.shape)
    p.running_mean *= 1 - momentum
    p.running_mean += momentum * mu.data.reshape(-1)
    p.running_var *= 1 - momentum
    p.running_var += momentum * var.data.reshape(-1)
    return _affine(tn.reshape(xhat, x.shape), p)


class Dropout:
    """Dropout bound to the model's shared generator."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return tn.dropout(x, self.rate, self.rng, training)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    return tn.dropout(x, rate, rng, training)


class TdnnLayerParams(Module):
    def __init__(self, in_dim: int, out_dim: int, context: Sequence[int], rng: np.random.Generator,
                 activation: bool = True, dtype=np.float64):
        context = [int(c) for c in context]
        if not context or any(b <= a for a, b in zip(context, context[1:])):
            raise ValueError(f"context offsets must be non-empty and strictly increasing: {context}")
        self.context = tuple(context)
        self.activation = activation
        self.affine = DenseParams(in_dim * len(context), out_dim, rng, dtype=dtype)
        self.norm = NormParams(out_dim, dtype=dtype, running=True) if activation else None


def tdnn_forward(x: Tensor, p: TdnnLayerParams, training: bool) -> Tensor:
    """Spliced affine over ``[B, T, C]`` frames, then ReLU and batch norm unless disabled."""
    if x.ndim == 2:
        return tn.reshape(tdnn_forward(tn.reshape(x, (1,) + x.shape), p, training), x.shape[:1] + (p.affine.out_dim,))
    if x.shape[1] == 0:
        raise tn.ShapeError("tdnn_forward on zero frames")
    spliced = x if p.context == (0,) else tn.splice(x, p.context)
    y = dense(spliced, p.affine)
    if p.activation:
        y = batch_norm(tn.relu(y), p.norm, training)
    return y


def cross_entropy_softmax(logits: Tensor, labels) -> Tensor:
    return tn.cross_entropy(logits, labels)

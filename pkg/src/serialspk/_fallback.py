"""Pure-NumPy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def splice_forward(x, offsets):
    B, T, C = x.shape
    K = len(offsets)
    out = np.empty((B, T, K * C), dtype=x.dtype)
    t = np.arange(T)
    for k, o in enumerate(offsets):
        idx = np.clip(t + o, 0, T - 1)
        out[:, :, k * C:(k + 1) * C] = x[:, idx, :]
    return out


def splice_backward(grad, offsets, T):
    B, _, KC = grad.shape
    K = len(offsets)
    C = KC // K
    gx = np.zeros((B, T, C), dtype=grad.dtype)
    for k, o in enumerate(offsets):
        g = grad[:, :, k * C:(k + 1) * C]
        o = int(o)
        # interior frames map one-to-one onto a shifted slice
        lo, hi = max(0, -o), min(T, T - o)
        if lo < hi:
            gx[:, lo + o:hi + o, :] += g[:, lo:hi, :]
        if lo > 0:
            gx[:, 0, :] += g[:, :min(lo, T), :].sum(axis=1)
        if hi < T:
            gx[:, T - 1, :] += g[:, max(hi, 0):, :].sum(axis=1)
    return gx


def sliding_mean(x, window):
    T = x.shape[0]
    half_lo = (window - 1) // 2
    half_hi = window // 2
    csum = np.zeros((T + 1,) + x.shape[1:], dtype=np.float64)
    np.cumsum(x, axis=0, dtype=np.float64, out=csum[1:])
    t = np.arange(T)
    lo = np.maximum(t - half_lo, 0)
    hi = np.minimum(t + half_hi + 1, T)
    counts = (hi - lo).reshape((T,) + (1,) * (x.ndim - 1))
    return ((csum[hi] - csum[lo]) / counts).astype(x.dtype)

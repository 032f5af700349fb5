# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: TDNN frame splicing (and its adjoint) and windowed means."""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _splice_fwd(const real[:, :, ::1] x, const long long[::1] offsets, real[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], C = x.shape[2], K = offsets.shape[0]
    cdef Py_ssize_t b, t, k, c, src
    with nogil:
        for b in range(B):
            for t in range(T):
                for k in range(K):
                    src = t + offsets[k]
                    if src < 0:
                        src = 0
                    elif src >= T:
                        src = T - 1
                    for c in range(C):
                        out[b, t, k * C + c] = x[b, src, c]


def _splice_bwd(const real[:, :, ::1] g, const long long[::1] offsets, real[:, :, ::1] gx):
    cdef Py_ssize_t B = gx.shape[0], T = gx.shape[1], C = gx.shape[2], K = offsets.shape[0]
    cdef Py_ssize_t b, t, k, c, dst
    with nogil:
        for b in range(B):
            for t in range(T):
                for k in range(K):
                    dst = t + offsets[k]
                    if dst < 0:
                        dst = 0
                    elif dst >= T:
                        dst = T - 1
                    for c in range(C):
                        gx[b, dst, c] += g[b, t, k * C + c]


def _sliding_mean(const real[:, ::1] x, Py_ssize_t window, real[:, ::1] out):
    cdef Py_ssize_t T = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t half_lo = (window - 1) // 2, half_hi = window // 2
    cdef Py_ssize_t t, j, lo = 0, hi = 0, new_lo, new_hi
    cdef double[::1] acc = np.zeros(D, dtype=np.float64)
    with nogil:
        for t in range(T):
            new_lo = t - half_lo
            if new_lo < 0:
                new_lo = 0
            new_hi = t + half_hi + 1
            if new_hi > T:
                new_hi = T
            while hi < new_hi:
                for j in range(D):
                    acc[j] += x[hi, j]
                hi += 1
            while lo < new_lo:
                for j in range(D):
                    acc[j] -= x[lo, j]
                lo += 1
            for j in range(D):
                out[t, j] = <real>(acc[j] / (hi - lo))


def splice_forward(x, offsets):
    x = np.ascontiguousarray(x)
    offs = np.ascontiguousarray(offsets, dtype=np.int64)
    B, T, C = x.shape
    out = np.empty((B, T, offs.shape[0] * C), dtype=x.dtype)
    _splice_fwd(x, offs, out)
    return out


def splice_backward(grad, offsets, T):
    grad = np.ascontiguousarray(grad)
    offs = np.ascontiguousarray(offsets, dtype=np.int64)
    B = grad.shape[0]
    C = grad.shape[2] // offs.shape[0]
    gx = np.zeros((B, T, C), dtype=grad.dtype)
    _splice_bwd(grad, offs, gx)
    return gx


def sliding_mean(x, window):
    x = np.ascontiguousarray(x)
    shape = x.shape
    x2 = x.reshape(shape[0], -1)
    out = np.empty_like(x2)
    _sliding_mean(x2, window, out)
    return out.reshape(shape)

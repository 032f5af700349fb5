"""The compiled kernels and the NumPy fallback must agree exactly."""

import numpy as np
import pytest

from serialspk import _fallback, kernels

try:
    from serialspk import _kernels
except ImportError:  # extension not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def reference_splice(x, offsets):
    B, T, C = x.shape
    out = np.zeros((B, T, len(offsets) * C), dtype=x.dtype)
    for t in range(T):
        for k, o in enumerate(offsets):
            out[:, t, k * C:(k + 1) * C] = x[:, min(max(t + o, 0), T - 1)]
    return out


@pytest.mark.parametrize("impl", [_fallback, pytest.param(_kernels, marks=needs_ext)])
@pytest.mark.parametrize("T", [1, 2, 5, 13])
@pytest.mark.parametrize("offsets", [[0], [-2, -1, 0, 1, 2], [-3, 0, 3], [-7, 4]])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_splice_against_reference(impl, T, offsets, dtype, rng):
    x = rng.normal(size=(2, T, 3)).astype(dtype)
    out = impl.splice_forward(x, np.array(offsets))
    np.testing.assert_array_equal(out, reference_splice(x, offsets))
    g = rng.normal(size=out.shape).astype(dtype)
    # adjoint identity <splice(x), g> == <x, splice^T(g)>
    gx = impl.splice_backward(g, np.array(offsets), T)
    np.testing.assert_allclose((out * g).sum(), (x * gx).sum(), rtol=1e-5 if dtype == np.float32 else 1e-12)


@needs_ext
def test_backends_agree(rng):
    x = rng.normal(size=(4, 50, 8))
    offs = np.array([-2, 0, 2])
    np.testing.assert_array_equal(_kernels.splice_forward(x, offs), _fallback.splice_forward(x, offs))
    g = rng.normal(size=(4, 50, 24))
    np.testing.assert_allclose(_kernels.splice_backward(g, offs, 50), _fallback.splice_backward(g, offs, 50),
                               rtol=1e-13)
    y = rng.normal(size=(60, 5))
    for w in (1, 2, 3, 300):
        np.testing.assert_allclose(_kernels.sliding_mean(y, w), _fallback.sliding_mean(y, w), rtol=1e-12)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")

"""Hot-loop kernels: compiled extension when built, NumPy fallback otherwise.

Set ``SERIALSPK_PURE=1`` before import to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"

if not os.environ.get("SERIALSPK_PURE"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

splice_forward = _impl.splice_forward
splice_backward = _impl.splice_backward
sliding_mean = _impl.sliding_mean

__all__ = ["BACKEND", "splice_forward", "splice_backward", "sliding_mean"]

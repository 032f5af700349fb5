"""Compare the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from serialspk import _fallback

try:
    from serialspk import _kernels
except ImportError:
    _kernels = None

CASES = [
    # (label, B, T, C, offsets)
    ("desk tdnn1", 32, 200, 26, (-2, -1, 0, 1, 2)),
    ("desk tdnn2", 32, 200, 128, (-2, 0, 2)),
    ("paper tdnn3", 8, 400, 512, (-3, 0, 3)),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'fallback ms':>12}{'compiled ms':>12}{'speedup':>9}")
    rows = []
    for label, B, T, C, offsets in CASES:
        x = rng.normal(size=(B, T, C)).astype(np.float32)
        g = rng.normal(size=(B, T, len(offsets) * C)).astype(np.float32)
        rows.append((f"splice fwd {label}", lambda m, x=x, o=offsets: m.splice_forward(x, o)))
        rows.append((f"splice bwd {label}", lambda m, g=g, o=offsets, T=T: m.splice_backward(g, o, T)))
    for T in (500, 5000):
        x = rng.normal(size=(T, 26))
        rows.append((f"sliding mean T={T}", lambda m, x=x: m.sliding_mean(x, 300)))
    for name, fn in rows:
        ref = bench(lambda: fn(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:<28}{ref:>12.3f}{'-':>12}{'-':>9}")
            continue
        fast = bench(lambda: fn(_kernels), args.repeat)
        np.testing.assert_allclose(fn(_kernels), fn(_fallback), rtol=1e-5, atol=1e-5)
        print(f"{name:<28}{ref:>12.3f}{fast:>12.3f}{ref / fast:>8.1f}x")


if __name__ == "__main__":
    main()

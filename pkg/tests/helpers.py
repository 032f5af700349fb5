import numpy as np

from serialspk import tensor as tn
from serialspk.tensor import Tensor


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def grad_error(build, inputs):
    """Worst relative error of backprop vs central differences over all ``inputs``."""
    for t in inputs:
        t.grad = None
    build().backward()
    worst = 0.0
    for t in inputs:
        num = tn.numerical_grad(build, t)
        got = np.zeros_like(num) if t.grad is None else t.grad
        worst = max(worst, tn.rel_error(num, got))
    return worst


def check_grad(build, inputs, tol=1e-5):
    err = grad_error(build, inputs)
    assert err < tol, f"gradient mismatch: rel error {err:.3e}"


def weighted_sum(y: Tensor, rng) -> Tensor:
    """Random linear functional of ``y`` so every output entry gets a distinct weight."""
    return tn.sum(y * Tensor(rng.normal(size=y.shape)))

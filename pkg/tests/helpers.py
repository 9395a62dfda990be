"""Shared independent oracles for the test suite.

Everything here is deliberately naive (finite differences, per-element
loops, exhaustive enumeration) so it cannot share a failure mode with the
library code it checks.
"""

import numpy as np

from kaseq.tensor import Tensor


def finite_difference_grad(make_loss, values, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. one ndarray.

    ``make_loss`` maps an ndarray to a float and must be a pure function;
    it is re-evaluated 2 * values.size times.
    """
    values = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(values)
    flat = values.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = make_loss(values)
        flat[i] = orig - h
        down = make_loss(values)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def autodiff_grad(build_loss, values):
    """Gradient of ``build_loss`` (Tensor -> scalar Tensor) at ``values``."""
    leaf = Tensor(np.asarray(values, dtype=np.float64).copy(), requires_grad=True)
    loss = build_loss(leaf)
    loss.backward()
    return leaf.grad


def rel_err(a, b):
    """Scale-aware gradient discrepancy: max |a-b| over max(1, max |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(b))) if b.size else 0.0)
    return float(np.max(np.abs(a - b))) / denom if a.size else 0.0


def check_grad(build_loss, values, h=1e-5, tol=1e-6):
    """Assert autodiff and central finite differences agree on one input."""
    values = np.asarray(values, dtype=np.float64)
    g_ad = autodiff_grad(build_loss, values)

    def numeric_loss(arr):
        return build_loss(Tensor(arr.copy())).item()

    g_fd = finite_difference_grad(numeric_loss, values, h=h)
    err = rel_err(g_ad, g_fd)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.1e}"
    return err

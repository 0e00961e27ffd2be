"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(f, x, eps=1e-3):
    """Central differences of scalar ``f`` at array ``x`` (evaluated without a graph)."""
    x = np.array(x, copy=True)
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def analytic_grad(f, x):
    t = Tensor(np.array(x, copy=True), requires_grad=True)
    out = f(t)
    if out.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    if not out.requires_grad:
        return np.zeros_like(t.data, dtype=np.float64)
    backward(out)
    return np.asarray(t.grad, dtype=np.float64)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def grad_check(f, x, eps=1e-3):
    """Max elementwise relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``x`` may be a Tensor or array;
    pass float64 data for a meaningful check at small tolerances.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    a = analytic_grad(f, data)
    n = numerical_grad(f, data, eps)
    err = relative_error(a, n)
    return float(err.max()) if err.size else 0.0

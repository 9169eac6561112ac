"""Shared test helpers: finite-difference gradient oracle and friends."""

from __future__ import annotations

import numpy as np

from stepreuse.tensor import Tape, Tensor, backward
from stepreuse.nn import Parameter


def finite_diff_grad(fn, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn at x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def autodiff_grad(op, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of sum(op(x) * weight) w.r.t. x."""
    from stepreuse import tensor as T

    p = Parameter(x.copy(), "x")
    with Tape():
        loss = T.tensor_sum(op(p) * Tensor(weight))
        backward(loss)
    return p.grad.copy()


def check_grad(op, x: np.ndarray, rng: np.random.Generator, rel_tol=1e-4, h=1e-5):
    """Assert reverse-mode gradient of sum(op(x)*w) matches central FD."""
    weight = rng.standard_normal(np.asarray(op(Tensor(x)).data).shape)
    analytic = autodiff_grad(op, x, weight)

    def scalar(xv):
        return float((op(Tensor(xv)).data * weight).sum())

    numeric = finite_diff_grad(scalar, x.copy(), h=h)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    rel_err = np.abs(analytic - numeric).max() / scale
    assert rel_err < rel_tol, f"gradient mismatch: rel err {rel_err:.3e}"
    return rel_err

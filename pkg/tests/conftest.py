"""Shared test helpers: central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from fusionhash.autodiff import Tensor


def finite_difference(param: Tensor, scalar_fn, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar_fn() w.r.t. param, in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    grad_flat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = scalar_fn()
        flat[i] = orig - eps
        lo = scalar_fn()
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(numeric - analytic).max() / scale)


def check_gradient(param: Tensor, scalar_fn, tol: float, eps: float = 1e-6) -> float:
    """Assert backprop matches finite differences for one parameter.

    scalar_fn must rebuild the graph and return the loss as a float; the
    caller runs backward() beforehand so param.grad holds the analytic
    gradient.
    """
    assert param.grad is not None, "parameter has no gradient"
    numeric = finite_difference(param, scalar_fn, eps=eps)
    err = rel_error(numeric, param.grad)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.0e}"
    return err

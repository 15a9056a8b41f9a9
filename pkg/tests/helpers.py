"""Shared test utilities: the finite-difference gradient oracle.

The oracle is independent of the autodiff path: it re-evaluates the
scalar forward function under central perturbations of each parameter.
"""

import numpy as np


def numeric_grad(fn, param, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. a Tensor parameter."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = fn()
        flat[k] = orig - eps
        fm = fn()
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error, relative where the scale exceeds 1."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build_loss, params, eps: float = 1e-5, tol: float = 1e-4) -> float:
    """Backward build_loss() once, then compare every param grad to the oracle."""
    loss = build_loss()
    for p in params:
        p.grad = None
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: build_loss().item(), p, eps=eps)
        worst = max(worst, rel_err(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol}"
    return worst

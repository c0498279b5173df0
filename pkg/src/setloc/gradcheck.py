"""Finite-difference verification of reverse-mode gradients.

The check compares the analytic gradient of a scalar function against central
differences, coordinate by coordinate, and reports the worst relative error
|analytic - numeric| / max(1, |analytic| + |numeric|).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor, backward


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and
    central differences (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps).

    ``f`` must be deterministic; it is evaluated 2*x.size + 1 times.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"eps must lie in [1e-7, 1e-4], got {eps}")

    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("f is non-finite at the base point")
    backward(out)
    analytic = (
        probe.grad.ravel() if probe.grad is not None else np.zeros(probe.data.size)
    )

    flat = probe.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + eps
        f_plus = f(Tensor(shifted.reshape(x.shape))).item()
        shifted[i] = flat[i] - eps
        f_minus = f(Tensor(shifted.reshape(x.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"f is non-finite at probe coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())

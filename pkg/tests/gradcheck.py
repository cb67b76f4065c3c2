"""Central finite-difference gradient checking, independent of the autodiff path."""

from __future__ import annotations

import numpy as np

DEFAULT_H = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL = 1e-6


def fd_entry(fn, tensor, flat_index: int, h: float = DEFAULT_H) -> float:
    """Central difference of scalar fn() w.r.t. one entry of a leaf tensor."""
    orig = tensor.data.flat[flat_index]
    tensor.data.flat[flat_index] = orig + h
    f_plus = fn()
    tensor.data.flat[flat_index] = orig - h
    f_minus = fn()
    tensor.data.flat[flat_index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def grad_matches(analytic: float, numeric: float) -> bool:
    """Relative error < 1e-4; near-zero pairs fall back to an absolute check."""
    denom = max(abs(analytic), abs(numeric))
    if denom < SMALL:
        return abs(analytic - numeric) < ABS_TOL
    return abs(analytic - numeric) / denom < REL_TOL


def check_tensor_grad(fn, tensor, indices=None, h: float = DEFAULT_H) -> list[str]:
    """Compare tensor.grad against finite differences of fn() entry by entry.

    ``fn`` recomputes the scalar loss from current leaf values; the analytic
    gradient must already be stored on the tensor. Returns mismatch messages.
    """
    assert tensor.grad is not None, "tensor has no gradient"
    if indices is None:
        indices = range(tensor.data.size)
    problems = []
    for idx in indices:
        numeric = fd_entry(fn, tensor, idx, h)
        analytic = float(tensor.grad.flat[idx])
        if not grad_matches(analytic, numeric):
            problems.append(f"entry {idx}: analytic {analytic:.8g} vs numeric {numeric:.8g}")
    return problems

"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6,
                     indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param``.

    Entries outside ``indices`` (when given) are left at zero.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    targets = range(flat.size) if indices is None else [np.ravel_multi_index(i, param.shape) for i in indices]
    with no_grad():
        for j in targets:
            old = flat[j]
            flat[j] = old + h
            up = fn().item()
            flat[j] = old - h
            down = fn().item()
            flat[j] = old
            grad.reshape(-1)[j] = (up - down) / (2 * h)
    return grad


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error between backprop and central differences for each named parameter.

    With ``max_entries`` set, only a random subset of entries of large
    parameters is differenced and compared.
    """
    names = list(params)
    analytic = analytic_gradients(fn, [params[n] for n in names])
    rng = np.random.default_rng(seed)
    errors = {}
    for name, a in zip(names, analytic):
        p = params[name]
        if max_entries is not None and p.size > max_entries:
            flat_idx = rng.choice(p.size, size=max_entries, replace=False)
            idx = [np.unravel_index(j, p.shape) for j in flat_idx]
            num = numeric_gradient(fn, p, h, idx)
            errors[name] = relative_error(a.reshape(-1)[flat_idx], num.reshape(-1)[flat_idx])
        else:
            errors[name] = relative_error(a, numeric_gradient(fn, p, h))
    return errors

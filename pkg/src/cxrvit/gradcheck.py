"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(
    fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5, indices: Optional[np.ndarray] = None
) -> np.ndarray:
    """d fn() / d tensor by central differences, perturbing ``tensor.data`` in place.

    With ``indices`` (flat positions) only those entries are differenced; the
    rest of the returned gradient is zero.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size) if indices is None else indices:
            orig = flat[i]
            flat[i] = orig + step
            plus = fn().data.sum()
            flat[i] = orig - step
            minus = fn().data.sum()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two max-magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[int, float]:
    """Relative error per tensor index between tape and finite-difference gradients.

    ``fn`` must rebuild the graph from ``tensors`` on every call; its output is
    reduced by summation. ``max_entries`` caps the number of differenced
    coordinates per tensor (sampled with ``rng``).
    """
    for t in tensors:
        t.zero_grad()
    out = fn()
    backward(out.sum() if out.size != 1 else out)
    errors = {}
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(t.size, size=max_entries, replace=False))
            numeric = numerical_grad(fn, t, step, idx).reshape(-1)[idx]
            errors[i] = relative_error(analytic.reshape(-1)[idx], numeric)
        else:
            errors[i] = relative_error(analytic, numerical_grad(fn, t, step))
    return errors

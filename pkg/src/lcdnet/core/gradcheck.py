"""Central finite-difference oracle for the analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad, reset_tape


def _scalar(f, *args) -> float:
    with no_grad():
        v = f(*args)
    val = float(np.asarray(v.data if isinstance(v, Tensor) else v).reshape(()))
    if not np.isfinite(val):
        raise NonFiniteError(f"function returned {val}")
    return val


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
                      wrt: Optional[Sequence[Tensor]] = None,
                      max_elements: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max over elements of |analytic - central difference| / max(1, |central difference|).

    ``f`` maps ``x`` to a scalar tensor. By default the gradient with respect
    to ``x`` is checked; pass ``wrt`` to check other leaves that ``f`` closes
    over (parameters) as well. ``max_elements`` caps how many coordinates per
    tensor are perturbed, chosen uniformly with ``rng``.
    """
    if x.dtype != np.float64:
        raise TypeError("finite-difference checks must run in float64")
    leaves = [x] + list(wrt or [])
    saved_flags = [t.requires_grad for t in leaves]
    for t in leaves:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    reset_tape()
    try:
        out = f(x)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("function returned non-finite value")
        backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    finally:
        for t, flag in zip(leaves, saved_flags):
            t.requires_grad = flag
        reset_tape()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, grad in zip(leaves, analytic):
        flat = t.data.reshape(-1)  # view: perturbs t in place
        n = flat.size
        idx = np.arange(n) if max_elements is None or n <= max_elements \
            else rng.choice(n, size=max_elements, replace=False)
        gflat = grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, x)
            flat[i] = orig - h
            fm = _scalar(f, x)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    for t in leaves:
        t.grad = None
    return float(worst)

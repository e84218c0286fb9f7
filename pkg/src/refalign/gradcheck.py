"""Finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Compare autodiff against central differences.

    ``f`` must map a tensor to a scalar. Returns the max over elements of
    |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-8). ``eps`` must be in [1e-4, 1e-2];
    the finite-difference evaluations run in float64 to avoid drowning the
    comparison in float32 rounding.
    """
    if not (1e-4 <= eps <= 1e-2):
        raise ValueError(f"eps {eps} outside [1e-4, 1e-2]")

    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("grad_check target must return a scalar")
    out.backward()
    g_ad = probe.grad.astype(np.float64).reshape(-1)

    base = x.data.copy()
    g_fd = np.zeros(base.size, np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(base)).item())
        step_up = float(flat[i])  # realized float32 step, not the nominal eps
        flat[i] = orig - eps
        lo = float(f(Tensor(base)).item())
        step_down = float(flat[i])
        flat[i] = orig
        g_fd[i] = (hi - lo) / (step_up - step_down)

    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_ad) + np.abs(g_fd) + 1e-8)))

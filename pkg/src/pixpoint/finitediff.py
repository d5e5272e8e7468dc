"""Central finite-difference gradient checking for the autodiff engine.

All models run in float64, so a step of ``h = 1e-5`` leaves roughly five
significant digits in the central difference -- comfortably inside the 1e-4
relative-error budget the checks are held to.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad

DEFAULT_STEP = 1e-5
# relative error is measured against max(|fd|, |ad|, FLOOR) so that near-zero
# gradients are compared absolutely rather than blowing up the ratio
DENOM_FLOOR = 1e-6


def finite_difference_gradient(build_loss: Callable[[], Tensor], param: Tensor,
                               h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of ``build_loss()`` w.r.t. one tensor.

    ``build_loss`` must rebuild the forward graph from current tensor values
    on every call (graphs are single-use).
    """
    base = param.data.copy()
    fd = np.zeros_like(base)
    flat_param = param.data.reshape(-1)
    flat_fd = fd.reshape(-1)
    with no_grad():
        for i in range(flat_param.size):
            saved = flat_param[i]
            flat_param[i] = saved + h
            up = float(build_loss().data)
            flat_param[i] = saved - h
            down = float(build_loss().data)
            flat_param[i] = saved
            flat_fd[i] = (up - down) / (2.0 * h)
    param.data[...] = base
    return fd


def max_relative_error(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                       h: float = DEFAULT_STEP) -> float:
    """Worst relative disagreement between backprop and finite differences.

    Runs one reverse pass, then perturbs every scalar entry of every tensor in
    ``params``.  Gradients already stored on the tensors are cleared first.
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    worst = 0.0
    for p in params:
        auto = np.zeros_like(p.data) if p.grad is None else p.grad
        fd = finite_difference_gradient(build_loss, p, h=h)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(auto)), DENOM_FLOOR)
        err = float(np.max(np.abs(fd - auto) / denom))
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst

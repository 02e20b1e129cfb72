"""Finite-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument
from .tensor import Tape, Tensor, backward, recording, zero_grads

# Elements whose analytic and numeric gradients are both below this floor are
# compared absolutely; everything above is compared relatively.
_REL_FLOOR = 1e-6


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``fn`` evaluates the scalar loss from the current contents of ``params``.
    Central differences (f(p+h) - f(p-h)) / 2h are compared elementwise to a
    single reverse-mode sweep.
    """
    if h <= 0:
        raise InvalidArgument("h must be positive")
    zero_grads(params)
    tape = Tape()
    with recording(tape):
        loss = fn()
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(g_fd), abs(gflat[i]), _REL_FLOOR)
            worst = max(worst, abs(g_fd - gflat[i]) / denom)
    return worst

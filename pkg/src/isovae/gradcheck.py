"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def numeric_grad(fn, t: Tensor, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().data)
        flat[i] = old - h
        down = float(fn().data)
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return float(np.linalg.norm(a - b))
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, params: list[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` must rebuild the scalar loss from ``params`` on every call.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numeric_grad(fn, p, h)))
    return worst

"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import GradTape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of the scalar ``fn()`` w.r.t. ``t``."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = float(fn().data)
        flat[j] = orig - eps
        down = float(fn().data)
        flat[j] = orig
        grad.reshape(-1)[j] = (up - down) / (2 * eps)
    return grad


def directional_grad(fn: Callable[[], Tensor], t: Tensor, direction: np.ndarray, eps: float = 1e-5) -> float:
    orig = t.data.copy()
    t.data = orig + eps * direction
    up = float(fn().data)
    t.data = orig - eps * direction
    down = float(fn().data)
    t.data = orig
    return (up - down) / (2 * eps)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    mode: str = "full",
    seed: int = 0,
) -> dict[int, float]:
    """Relative error between tape and finite-difference gradients per input.

    ``mode="full"`` perturbs every element; ``mode="directional"`` compares a
    single random-direction derivative per input, which scales to large
    parameter tensors. Inputs must be double precision.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in double precision")
        t.requires_grad = True
    with GradTape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for k, t in enumerate(inputs):
        analytic = grads[t]
        if mode == "full":
            errors[k] = relative_error(analytic, numeric_grad(fn, t, eps))
        else:
            d = rng.standard_normal(t.shape)
            errors[k] = relative_error(np.sum(analytic * d), directional_grad(fn, t, d, eps))
    return errors

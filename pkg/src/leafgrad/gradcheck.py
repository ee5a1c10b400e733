"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, get_tape


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)`` over the flattened arrays."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Perturb ``t.data`` entry by entry and difference the scalar ``fn()``."""
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    get_tape().reset()
    return grad


def analytic_grads(fn: Callable[[], Tensor], tensors: Iterable[Tensor]) -> list[np.ndarray]:
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    get_tape().reset()
    backward(fn())
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(fn: Callable[[], Tensor], named: dict[str, Tensor], h: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and central differences for each tensor.

    ``fn`` must rebuild the scalar from scratch on every call and be
    deterministic; run it under 64-bit precision for meaningful results.
    """
    grads = analytic_grads(fn, named.values())
    return {
        name: rel_error(g, numerical_grad(fn, t, h))
        for (name, t), g in zip(named.items(), grads)
    }

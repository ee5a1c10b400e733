"""Adam, reduce-on-plateau learning-rate schedule, and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence, grads: Optional[Sequence] = None, state: Optional[AdamState] = None) -> AdamState:
    """One bias-corrected Adam update, mutating ``params[i].data`` in place.

    ``grads`` defaults to each parameter's ``.grad``.
    """
    if state is None:
        raise ValueError("adam_step needs an AdamState")
    if grads is None:
        grads = [p.grad for p in params]
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing:
        raise ValueError(f"adam_step: parameters {missing} have no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("adam_step: parameter list changed between steps")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("adam_step: moment buffer shape does not match parameter")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return state


def _improved(value: float, best: Optional[float], mode: str) -> bool:
    if best is None:
        return True
    return value > best if mode == "max" else value < best


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 15
    mode: str = "max"
    min_lr: float = 0.0
    best: Optional[float] = None
    wait: int = 0
    reductions: int = 0


def plateau_step(sched: PlateauSchedule, metric: float) -> float:
    if _improved(metric, sched.best, sched.mode):
        sched.best = metric
        sched.wait = 0
        return sched.lr
    sched.wait += 1
    if sched.wait >= sched.patience:
        new = max(sched.lr * sched.factor, sched.min_lr)
        if new < sched.lr:
            sched.reductions += 1
        sched.lr = new
        sched.wait = 0
    return sched.lr


@dataclass
class EarlyStop:
    """Stop after ``patience`` epochs without improvement, keeping the best weights."""

    patience: int = 15
    mode: str = "min"
    best: Optional[float] = None
    best_epoch: int = -1
    best_state: Optional[dict] = None
    wait: int = 0
    epoch: int = 0
    stopped: bool = False


def early_stop_step(es: EarlyStop, metric: float, weights=None) -> str:
    """Return ``"continue"`` or ``"stop"``.

    ``weights`` is a model (anything with ``state_dict``) or a plain dict of
    arrays; it is snapshotted whenever the metric improves.
    """
    es.epoch += 1
    if _improved(metric, es.best, es.mode):
        es.best = metric
        es.best_epoch = es.epoch
        es.wait = 0
        if weights is not None:
            es.best_state = weights.state_dict() if hasattr(weights, "state_dict") else \
                {k: np.array(v, copy=True) for k, v in weights.items()}
        return "continue"
    es.wait += 1
    if es.wait >= es.patience:
        es.stopped = True
        return "stop"
    return "continue"


def restore_best(es: EarlyStop, model) -> bool:
    if es.best_state is None:
        return False
    model.load_state_dict(es.best_state)
    return True

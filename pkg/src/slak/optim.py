"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ScheduleRangeError


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adamw_step(params, grads, state: OptimState, lr, wd, no_decay=()):
    """One in-place AdamW update over every key of ``params``.

    Weight decay is decoupled: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Keys in ``no_decay`` skip the decay term.
    """
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}", layer=name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} differs from parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if wd and name not in no_decay:
            upd += wd * p
        p -= (lr * upd).astype(p.dtype, copy=False)
    return params, state


def lr_schedule(step, peak_lr, warmup_steps, total_steps):
    """Linear 0 -> peak over warmup, then half-cosine to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ScheduleRangeError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak_lr
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))

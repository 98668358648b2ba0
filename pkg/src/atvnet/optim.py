"""AdamW with decoupled weight decay and the poly learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PolySchedule:
    lr0: float = 1e-4
    power: float = 0.9
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.power <= 0 or self.total_steps < 1:
            raise ValueError("need lr0 > 0, power > 0, total_steps >= 1")

    def __call__(self, t: int) -> float:
        return poly_lr(self, t)


def poly_lr(s: PolySchedule, t: int) -> float:
    if t < 0 or t > s.total_steps:
        raise ValueError(f"step {t} outside [0, {s.total_steps}]")
    return s.lr0 * (1.0 - t / s.total_steps) ** s.power


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def no_decay(name: str) -> bool:
    """Biases and batch-norm affine parameters are not decayed."""
    return name.endswith((".bias", ".gamma", ".beta"))


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01,
               exclude=no_decay) -> None:
    """One in-place AdamW update of every array in ``params``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for {missing[:3]}")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.t += 1
    t = state.t
    bc1 = 1 - beta1 ** t
    bc2 = 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and not (exclude and exclude(k)):
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)

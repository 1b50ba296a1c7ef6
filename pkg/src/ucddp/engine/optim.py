"""Adam with coupled L2 weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError, ValidationError


@dataclass
class CosineSchedule:
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.lr_min > self.lr_max:
            raise ValidationError("lr_min must not exceed lr_max")

    def __call__(self, t: int) -> float:
        return cosine_lr(t, self)


def cosine_lr(t: int, s: CosineSchedule) -> float:
    """Learning rate at step ``t``; ``t`` outside [0, total_steps] is clamped."""
    t = min(max(t, 0), s.total_steps)
    if t == 0:
        return s.lr_max
    if t == s.total_steps:
        return s.lr_min
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * t / s.total_steps))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params: list, grads: list, state: AdamState, lr: float) -> list:
    """In-place Adam update of ``params``; returns the same list.

    Weight decay is folded into the gradient (g + wd·θ) before the moment
    updates.
    """
    if lr <= 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise ConfigurationError("params, grads and optimizer state differ in length")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationError(f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}")
        ty = p.dtype.type
        if state.weight_decay:
            g = g + ty(state.weight_decay) * p
        m *= ty(b1)
        m += ty(1.0 - b1) * g
        v *= ty(b2)
        v += ty(1.0 - b2) * (g * g)
        mhat = m / ty(bc1)
        vhat = v / ty(bc2)
        p -= ty(lr) * mhat / (np.sqrt(vhat) + ty(state.eps))
    return params

"""AdamW and Lion updates plus the warmup/cosine learning-rate schedule.

Updates are functional: they return new parameter and state dicts and leave
their inputs untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

__all__ = ["OptimState", "adamw_step", "lion_step", "lr_at", "init_state"]


@dataclass
class OptimState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_state(params: dict[str, np.ndarray], adam: bool = True) -> OptimState:
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return OptimState(0, zeros, {k: np.zeros_like(p) for k, p in params.items()} if adam else {})


def _check(params, grads, state):
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {state.m[name].shape}, parameter {p.shape}")


def adamw_step(params, grads, state: OptimState | None, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8):
    """Decoupled weight decay Adam with bias-corrected moments."""
    if state is None:
        state = init_state(params)
    _check(params, grads, state)
    b1, b2 = betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        p = p * (1 - lr * weight_decay)
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, OptimState(t, new_m, new_v)


def lion_step(params, grads, state: OptimState | None, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.99)):
    """Sign of the interpolated momentum, with decoupled weight decay."""
    if state is None:
        state = init_state(params, adam=False)
    _check(params, grads, state)
    b1, b2 = betas
    new_p, new_m = {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        u = np.sign(b1 * m + (1 - b1) * g)
        new_p[name] = p - lr * (u + weight_decay * p)
        new_m[name] = b2 * m + (1 - b2) * g
    return new_p, OptimState(state.step + 1, new_m, {})


def lr_at(step: int, total_steps: int, lr_max: float, warmup_steps: int = 0, schedule: str = "cosine") -> float:
    """Linear warmup to ``lr_max`` over ``warmup_steps``, then constant or cosine decay to 0."""
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    if schedule == "constant":
        return lr_max
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))

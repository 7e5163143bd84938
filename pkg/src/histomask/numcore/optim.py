"""AdamW with decoupled weight decay, and the warmup-cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor

__all__ = ["AdamWState", "LrSchedule", "adamw_step", "lr_at"]


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter.

    Moments are created lazily on first update, keyed by parameter name, and
    always match the parameter's shape.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adamw_step(
    state: AdamWState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """One AdamW update, in place on ``params``.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates.  Bias correction uses the post-increment
    step count.  Parameters with no gradient entry are treated as zero-grad
    (their moments still decay and weight decay still applies).
    """
    if lr < 0.0:
        raise ValueError("learning rate must be >= 0")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p.data
        p.data -= lr * update


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``floor_lr``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self) -> None:
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.floor_lr > self.peak_lr:
            raise ValueError("floor_lr must not exceed peak_lr")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.peak_lr
    progress = (step - schedule.warmup_steps) / span
    cos_factor = 0.5 * (1.0 + np.cos(np.pi * progress))
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * float(cos_factor)

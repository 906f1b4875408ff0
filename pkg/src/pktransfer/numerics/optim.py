"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractError, TrainingError


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=None):
    """Apply one AdamW update.

    Parameters
    ----------
    params : dict of str -> ndarray
        Current parameter values. Not modified.
    grads : dict of str -> ndarray
        Gradients, same keys and shapes as ``params``.
    state : AdamWState
        Moments and step counter; updated in place.
    lr : float, optional
        Learning rate for this step, defaults to ``state.lr``.

    Returns
    -------
    new_params : dict of str -> ndarray
    state : AdamWState
    """
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}", parameter=name)
        if np.shape(g) != np.shape(params[name]):
            raise ContractError(
                f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}"
            )

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        p = p - lr * state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


class AdamW:
    """Stateful wrapper updating a dict of parameter tensors in place."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)

    def step(self, grads, lr=None):
        values = {k: p.value for k, p in self.params.items()}
        new, _ = adamw_step(values, grads, self.state, lr)
        for k, p in self.params.items():
            p.value = new[k]


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError(
                f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}"
            )

    def __call__(self, step):
        return lr_at(self, step)


def lr_at(schedule, step):
    """Learning rate at ``step``: linear warmup, then cosine decay to the floor."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, total = schedule.warmup_steps, schedule.total_steps
    if step < w:
        return schedule.base_lr * step / w
    if total == w:
        return schedule.base_lr
    progress = (step - w) / (total - w)
    lr = schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return max(schedule.floor_lr, lr)

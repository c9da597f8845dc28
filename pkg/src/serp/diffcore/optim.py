"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimizerStateError(RuntimeError):
    """Raised when an update is requested for a parameter without a gradient."""


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, lr=None):
    """One AdamW update, in place on ``params`` (a ``{name: Parameter}`` map).

    The weight-decay term is applied to the parameter directly
    (``p -= lr * wd * p``) rather than folded into the gradient.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerStateError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = np.asarray(p.grad, dtype=p.data.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data -= p.data.dtype.type(lr * state.weight_decay) * p.data
        p.data -= p.data.dtype.type(lr) * update.astype(p.data.dtype)
    return state


class AdamW:
    """Stateful wrapper that owns the moment buffers for a fixed parameter set."""

    def __init__(self, named_params, lr=1e-3, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.state = OptimizerState(
            beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay, lr=lr
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        adamw_step(self.params, self.state, lr)

    def state_arrays(self):
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"optim.m.{name}"] = self.state.m[name]
                out[f"optim.v.{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays, step):
        self.state.step = int(step)
        for name, p in self.params.items():
            key = f"optim.m.{name}"
            if key in arrays:
                self.state.m[name] = np.array(arrays[key], dtype=p.data.dtype)
                self.state.v[name] = np.array(arrays[f"optim.v.{name}"], dtype=p.data.dtype)


def cosine_lr(step, total_steps, lr_max, lr_min):
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``."""
    if total_steps <= 0 or step >= total_steps:
        return float(lr_min)
    step = max(step, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))

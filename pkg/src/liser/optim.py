"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NO_DECAY_SUFFIXES = ("bias", "gamma", "beta", "b_ih", "b_hh")


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices/kernels only."""
    return not name.endswith(NO_DECAY_SUFFIXES)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-4,
               betas: tuple = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> AdamState:
    """Update ``params`` (name -> Tensor or ndarray) in place from ``grads`` (name -> ndarray)."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        data = p if isinstance(p, np.ndarray) else p.data
        g = grads[name]
        if g.shape != data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decays(name):
            data *= 1.0 - lr * weight_decay
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state

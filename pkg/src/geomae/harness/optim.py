"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import DimensionError
from ..tensor import Tensor
from .config import AdamWConfig


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState,
               hyper: AdamWConfig) -> None:
    """One in-place update of ``params``.

    The decay ``theta <- theta - lr * wd * theta`` is applied to the current
    weights separately from the bias-corrected adaptive step.
    """
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        theta = p.data * (1.0 - hyper.lr * hyper.weight_decay)
        theta = theta - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p.assign(theta)

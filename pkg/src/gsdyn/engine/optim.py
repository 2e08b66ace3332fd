"""Bias-corrected Adam over named parameter arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, checked


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: dict[str, float] | None = None,
) -> AdamState:
    """Apply one Adam update in place to ``params``.

    ``lr`` optionally overrides the state's learning rate per parameter name.
    Parameters without a gradient entry are left untouched but still count
    toward the shared step.
    """
    if not math.isfinite(state.step):
        raise ValueError("Adam step counter is not finite")
    if checked():
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} does not match parameter {name!r} {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_lr = state.lr if lr is None else lr.get(name, state.lr)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= (step_lr / c1) * m / denom
    return state

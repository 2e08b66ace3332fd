"""Per-Gaussian dynamics attributes: temporal fusion, spatio-temporal gating,
outlier selection and the selective regularisation loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor
from .engine import tensor as T
from .engine.nn import Linear


def fuse_temporal(d: Tensor, h_t: Tensor) -> Tensor:
    """``[d_i || H_t]``, attribute first."""
    return T.concat([d, h_t], axis=-1)


class SpatioTemporalAttention:
    """Projects the fused temporal feature to the width of ``H_s`` and gates it."""

    def __init__(self, n_in: int, n_spatial: int, rng: np.random.Generator):
        self.proj = Linear(n_in, n_spatial, rng, "dyn_proj")

    def parameters(self) -> dict[str, Tensor]:
        return self.proj.parameters()

    def __call__(self, h_t_fused: Tensor, h_s: Tensor) -> Tensor:
        return attention_spatiotemporal(self.proj(h_t_fused), h_s)


def attention_spatiotemporal(projected: Tensor, h_s: Tensor) -> Tensor:
    if projected.shape[-1] != h_s.shape[-1]:
        raise ValueError(f"projected width {projected.shape[-1]} != spatial width {h_s.shape[-1]}")
    return T.mul(projected, h_s)


@dataclass(frozen=True)
class DynStats:
    d_bar: np.ndarray
    mu_dist: float
    sigma_dist: float
    dist: np.ndarray


def outlier_mask(dyn_attrs) -> tuple[DynStats, np.ndarray]:
    """Flag attributes farther than one standard deviation above the mean distance."""
    a = np.asarray(dyn_attrs.data if isinstance(dyn_attrs, Tensor) else dyn_attrs, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("need an (N, D) attribute array with N >= 1")
    d_bar = a.mean(axis=0)
    dist = np.sqrt(np.sum((a - d_bar) ** 2, axis=1))
    mu, sigma = float(dist.mean()), float(dist.std())
    return DynStats(d_bar, mu, sigma, dist), dist > mu + sigma


def dynamics_reg_loss(dyn_attrs: Tensor, stats: DynStats, mask: np.ndarray) -> Tensor:
    """``(1/N) sum_i mask_i ||d_i - d_bar||^2`` with the mean held constant."""
    if not isinstance(dyn_attrs, Tensor):
        dyn_attrs = Tensor(np.asarray(dyn_attrs))
    n = dyn_attrs.shape[0]
    diff = T.sub(dyn_attrs, stats.d_bar.astype(dyn_attrs.data.dtype))
    sq = T.sum_(T.mul(diff, diff), axis=1)
    return T.div(T.sum_(T.mul(sq, mask.astype(dyn_attrs.data.dtype))), float(n))

"""The hybrid deformation field: hash features + spectral time series + dynamics attributes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import SpatioTemporalAttention, fuse_temporal
from .engine import Tensor
from .engine import tensor as T
from .engine.nn import MLP
from .hashgrid import GridConfig, HashGridSet
from .laplacian import DeformationDecoder, DeformationOutput, LaplacianBasis, TimeMLP, attention_fuse


@dataclass(frozen=True)
class FieldConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    k: int = 8
    d_l: int = 32
    dyn_dim: int = 8
    gate_hidden: int = 64
    trunk_width: int = 128
    trunk_depth: int = 2
    time_encoder: str = "laplacian"


class DeformationField:
    def __init__(self, cfg: FieldConfig, bbox_lo, bbox_hi, rng: np.random.Generator):
        if cfg.time_encoder not in ("laplacian", "mlp"):
            raise ValueError(f"unknown time encoder {cfg.time_encoder!r}")
        self.cfg = cfg
        self.bbox_lo = np.asarray(bbox_lo, dtype=np.float64)
        self.bbox_hi = np.asarray(bbox_hi, dtype=np.float64)
        self.grid = HashGridSet(cfg.grid, rng)
        if cfg.time_encoder == "laplacian":
            self.time = LaplacianBasis(cfg.k, cfg.d_l, rng)
        else:
            self.time = TimeMLP.matched(cfg.k, cfg.d_l, rng)
        hs = self.grid.spatial_dim
        self.gate = MLP([hs, cfg.gate_hidden, cfg.d_l], rng, "gate")
        self.attn = SpatioTemporalAttention(cfg.dyn_dim + self.grid.temporal_dim, hs, rng)
        self.decoder = DeformationDecoder(cfg.d_l + hs, cfg.trunk_width, cfg.trunk_depth, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in (self.grid, self.time, self.gate, self.attn, self.decoder):
            out.update(part.parameters())
        return out

    def normalize(self, mu: Tensor) -> Tensor:
        span = self.bbox_hi - self.bbox_lo
        return T.div(T.sub(mu, self.bbox_lo.astype(mu.data.dtype)), span.astype(mu.data.dtype))

    def __call__(self, mu: Tensor, dyn_attr: Tensor, t: float) -> DeformationOutput:
        n = mu.shape[0]
        xyz = self.normalize(mu)
        tcol = np.full((n, 1), t, dtype=mu.data.dtype)
        h_s, h_t = self.grid.encode(T.concat([xyz, tcol], axis=1))
        l_t = self.time(t)
        a_l = attention_fuse(T.reshape(l_t, (1, -1)), self.gate(h_s))
        a_h = self.attn(fuse_temporal(dyn_attr, h_t), h_s)
        return self.decoder(a_l, a_h)

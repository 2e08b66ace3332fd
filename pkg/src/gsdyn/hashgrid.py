"""Anisotropic 4D multi-resolution hash encoding.

Space-time (x, y, z, t) is covered by four 3D grids per level: xyz, xyt,
yzt and xzt.  The xyz grid yields the time-invariant spatial feature
``H_s``; the three time-bearing grids together yield ``H_t``.

Levels are indexed from 0, so level 0 has the base resolution and the last
level reaches the configured top resolution.  A level whose vertex count
fits in the table is stored densely; larger levels are hashed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, checked, parameter
from .engine import tensor as T

PRIMES = (1, 2654435761, 805459861)
PROJECTIONS = {"xyz": (0, 1, 2), "xyt": (0, 1, 3), "yzt": (1, 2, 3), "xzt": (0, 2, 3)}
TIME_PROJECTIONS = ("xyt", "yzt", "xzt")

# corner offsets in (b0, b1, b2) bit order
_CORNERS = np.array([[(c >> d) & 1 for d in range(3)] for c in range(8)], dtype=np.int64)


def growth_factor(n_min: int, n_max: int, levels: int) -> float:
    if levels <= 1:
        return 1.0
    return (n_max / n_min) ** (1.0 / (levels - 1))


def level_resolution(l: int, n_min: int, b: float) -> int:
    return max(2, int(math.floor(n_min * b**l + 1e-9)))


def hash_index(cell, table_size: int):
    """Spatial hash of integer cell coordinates, vectorised over leading axes."""
    if table_size & (table_size - 1):
        raise ValueError("table size must be a power of two")
    c = np.asarray(cell, dtype=np.uint64)
    h = c[..., 0] * np.uint64(PRIMES[0])
    h ^= c[..., 1] * np.uint64(PRIMES[1])
    h ^= c[..., 2] * np.uint64(PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@dataclass(frozen=True)
class GridConfig:
    levels: int = 8
    features: int = 2
    log2_table_size: int = 15
    n_min: int = 8
    n_max: int = 256
    n_min_t: int = 4
    n_max_t: int = 64

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def b(self) -> float:
        return growth_factor(self.n_min, self.n_max, self.levels)

    @property
    def b_t(self) -> float:
        return growth_factor(self.n_min_t, self.n_max_t, self.levels)

    def resolution(self, l: int, axis: str) -> int:
        if axis == "t":
            return level_resolution(l, self.n_min_t, self.b_t)
        return level_resolution(l, self.n_min, self.b)


class _Layout:
    """Per-projection level resolutions, row offsets and dense/hashed flags."""

    def __init__(self, cfg: GridConfig, proj: str):
        axes = "xyzt"
        self.res = np.array(
            [[cfg.resolution(l, axes[a]) for a in PROJECTIONS[proj]] for l in range(cfg.levels)],
            dtype=np.int64,
        )
        verts = np.prod(self.res + 1, axis=1)
        self.dense = verts <= cfg.table_size
        self.rows = np.where(self.dense, verts, cfg.table_size)
        self.offset = np.concatenate([[0], np.cumsum(self.rows)[:-1]])
        self.total = int(self.rows.sum())
        self.table_size = cfg.table_size

    def corner_indices(self, cells: np.ndarray) -> np.ndarray:
        """Row indices for integer vertex coords of shape (N, L, 8, 3)."""
        stride1 = self.res[:, 0] + 1
        stride2 = stride1 * (self.res[:, 1] + 1)
        dense = cells[..., 0] + cells[..., 1] * stride1[:, None] + cells[..., 2] * stride2[:, None]
        hashed = hash_index(cells, self.table_size)
        local = np.where(self.dense[:, None], dense, hashed)
        return local + self.offset[:, None]


class HashGridSet:
    def __init__(self, cfg: GridConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layouts = {p: _Layout(cfg, p) for p in PROJECTIONS}
        self.tables = {
            p: parameter(rng.uniform(-1e-4, 1e-4, size=(lay.total, cfg.features)), name=f"hash.{p}")
            for p, lay in self.layouts.items()
        }

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tables.values()}

    @property
    def spatial_dim(self) -> int:
        return self.cfg.levels * self.cfg.features

    @property
    def temporal_dim(self) -> int:
        return 3 * self.spatial_dim

    def _lookup(self, proj: str, coords: Tensor) -> Tensor:
        lay = self.layouts[proj]
        n = coords.shape[0]
        L, F = self.cfg.levels, self.cfg.features
        pos = T.gather(coords, list(PROJECTIONS[proj]), axis=1)  # (N, 3)
        scaled = T.mul(T.reshape(pos, (n, 1, 3)), lay.res.astype(coords.data.dtype))  # (N, L, 3)
        cell = np.clip(np.floor(scaled.data), 0, lay.res - 1).astype(np.int64)
        frac = T.sub(scaled, cell.astype(scaled.data.dtype))
        w1 = T.reshape(frac, (n, L, 3, 1))
        w = T.concat([T.sub(1.0, w1), w1], axis=3)  # (N, L, 3, 2)
        weight = None
        for d in range(3):
            wd = T.gather(T.reshape(w[:, :, d, :], (n, L, 2)), _CORNERS[:, d], axis=2)
            weight = wd if weight is None else T.mul(weight, wd)
        verts = cell[:, :, None, :] + _CORNERS[None, None]
        rows = lay.corner_indices(verts)  # (N, L, 8)
        feats = T.gather(self.tables[proj], rows.reshape(-1), axis=0)
        feats = T.reshape(feats, (n, L, 8, F))
        out = T.sum_(T.mul(feats, T.reshape(weight, (n, L, 8, 1))), axis=2)
        return T.reshape(out, (n, L * F))

    def encode(self, coords: Tensor, clamp: bool = True) -> tuple[Tensor, Tensor]:
        """Encode normalised (N, 4) coordinates into ``(H_s, H_t)``."""
        x = coords.data
        if checked():
            bad = np.argwhere((x < 0) | (x > 1))
            if len(bad):
                i, a = bad[0]
                raise ValueError(f"coordinate {'xyzt'[a]} of query {i} is outside [0, 1]: {x[i, a]}")
        elif clamp and (x.min() < 0 or x.max() > 1):
            coords = T.clamp(coords, 0.0, 1.0)
        h_s = self._lookup("xyz", coords)
        h_t = T.concat([self._lookup(p, coords) for p in TIME_PROJECTIONS], axis=1)
        return h_s, h_t

"""Canonical-space Gaussian primitives and their geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, parameter
from .engine import tensor as T
from .kdtree import KDTree

SCALE_FLOOR = 1e-6


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (w, x, y, z) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def covariance(log_scale, quat) -> np.ndarray:
    """Sigma = R S S^T R^T for one or many Gaussians."""
    R = quat_to_rotmat(quat)
    M = R * np.exp(np.asarray(log_scale, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def normalize_quat_t(q: Tensor) -> Tensor:
    norm = T.sqrt(T.sum_(T.mul(q, q), axis=-1, keepdims=True))
    return T.div(q, norm)


def rotmat_t(q: Tensor) -> Tensor:
    """Differentiable version of :func:`quat_to_rotmat` for unit quaternions (N, 4)."""
    w, x, y, z = (q[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [
        1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
        2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
        2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
    ]
    return T.reshape(T.stack(entries, axis=-1), (q.shape[0], 3, 3))


def covariance_t(log_scale: Tensor, quat: Tensor) -> Tensor:
    R = rotmat_t(normalize_quat_t(quat))
    s = T.exp(log_scale)
    M = T.mul(R, T.reshape(s, (s.shape[0], 1, 3)))
    return T.matmul(M, T.transpose(M, (0, 2, 1)))


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    color: np.ndarray
    dyn_attr: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid_np(self.opacity_logit))


ATTRS = ("mu", "quat", "log_scale", "opacity_logit", "color", "dyn_attr")


@dataclass
class Scene:
    """Structure-of-arrays Gaussian set; each attribute is a learnable tensor."""

    mu: Tensor
    quat: Tensor
    log_scale: Tensor
    opacity_logit: Tensor
    color: Tensor
    dyn_attr: Tensor
    extent: float
    grad_accum: np.ndarray = field(default=None)
    grad_count: np.ndarray = field(default=None)
    max_radii: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self)
        for name in ATTRS:
            t = getattr(self, name)
            if t.shape[0] != n:
                raise ValueError(f"attribute {name} has {t.shape[0]} rows, expected {n}")
            t.requires_grad = True
            t.name = f"scene.{name}"
        if self.grad_accum is None:
            self.reset_stats()

    def __len__(self):
        return self.mu.shape[0]

    @property
    def dyn_dim(self) -> int:
        return self.dyn_attr.shape[1]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid_np(self.opacity_logit.data)

    def parameters(self) -> dict[str, Tensor]:
        return {f"scene.{a}": getattr(self, a) for a in ATTRS}

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.mu.data[i].copy(),
            self.quat.data[i].copy(),
            self.log_scale.data[i].copy(),
            float(self.opacity_logit.data[i, 0]),
            self.color.data[i].copy(),
            self.dyn_attr.data[i].copy(),
        )

    def reset_stats(self):
        n = len(self)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)
        self.max_radii = np.zeros(n)

    def arrays(self) -> dict[str, np.ndarray]:
        return {a: getattr(self, a).data for a in ATTRS}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], extent: float, dtype=None) -> "Scene":
        kw = {}
        for a in ATTRS:
            arr = np.array(arrays[a], dtype=dtype or np.asarray(arrays[a]).dtype)
            if a == "opacity_logit":
                arr = arr.reshape(-1, 1)
            kw[a] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        return cls(extent=float(extent), **kw)

    def select(self, keep: np.ndarray) -> "Scene":
        return Scene.from_arrays({a: v[keep] for a, v in self.arrays().items()}, self.extent)

    def covariances(self) -> np.ndarray:
        return covariance(self.log_scale.data, self.quat.data)

    def post_step(self):
        """Re-impose the invariants that optimizer steps can break."""
        q = self.quat.data
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        np.clip(self.log_scale.data, np.log(SCALE_FLOOR), np.log(self.extent), out=self.log_scale.data)
        np.clip(self.color.data, 0.0, 1.0, out=self.color.data)


def init_from_points(
    points: np.ndarray,
    colors: np.ndarray,
    dyn_dim: int = 8,
    rng: np.random.Generator | None = None,
    extent: float | None = None,
    dtype=None,
) -> Scene:
    """One isotropic Gaussian per point, sized by its three nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot initialise a scene from an empty point set")
    if len(cols) != len(pts):
        raise ValueError("points and colors must have the same length")
    if np.any(cols < 0) or np.any(cols > 1):
        raise ValueError("colors must lie in [0, 1]")
    rng = rng or np.random.default_rng(0)
    if extent is None:
        extent = float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
        if extent <= 0:
            extent = 1.0
    n = len(pts)
    if n == 1:
        dist = np.array([0.01 * extent])
    else:
        k = min(3, n - 1)
        tree = KDTree(pts)
        dist = np.array([tree.query(p, k, exclude=i)[1].mean() for i, p in enumerate(pts)])
        dist = np.maximum(dist, SCALE_FLOOR)
    dtype = dtype or np.float64
    arrays = {
        "mu": pts,
        "quat": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        "log_scale": np.repeat(np.log(dist)[:, None], 3, axis=1),
        "opacity_logit": np.full((n, 1), logit(0.1)),
        "color": cols,
        "dyn_attr": rng.uniform(-1e-4, 1e-4, size=(n, dyn_dim)),
    }
    return Scene.from_arrays({k: v.astype(dtype) for k, v in arrays.items()}, extent)

"""Neighbourhood-aware densification: covariance dissimilarity over k nearest
neighbours, a KL-divergence term, and the adaptive split threshold built
from both, wired into a clone/split/prune controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kdtree import KDTree, build_kdtree, knn
from .scene import ATTRS, Scene, covariance, logit, quat_to_rotmat, sigmoid_np

KL_EPS = 1e-12
SPLIT_SCALE_DIV = 1.6


def covariance_dissimilarity(sigma_i: np.ndarray, sigma_neighbors: np.ndarray) -> tuple[np.ndarray, float]:
    """Spectral norms ``||Sigma_i - Sigma_j||_2`` and their mean."""
    sig = np.asarray(sigma_neighbors, dtype=np.float64).reshape(-1, 3, 3)
    if len(sig) == 0:
        return np.zeros(0), 0.0
    diff = sig - np.asarray(sigma_i, dtype=np.float64)[None]
    delta = np.abs(np.linalg.eigvalsh(diff)).max(axis=1)
    return delta, float(delta.mean())


def kl_uniform(deltas) -> float:
    """KL divergence of normalised dissimilarities from the uniform distribution, in nats."""
    d = np.asarray(deltas, dtype=np.float64)
    k = len(d)
    if k == 0:
        return 0.0
    p = (d + KL_EPS) / np.sum(d + KL_EPS)
    return max(0.0, float(np.sum(p * np.log(p * k))))


def adaptive_tau(mean_delta, d_kl, tau_base):
    return mean_delta + d_kl * tau_base


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "adaptive"  # or "fixed": tau = 1 for every candidate
    k_neighbors: int = 8
    grad_threshold: float = 2e-4
    tau_base: float = 0.1
    rho: float = 0.01
    kappa: float = 0.5
    outlier_boost: bool = True
    min_opacity: float = 0.005
    prune_world_scale: float = 0.5
    prune_screen_frac: float = 0.0
    child_opacity: str = "halve"  # or "inherit"
    max_gaussians: int = 0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.child_opacity not in ("halve", "inherit"):
            raise ValueError(f"unknown child opacity rule {self.child_opacity!r}")
        for name in ("grad_threshold", "rho", "kappa", "min_opacity", "prune_world_scale", "prune_screen_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive")


@dataclass
class SplitReport:
    step: int
    n_before: int
    n_split: int
    n_clone: int
    n_pruned: int
    n_after: int
    mean_tau: float
    mean_dkl: float
    origin: np.ndarray = field(repr=False, default=None)  # source row of each output Gaussian
    fresh: np.ndarray = field(repr=False, default=None)  # True for newly created rows
    tau: np.ndarray = field(repr=False, default=None)
    dkl: np.ndarray = field(repr=False, default=None)
    candidates: np.ndarray = field(repr=False, default=None)
    split_mask: np.ndarray = field(repr=False, default=None)

    def log_line(self) -> str:
        vals = [self.step, self.n_before, self.n_split, self.n_clone, self.n_pruned, self.n_after]
        return "\t".join([str(v) for v in vals] + [f"{self.mean_tau:.6g}", f"{self.mean_dkl:.6g}"])


LOG_HEADER = "step\tN_before\tN_split\tN_clone\tN_pruned\tN_after\tmean_tau\tmean_dkl"


def neighborhood_terms(scene: Scene, candidates: np.ndarray, k: int, tree: KDTree | None = None):
    """Mean covariance dissimilarity and KL term for each candidate."""
    n = len(scene)
    k = min(k, n - 1)
    mean_delta = np.zeros(len(candidates))
    dkl = np.zeros(len(candidates))
    if k < 1 or len(candidates) == 0:
        return mean_delta, dkl
    tree = tree or build_kdtree(scene.mu.data)
    cov = scene.covariances()
    for j, i in enumerate(candidates):
        nb, _ = knn(tree, int(i), k)
        deltas, mean_delta[j] = covariance_dissimilarity(cov[i], cov[nb])
        dkl[j] = kl_uniform(deltas)
    return mean_delta, dkl


def densify_and_prune(
    scene: Scene,
    outlier: np.ndarray | None,
    cfg: SplitConfig,
    rng: np.random.Generator,
    step: int = 0,
    image_size: int = 0,
) -> tuple[Scene, SplitReport]:
    n = len(scene)
    grads = scene.grad_accum / np.maximum(scene.grad_count, 1)
    if cfg.outlier_boost and outlier is not None:
        grads = np.where(outlier, grads * (1.0 + cfg.kappa), grads)
    cand = np.nonzero(grads > cfg.grad_threshold)[0]
    if cfg.max_gaussians and len(cand) > max(0, cfg.max_gaussians - n):
        room = max(0, cfg.max_gaussians - n)
        cand = cand[np.argsort(-grads[cand], kind="stable")[:room]]
        cand.sort()

    if cfg.mode == "adaptive":
        mean_delta, dkl = neighborhood_terms(scene, cand, cfg.k_neighbors)
        tau = adaptive_tau(mean_delta, dkl, cfg.tau_base)
    else:
        dkl = np.zeros(len(cand))
        tau = np.ones(len(cand))
    max_scale = np.exp(scene.log_scale.data[cand].astype(np.float64)).max(axis=1) if len(cand) else np.zeros(0)
    split = max_scale > tau * cfg.rho * scene.extent
    to_split, to_clone = cand[split], cand[~split]

    arrays = {a: v.astype(np.float64) for a, v in scene.arrays().items()}
    new_rows = {a: [] for a in ATTRS}
    origin_new = []
    # clones: exact copies in place
    for a in ATTRS:
        new_rows[a].append(arrays[a][to_clone])
    origin_new.append(to_clone)
    # splits: two children sampled from the parent density, shrunk
    if len(to_split):
        parent = np.repeat(to_split, 2)
        s = np.exp(arrays["log_scale"][parent])
        R = quat_to_rotmat(arrays["quat"][parent])
        z = rng.standard_normal((len(parent), 3))
        for a in ATTRS:
            new_rows[a].append(arrays[a][parent])
        new_rows["mu"][-1] = arrays["mu"][parent] + np.einsum("nij,nj->ni", R, s * z)
        new_rows["log_scale"][-1] = arrays["log_scale"][parent] - math.log(SPLIT_SCALE_DIV)
        if cfg.child_opacity == "halve":
            new_rows["opacity_logit"][-1] = logit(sigmoid_np(arrays["opacity_logit"][parent]) / 2.0)
        origin_new.append(parent)

    keep_old = np.ones(n, dtype=bool)
    keep_old[to_split] = False
    merged = {a: np.concatenate([arrays[a][keep_old]] + new_rows[a], axis=0) for a in ATTRS}
    origin = np.concatenate([np.nonzero(keep_old)[0]] + origin_new)
    fresh = np.concatenate([np.zeros(keep_old.sum(), dtype=bool), np.ones(len(origin) - keep_old.sum(), dtype=bool)])
    radii = np.concatenate([scene.max_radii[keep_old], np.zeros(len(origin) - keep_old.sum())])

    opacity = sigmoid_np(merged["opacity_logit"][:, 0])
    prune = opacity < cfg.min_opacity
    max_s = np.exp(merged["log_scale"]).max(axis=1)
    if cfg.prune_world_scale > 0:
        prune |= max_s > cfg.prune_world_scale * scene.extent
    if cfg.prune_screen_frac > 0 and image_size:
        prune |= radii > cfg.prune_screen_frac * image_size
    if prune.all():
        prune[np.argmax(opacity)] = False
    keep = ~prune

    dtype = scene.mu.data.dtype
    out = Scene.from_arrays({a: v[keep].astype(dtype) for a, v in merged.items()}, scene.extent)
    report = SplitReport(
        step=step,
        n_before=n,
        n_split=len(to_split),
        n_clone=len(to_clone),
        n_pruned=int(prune.sum()),
        n_after=len(out),
        mean_tau=float(tau.mean()) if len(tau) else 0.0,
        mean_dkl=float(dkl.mean()) if len(dkl) else 0.0,
        origin=origin[keep],
        fresh=fresh[keep],
        tau=tau,
        dkl=dkl,
        candidates=cand,
        split_mask=split,
    )
    return out, report

"""Differentiable splatting renderer: EWA projection and alpha compositing.

Pixel ``(x, y)`` is sampled at integer coordinates.  Each splat is bounded by
the radius outside which its alpha falls below the 1/255 skip threshold, so
only (pixel, splat) pairs inside that footprint are evaluated.  Per-pixel
sums run through ``cumsum`` in depth order, so the result does not depend on
how pixels are grouped into tiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor
from .engine import tensor as T
from .scene import Scene, covariance_t

LOWPASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
TILE = 16


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-8):
            raise ValueError("camera rotation is not orthonormal")
        if not self.near < self.far:
            raise ValueError("near clip must be smaller than far clip")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, width, height, fy=None, near=0.01, far=100.0) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy or fx, width / 2.0, height / 2.0, R, -R @ eye, width, height, near, far)


@dataclass
class Splats:
    """Projected splats for the visible subset of a Gaussian set."""

    index: np.ndarray  # Gaussian ids of the visible splats
    mean2d: Tensor  # (n, 2) pixels
    cov2d: Tensor  # (n, 3) = (a, b, c) of [[a, b], [b, c]], low-pass included
    conic: Tensor  # (n, 3) inverse of cov2d in the same layout
    depth: np.ndarray
    radius: np.ndarray
    opacity: Tensor  # (n, 1)
    color: Tensor  # (n, 3)

    def __len__(self):
        return len(self.index)


def footprint_radius(cov2d: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Distance beyond which alpha < 1/255; zero when the splat never reaches it."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    reach = 255.0 * opacity
    k2 = 2.0 * np.log(np.maximum(reach, 1.0))
    # slack covers float32 evaluation of alpha near the threshold
    return np.where(reach > 1.0, np.sqrt(k2 * lam) * (1.0 + 1e-3) + 1e-3, 0.0)


def project(mu: Tensor, cov: Tensor, opacity: Tensor, color: Tensor, cam: Camera) -> Splats:
    """EWA projection of (N, 3) means and (N, 3, 3) covariances; culled splats are dropped."""
    dt = mu.data.dtype
    p_np = mu.data @ cam.R.T + cam.t
    in_depth = (p_np[:, 2] > cam.near) & (p_np[:, 2] < cam.far)
    idx = np.nonzero(in_depth)[0]

    def sub(x):
        return T.gather(x, idx, axis=0)

    mu_v, cov_v = sub(mu), sub(cov)
    p = T.add(T.matmul(mu_v, cam.R.T.astype(dt)), cam.t.astype(dt))
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    inv_z = T.div(1.0, pz)
    mean2d = T.stack([T.add(T.mul(T.mul(px, inv_z), cam.fx), cam.cx), T.add(T.mul(T.mul(py, inv_z), cam.fy), cam.cy)], axis=1)
    zero = np.zeros(len(idx), dtype=dt)
    inv_z2 = T.mul(inv_z, inv_z)
    J = T.reshape(
        T.stack(
            [
                T.mul(inv_z, cam.fx), zero, T.mul(T.mul(px, inv_z2), -cam.fx),
                zero, T.mul(inv_z, cam.fy), T.mul(T.mul(py, inv_z2), -cam.fy),
            ],
            axis=1,
        ),
        (len(idx), 2, 3),
    )
    W = cam.R.astype(dt)
    cam_cov = T.matmul(T.matmul(W, cov_v), W.T.copy())
    c2 = T.matmul(T.matmul(J, cam_cov), T.transpose(J, (0, 2, 1)))
    a = T.add(c2[:, 0, 0], LOWPASS)
    b = c2[:, 0, 1]
    c = T.add(c2[:, 1, 1], LOWPASS)
    cov2d = T.stack([a, b, c], axis=1)
    det = T.sub(T.mul(a, c), T.mul(b, b))
    conic = T.stack([T.div(c, det), T.neg(T.div(b, det)), T.div(a, det)], axis=1)

    op_v = sub(opacity)
    radius = footprint_radius(cov2d.data.astype(np.float64), op_v.data[:, 0].astype(np.float64))
    m = mean2d.data
    on_screen = (
        (radius > 0)
        & (m[:, 0] + radius >= 0)
        & (m[:, 0] - radius <= cam.width - 1)
        & (m[:, 1] + radius >= 0)
        & (m[:, 1] - radius <= cam.height - 1)
    )
    keep = np.nonzero(on_screen)[0]
    if len(keep) < len(idx):
        pick = lambda x: T.gather(x, keep, axis=0)  # noqa: E731
        mean2d, cov2d, conic = pick(mean2d), pick(cov2d), pick(conic)
        op_v = pick(op_v)
        idx_final = idx[keep]
    else:
        idx_final = idx
        keep = slice(None)
    return Splats(
        index=idx_final,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=p.data[keep, 2],
        radius=radius[keep],
        opacity=op_v,
        color=T.gather(color, idx_final, axis=0),
    )


def _pairs(splats: Splats, cam: Camera):
    """Candidate (pixel, splat) pairs: pixels inside each splat's footprint box
    whose alpha is not far below the skip threshold.  The taped mask in
    :func:`rasterize` stays authoritative; this only prunes work."""
    m = splats.mean2d.data.astype(np.float64)
    r = splats.radius
    x0 = np.clip(np.ceil(m[:, 0] - r), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.floor(m[:, 0] + r), -1, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(m[:, 1] - r), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.floor(m[:, 1] + r), -1, cam.height - 1).astype(np.int64)
    wx, wy = np.maximum(x1 - x0 + 1, 0), np.maximum(y1 - y0 + 1, 0)
    counts = wx * wy
    sid = np.repeat(np.arange(len(r)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[sid] + local % wx[sid]
    py = y0[sid] + local // wx[sid]
    con = splats.conic.data.astype(np.float64)[sid]
    dx, dy = px - m[sid, 0], py - m[sid, 1]
    power = -0.5 * (con[:, 0] * dx * dx + con[:, 2] * dy * dy) - con[:, 1] * dx * dy
    alpha = splats.opacity.data[sid, 0] * np.exp(power)
    keep = alpha >= 0.5 * ALPHA_MIN
    return sid[keep], py[keep] * cam.width + px[keep]


def _pixel_order(cam: Camera, tile: int | None) -> np.ndarray:
    """Pixel ids in processing order: row-major, or tile by tile."""
    if tile is None:
        return np.arange(cam.height * cam.width)
    ys, xs = np.divmod(np.arange(cam.height * cam.width), cam.width)
    return np.lexsort((xs, ys, xs // tile, ys // tile))


def rasterize(splats: Splats, cam: Camera, tile: int | None = TILE) -> Tensor:
    """Front-to-back compositing of depth-sorted splats onto a black (H, W, 3) image.

    Work is laid out as one row per covered pixel and one column per splat
    touching it, in depth order, padded with a null splat of zero alpha.
    ``tile`` only changes the order of the rows (tile by tile, or row-major
    for ``None``); every pixel is composited by the same sequential sums, so
    both layouts give identical bits.
    """
    dt = splats.mean2d.data.dtype
    H, W = cam.height, cam.width
    n = len(splats)
    if n == 0:
        return Tensor(np.zeros((H, W, 3), dtype=dt))
    order = np.lexsort((np.arange(n), splats.depth))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    sid, pix = _pairs(splats, cam)
    if len(sid) == 0:
        return Tensor(np.zeros((H, W, 3), dtype=dt))

    pos = np.empty(H * W, dtype=np.int64)
    pos[_pixel_order(cam, tile)] = np.arange(H * W)
    srt = np.lexsort((rank[sid], pos[pix]))
    sid, pix = sid[srt], pix[srt]
    rows_pix, first, per_row = np.unique(pix, return_index=True, return_counts=True)
    # np.unique sorts by pixel id; restore processing order
    ro = np.argsort(pos[rows_pix], kind="stable")
    rows_pix, first, per_row = rows_pix[ro], first[ro], per_row[ro]
    n_rows, K = len(rows_pix), int(per_row.max())
    slot = np.full((n_rows, K), len(sid), dtype=np.int64)  # len(sid) is the null pair
    col = np.arange(K)[None, :]
    valid = col < per_row[:, None]
    slot[valid] = (first[:, None] + col)[valid]

    attrs = T.concat([splats.mean2d, splats.conic, splats.opacity, splats.color], axis=1)
    G = T.gather(attrs, sid, axis=0)  # (n_pairs, 9)
    pxy = np.stack([pix % W, pix // W], axis=1).astype(dt)
    d = T.sub(pxy, G[:, 0:2])
    dx, dy = d[:, 0], d[:, 1]
    power = T.sub(
        T.mul(T.add(T.mul(G[:, 2], T.mul(dx, dx)), T.mul(G[:, 4], T.mul(dy, dy))), -0.5),
        T.mul(G[:, 3], T.mul(dx, dy)),
    )
    alpha = T.clamp(T.mul(G[:, 5], T.exp(power)), hi=ALPHA_MAX)
    alpha = T.mul(alpha, (alpha.data >= ALPHA_MIN).astype(dt))
    zero1 = np.zeros(1, dtype=dt)
    A = T.gather(T.concat([alpha, zero1], axis=0), slot, axis=0)  # (rows, K)
    log_keep = T.log(T.sub(1.0, A))
    cum = T.cumsum(log_keep, axis=1)
    excl = T.concat([np.zeros((n_rows, 1), dtype=dt), cum[:, : K - 1]], axis=1)
    trans = T.exp(excl)
    live = (np.exp(cum.data) >= T_MIN).astype(dt)
    weight = T.mul(T.mul(A, trans), live)
    rgb = T.gather(T.concat([G[:, 6:9], np.zeros((1, 3), dtype=dt)], axis=0), slot, axis=0)  # (rows, K, 3)
    contrib = T.mul(T.reshape(weight, (n_rows, K, 1)), rgb)
    color = T.cumsum(contrib, axis=1)[:, K - 1, :]  # (rows, 3)

    where = np.full(H * W, n_rows, dtype=np.int64)
    where[rows_pix] = np.arange(n_rows)
    img = T.gather(T.concat([color, np.zeros((1, 3), dtype=dt)], axis=0), where, axis=0)
    return T.reshape(img, (H, W, 3))


@dataclass
class RenderResult:
    image: Tensor
    splats: Splats


def render_gaussians(mu, quat, log_scale, opacity_logit, color, cam: Camera, tile: int | None = TILE) -> RenderResult:
    cov = covariance_t(log_scale, quat)
    splats = project(mu, cov, T.sigmoid(opacity_logit), color, cam)
    splats.mean2d.retain_grad = True
    return RenderResult(rasterize(splats, cam, tile=tile), splats)


def render_static(scene: Scene, cam: Camera, tile: int | None = TILE) -> RenderResult:
    return render_gaussians(scene.mu, scene.quat, scene.log_scale, scene.opacity_logit, scene.color, cam, tile)


def deformed_params(scene: Scene, field, t: float):
    d = field(scene.mu, scene.dyn_attr, t)
    return T.add(scene.mu, d.d_mu), T.add(scene.quat, d.d_quat), T.add(scene.log_scale, d.d_scale)


def render_at_time(scene: Scene, field, t: float, cam: Camera, tile: int | None = TILE) -> RenderResult:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    mu, quat, log_scale = deformed_params(scene, field, t)
    return render_gaussians(mu, quat, log_scale, scene.opacity_logit, scene.color, cam, tile)

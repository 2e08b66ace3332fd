"""Image supervision: L1 + SSIM, patch NCC, Laplacian-pyramid L1 and their weighted total.

Images are (H, W, C) arrays or tensors with values nominally in [0, 1].
Every filter is a separable linear map applied as a pair of matrix products,
so the same code runs under the autodiff tape and in plain evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .engine import NonFiniteError, Tensor, as_tensor
from .engine import tensor as T

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
NCC_EPS = 1e-8
FLAT_VAR = 1e-10
BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _check_same(kind, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _zero_pad_filter(n: int, size: int, sigma: float) -> np.ndarray:
    g = gaussian_kernel(size, sigma)
    r = size // 2
    B = np.zeros((n, n))
    for i in range(n):
        for k in range(-r, r + 1):
            if 0 <= i + k < n:
                B[i, i + k] = g[k + r]
    return B


@lru_cache(maxsize=64)
def _reflect_blur(n: int) -> np.ndarray:
    pad = np.pad(np.eye(n), ((2, 2), (0, 0)), mode="reflect")
    return sum(w * pad[k : k + n] for k, w in enumerate(BINOMIAL))


@lru_cache(maxsize=64)
def _down(n: int) -> np.ndarray:
    return _reflect_blur(n)[::2]


@lru_cache(maxsize=64)
def _up(n: int) -> np.ndarray:
    m = (n + 1) // 2
    Z = np.zeros((n, m))
    Z[2 * np.arange(m), np.arange(m)] = 1.0
    return 2.0 * _reflect_blur(n) @ Z


def _separable(img: Tensor, A: np.ndarray, B: np.ndarray) -> Tensor:
    """``A @ X @ B^T`` per channel for an (H, W, C) image."""
    dt = img.data.dtype
    x = T.transpose(img, (2, 0, 1))
    y = T.matmul(T.matmul(A.astype(dt), x), B.T.astype(dt).copy())
    return T.transpose(y, (1, 2, 0))


# ---------------------------------------------------------------------------
# L1 + SSIM


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Mean SSIM with a Gaussian window and zero padding, dynamic range 1."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same("ssim", a, b)
    H, W = a.shape[:2]
    A, B = _zero_pad_filter(H, window, sigma), _zero_pad_filter(W, window, sigma)

    def blur(x):
        return _separable(x, A, B)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = T.mul(mu_a, mu_a), T.mul(mu_b, mu_b), T.mul(mu_a, mu_b)
    s_aa = T.sub(blur(T.mul(a, a)), mu_aa)
    s_bb = T.sub(blur(T.mul(b, b)), mu_bb)
    s_ab = T.sub(blur(T.mul(a, b)), mu_ab)
    num = T.mul(T.add(T.mul(mu_ab, 2.0), C1), T.add(T.mul(s_ab, 2.0), C2))
    den = T.mul(T.add(T.add(mu_aa, mu_bb), C1), T.add(T.add(s_aa, s_bb), C2))
    return T.mean(T.div(num, den))


def l1_loss(a, b) -> Tensor:
    return T.mean(T.abs_(T.sub(a, b)))


def l1_ssim_loss(render, gt, lambda_ssim: float = 0.2) -> Tensor:
    render, gt = as_tensor(render), as_tensor(gt)
    _check_same("l1_ssim_loss", render, gt)
    l1 = l1_loss(render, gt)
    if lambda_ssim == 0:
        return T.mul(l1, 1.0)
    return T.add(T.mul(l1, 1.0 - lambda_ssim), T.mul(T.sub(1.0, ssim(render, gt)), lambda_ssim))


# ---------------------------------------------------------------------------
# NCC


@lru_cache(maxsize=32)
def _patch_index(H: int, W: int, window: int, stride: int) -> np.ndarray:
    ys = range(0, H - window + 1, stride)
    xs = range(0, W - window + 1, stride)
    oy, ox = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    local = (oy * W + ox).reshape(-1)
    starts = np.array([y * W + x for y in ys for x in xs])
    return starts[:, None] + local[None, :]


def ncc_loss(render, gt, window: int = 11, stride: int = 8) -> Tensor:
    """``1 - mean NCC`` over square patches, each channel scored separately.

    Patches that are flat in either image score 0.
    """
    render, gt = as_tensor(render), as_tensor(gt)
    _check_same("ncc_loss", render, gt)
    if window < 3 or window % 2 == 0:
        raise ValueError("NCC window must be odd and at least 3")
    H, W, C = render.shape
    if window > H or window > W:
        raise ValueError(f"NCC window {window} larger than image {H}x{W}")
    idx = _patch_index(H, W, window, stride)
    dt = render.data.dtype

    def centred(img):
        p = T.gather(T.reshape(img, (H * W, C)), idx, axis=0)  # (P, w*w, C)
        return T.sub(p, T.mean(p, axis=1, keepdims=True))

    rc, gc = centred(render), centred(gt)
    srr = T.sum_(T.mul(rc, rc), axis=1)
    sgg = T.sum_(T.mul(gc, gc), axis=1)
    sgr = T.sum_(T.mul(rc, gc), axis=1)
    n_pix = window * window
    flat = ((srr.data / n_pix < FLAT_VAR) | (sgg.data / n_pix < FLAT_VAR)).astype(dt)
    # flat patches get a unit offset inside the roots so no zero is differentiated
    den = T.add(T.mul(T.sqrt(T.add(srr, flat)), T.sqrt(T.add(sgg, flat))), NCC_EPS)
    ncc = T.mul(T.div(sgr, den), 1.0 - flat)
    return T.sub(1.0, T.mean(ncc))


# ---------------------------------------------------------------------------
# Laplacian pyramid


def gaussian_pyramid_down(img) -> Tensor:
    img = as_tensor(img)
    H, W = img.shape[:2]
    return _separable(img, _down(H), _down(W))


def pyramid_up(img, shape) -> Tensor:
    return _separable(as_tensor(img), _up(shape[0]), _up(shape[1]))


def laplacian_pyramid(img, levels: int = 3) -> tuple[list[Tensor], Tensor]:
    img = as_tensor(img)
    H, W = img.shape[:2]
    if min(H, W) < 2**levels:
        raise ValueError(f"image {H}x{W} too small for {levels} pyramid levels")
    bands = []
    cur = img
    for _ in range(levels):
        down = gaussian_pyramid_down(cur)
        bands.append(T.sub(cur, pyramid_up(down, cur.shape[:2])))
        cur = down
    return bands, cur


def collapse(bands, residual) -> Tensor:
    cur = as_tensor(residual)
    for band in reversed(bands):
        cur = T.add(pyramid_up(cur, band.shape[:2]), band)
    return cur


def pyramid_weights(levels: int, lambda0: float = 1.0, gamma: float = 0.5) -> list[float]:
    """Level 1 is the finest band and carries the largest weight."""
    return [lambda0 * gamma**l for l in range(levels)]


def laplacian_pyramid_loss(render, gt, weights=None, levels: int = 3) -> Tensor:
    render, gt = as_tensor(render), as_tensor(gt)
    _check_same("laplacian_pyramid_loss", render, gt)
    weights = pyramid_weights(levels) if weights is None else list(weights)
    bands_r, _ = laplacian_pyramid(render, len(weights))
    bands_g, _ = laplacian_pyramid(gt, len(weights))
    total = None
    for w, br, bg in zip(weights, bands_r, bands_g):
        term = T.mul(l1_loss(br, bg), w)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# total


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_ncc: float = 0.1
    lambda_lap: float = 0.2
    lambda_dy: float = 0.01
    pyramid_levels: int = 3
    lap_lambda0: float = 1.0
    lap_gamma: float = 0.5
    ncc_window: int = 11
    ncc_stride: int = 8

    def __post_init__(self):
        for k in ("lambda_ncc", "lambda_lap", "lambda_dy"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0 <= self.lambda_ssim <= 1:
            raise ValueError("lambda_ssim must lie in [0, 1]")

    @property
    def level_weights(self) -> list[float]:
        return pyramid_weights(self.pyramid_levels, self.lap_lambda0, self.lap_gamma)


def total_loss(render, gt, dyn_loss: Tensor | None, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of all terms; auxiliary terms with zero weight are skipped."""
    render, gt = as_tensor(render), as_tensor(gt)
    terms = {"orig": l1_ssim_loss(render, gt, weights.lambda_ssim)}
    if weights.lambda_ncc:
        terms["ncc"] = ncc_loss(render, gt, weights.ncc_window, weights.ncc_stride)
    if weights.lambda_lap:
        terms["lap"] = laplacian_pyramid_loss(render, gt, weights.level_weights)
    if weights.lambda_dy and dyn_loss is not None:
        terms["dy"] = dyn_loss
    scale = {"orig": 1.0, "ncc": weights.lambda_ncc, "lap": weights.lambda_lap, "dy": weights.lambda_dy}
    values = {}
    total = None
    for name, term in terms.items():
        v = term.item()
        if not math.isfinite(v):
            raise NonFiniteError(f"loss component {name!r} is not finite")
        values[name] = v
        part = term if scale[name] == 1.0 else T.mul(term, scale[name])
        total = part if total is None else T.add(total, part)
    values["total"] = total.item()
    return total, values


# ---------------------------------------------------------------------------
# evaluation metrics


PSNR_CAP = 99.0


def psnr(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_value(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    return ssim(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).item()

"""Spectral motion representation: a trigonometric series in normalised time
with learnable coefficients and frequencies, fused with spatial hash features
and decoded into per-Gaussian deformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, parameter
from .engine import tensor as T
from .engine.nn import MLP, Linear

SIGMA_SQ_FLOOR = 1e-6


class LaplacianBasis:
    """``L(t) = sum_k alpha_k cos(2 pi f_k t) + beta_k sin(2 pi f_k t)``.

    ``alpha`` and ``beta`` are (K, D) and ``freq`` is (K,).  Frequencies start
    at 0, 1, ..., K-1 and are free to move during training.
    """

    def __init__(self, k: int, dim: int, rng: np.random.Generator, coef_scale: float = 0.1, freq=None):
        if k < 1:
            raise ValueError("need at least one frequency term")
        self.alpha = parameter(rng.normal(0.0, coef_scale, size=(k, dim)), name="laplacian.alpha")
        self.beta = parameter(rng.normal(0.0, coef_scale, size=(k, dim)), name="laplacian.beta")
        f0 = np.arange(k, dtype=np.float64) if freq is None else np.asarray(freq, dtype=np.float64)
        self.freq = parameter(f0, name="laplacian.freq")

    @property
    def k(self) -> int:
        return self.freq.shape[0]

    @property
    def dim(self) -> int:
        return self.alpha.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in (self.alpha, self.beta, self.freq)}

    def __call__(self, t) -> Tensor:
        return laplacian_eval(self, t)


def laplacian_eval(basis: LaplacianBasis, t) -> Tensor:
    """Evaluate the series at time(s) ``t``; scalar t gives (D,), a (B,) batch gives (B, D)."""
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=basis.freq.data.dtype))
    scalar = t.ndim == 0
    tb = T.reshape(t, (-1, 1))  # (B, 1)
    phase = T.mul(T.mul(tb, 2.0 * np.pi), T.reshape(basis.freq, (1, -1)))  # (B, K)
    out = T.add(T.matmul(T.cos(phase), basis.alpha), T.matmul(T.sin(phase), basis.beta))
    return T.reshape(out, (basis.dim,)) if scalar else out


def batch_time_variance(times) -> float:
    """Population variance of a batch of normalised timestamps, floored."""
    return max(float(np.var(np.asarray(times, dtype=np.float64))), SIGMA_SQ_FLOOR)


def frequency_grad_scale(raw_grad_f: np.ndarray, sigma_sq) -> np.ndarray:
    """Divide the frequency gradient by the temporal variance, per frequency."""
    s = np.maximum(np.broadcast_to(np.asarray(sigma_sq, dtype=np.float64), np.shape(raw_grad_f)), SIGMA_SQ_FLOOR)
    return (np.asarray(raw_grad_f) / s).astype(np.asarray(raw_grad_f).dtype)


class TimeMLP:
    """Plain MLP of time, used in place of the series for ablations."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.net = MLP([1, hidden, dim], rng, "time_mlp")

    @classmethod
    def matched(cls, k: int, dim: int, rng: np.random.Generator) -> "TimeMLP":
        target = 2 * k * dim + k
        hidden = max(1, round((target - dim) / (dim + 2)))
        return cls(dim, hidden, rng)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()

    def __call__(self, t) -> Tensor:
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
        scalar = t.ndim == 0
        out = self.net(T.reshape(t, (-1, 1)))
        return T.reshape(out, (out.shape[1],)) if scalar else out


def attention_fuse(l_t: Tensor, gate: Tensor) -> Tensor:
    """Elementwise product of the series output with the spatial gate ``MLP(H_s)``."""
    if l_t.shape[-1] != gate.shape[-1]:
        raise ValueError(f"attention_fuse: series width {l_t.shape[-1]} != gate width {gate.shape[-1]}")
    return T.mul(l_t, gate)


@dataclass
class DeformationOutput:
    d_mu: Tensor
    d_quat: Tensor
    d_scale: Tensor


class DeformationDecoder:
    """Trunk MLP on ``concat(A_L, A_h)`` with zero-initialised linear heads."""

    def __init__(self, n_in: int, width: int, depth: int, rng: np.random.Generator):
        sizes = [n_in] + [width] * depth
        self.trunk = [Linear(a, b, rng, f"decoder.trunk.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.heads = {
            "d_mu": Linear(width, 3, rng, "decoder.head_mu", zero=True),
            "d_quat": Linear(width, 4, rng, "decoder.head_quat", zero=True),
            "d_scale": Linear(width, 3, rng, "decoder.head_scale", zero=True),
        }

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.trunk + list(self.heads.values()):
            out.update(layer.parameters())
        return out

    def __call__(self, a_l: Tensor, a_h: Tensor) -> DeformationOutput:
        return predict_deformation(self, a_l, a_h)


def predict_deformation(decoder: DeformationDecoder, a_l: Tensor, a_h: Tensor) -> DeformationOutput:
    x = T.concat([a_l, a_h], axis=1)
    for layer in decoder.trunk:
        x = T.relu(layer(x))
    return DeformationOutput(*(decoder.heads[k](x) for k in ("d_mu", "d_quat", "d_scale")))

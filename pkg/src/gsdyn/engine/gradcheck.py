"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward, precision


def finite_diff_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    eps: float | None = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` receives one :class:`Tensor` per array in ``point`` and returns a
    scalar.  The step for coordinate ``x`` is ``eps * max(1, |x|)``.  When
    ``coords`` is given, only that many randomly chosen coordinates per
    input are probed (large tables).
    """
    single = isinstance(point, np.ndarray)
    arrays = [np.array(point if single else p, dtype=np.float64) for p in ([point] if single else point)]
    with precision(64):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
        analytic = backward(tape, out, params=leaves)

        def evaluate(vals):
            res = fn(*[Tensor(v) for v in vals]).item()
            return res

        worst = 0.0
        for k, base in enumerate(arrays):
            flat = base.reshape(-1)
            idx = np.arange(flat.size)
            if coords is not None and coords < flat.size:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
            g_an = analytic[leaves[k]].reshape(-1)
            for j in idx:
                h = eps * max(1.0, abs(flat[j]))
                vals = [a.copy() for a in arrays]
                vals[k].reshape(-1)[j] = flat[j] + h
                fp = evaluate(vals)
                vals[k].reshape(-1)[j] = flat[j] - h
                fm = evaluate(vals)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"function is non-finite near input {k} coordinate {j}")
                central = (fp - fm) / (2 * h)
                err = abs(g_an[j] - central) / max(1.0, abs(central))
                worst = max(worst, err)
    return worst

"""Finite-difference gradient verification shared by the test suite and CLI.

Checks run in the float32 forward path, so the difference step and tolerance
are chosen for roughly 7 significant digits: central differences with
eps ~ 1e-2 on unit-scale inputs keep truncation and rounding error both below
the 1e-3 relative tolerance the comparisons use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b) + 1e-12
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(
    fn: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    wrt: int,
    coords: Sequence[tuple] | None = None,
    eps: float = 1e-2,
) -> np.ndarray:
    """Central-difference gradient of scalar fn at arrays[wrt].

    When `coords` is given only those entries are probed and the rest of the
    returned array is NaN; callers compare just the probed coordinates.
    """
    base = [np.array(a, dtype=np.float32) for a in arrays]
    target = base[wrt]
    if coords is None:
        coords = list(np.ndindex(target.shape))
    out = np.full(target.shape, np.nan, dtype=np.float64)
    for c in coords:
        orig = target[c]
        target[c] = orig + eps
        hi = float(fn(base))
        target[c] = orig - eps
        lo = float(fn(base))
        target[c] = orig
        out[c] = (hi - lo) / (2.0 * eps)
    return out


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    rtol: float = 1e-3,
    eps: float = 1e-2,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare autodiff gradients of `build` against central differences.

    `build` maps leaf tensors to a scalar Tensor. Every input is checked on a
    random subset of coordinates. Returns the worst relative error seen and
    raises AssertionError beyond `rtol`.
    """
    rng = rng or np.random.default_rng(0)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)

    def fn(arrs):
        frozen = [Tensor(a, requires_grad=False) for a in arrs]
        return float(build(frozen).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        all_coords = list(np.ndindex(leaf.data.shape))
        if len(all_coords) > max_coords:
            picks = rng.choice(len(all_coords), size=max_coords, replace=False)
            coords = [all_coords[int(p)] for p in picks]
        else:
            coords = all_coords
        numeric = numeric_grad(fn, arrays, i, coords=coords, eps=eps)
        mask = ~np.isnan(numeric)
        err = relative_error(analytic[mask], numeric[mask])
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: relative error {err:.3e} > {rtol:.1e}"
            )
    return worst

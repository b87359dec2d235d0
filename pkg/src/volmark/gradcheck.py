"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], which: int,
                     positions: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``inputs[which]`` at flat ``positions``."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    out = np.empty(len(positions))
    for j, p in enumerate(positions):
        vals = []
        for sign in (1.0, -1.0):
            shifted = base[which].copy()
            shifted.flat[p] += sign * eps
            args = [Tensor(shifted) if i == which else Tensor(x) for i, x in enumerate(base)]
            vals.append(fn(*args).item())
        out[j] = (vals[0] - vals[1]) / (2.0 * eps)
    return out


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
               floor: float = 1e-7, max_checks: int | None = None, seed: int = 0,
               corrupt: bool = False) -> float:
    """Worst relative error between tape and finite-difference gradients.

    Args:
        fn: maps one tensor per entry of ``inputs`` to a 0-d tensor.
        inputs: float64 arrays; each is differentiated.
        eps: finite-difference half step.
        floor: denominator floor for entries whose true gradient is ~0.
        max_checks: if set, only this many randomly chosen entries per input
            are differenced (the tape gradient is still computed in full).
        corrupt: perturb the tape gradient before comparing; a harness
            self-test that must make the check fail.

    Returns:
        The maximum elementwise relative error over all checked entries.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tracked = [Tensor(x, requires_grad=True) for x in arrays]
    grads = backward(fn(*tracked))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(tracked):
        analytic = np.array(grads[t], dtype=np.float64).ravel()
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        positions = np.arange(t.size)
        if max_checks is not None and t.size > max_checks:
            positions = np.sort(rng.choice(t.size, size=max_checks, replace=False))
        numeric = numeric_gradient(fn, arrays, i, positions, eps)
        if len(positions):
            worst = max(worst, float(relative_error(analytic[positions], numeric, floor).max()))
    return worst

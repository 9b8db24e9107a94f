"""Central finite-difference gradient checks (independent of the backward pass)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    checked: int
    max_rel_error: float
    max_abs_error_small: float  # over entries where |analytic| < abs_floor
    failures: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, index: tuple[int, ...], h: float) -> float:
    orig = param.data[index].copy()
    param.data[index] = orig + h
    up = float(loss_fn().data)
    param.data[index] = orig - h
    down = float(loss_fn().data)
    param.data[index] = orig
    return (up - down) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int | None = 20,
    h: float = 1e-3,
    rel_tol: float = 1e-2,
    abs_floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``n_samples`` entries are drawn uniformly over all parameter entries
    (``None`` checks every entry).  Entries whose analytic gradient is below
    ``abs_floor`` are judged by absolute error instead of relative error.
    """
    analytic = backward(loss_fn(), params)
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if n_samples is None or n_samples >= total else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    max_rel = 0.0
    max_abs = 0.0
    failures = []
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(int(f - offsets[k]), params[name].shape)
        a = float(analytic[name][idx])
        n = numeric_grad(loss_fn, params[name], idx, h)
        err = abs(a - n)
        if abs(a) < abs_floor:
            max_abs = max(max_abs, err)
            if err > abs_floor:
                failures.append((name, idx, a, n))
        else:
            rel = err / max(abs(a), abs(n))
            max_rel = max(max_rel, rel)
            if rel > rel_tol:
                failures.append((name, idx, a, n))
    return GradCheckResult(len(flat), max_rel, max_abs, failures)

"""Finite-difference verification of analytic gradients.

The caller provides a scalar loss closure over named parameter arrays
(typically float64 shadow copies of the float32 model) plus the analytic
gradients to verify.  Each checked coordinate is perturbed in place by
+/- epsilon and the central difference is compared against the analytic
value.  Relative error uses max(|analytic|, |numeric|, floor) as the
denominator so coordinates with exactly-zero gradients do not divide by
noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    block: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    coords_checked: int

    def to_json(self) -> str:
        payload = {
            "max_rel_error": self.max_rel_error,
            "block": self.block,
            "index": list(self.index),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "coords_checked": self.coords_checked,
        }
        return json.dumps(payload, sort_keys=True)


def grad_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic_grads: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    *,
    max_coords_per_block: int | None = None,
    rng: np.random.Generator | None = None,
    denom_floor: float = 1e-8,
) -> GradCheckResult:
    """Compare analytic gradients to central finite differences.

    *loss_fn* must read the arrays in *params* (they are mutated in place
    and restored).  When *max_coords_per_block* is set, a random subset of
    coordinates per block is checked using *rng*.
    """
    worst = GradCheckResult(
        max_rel_error=0.0, block="", index=(), analytic=0.0, numeric=0.0, coords_checked=0
    )
    checked = 0
    for name, p in params.items():
        grad = analytic_grads[name]
        if grad.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for block {name!r}")
        flat_indices = np.arange(p.size)
        if max_coords_per_block is not None and p.size > max_coords_per_block:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_indices = rng.choice(p.size, size=max_coords_per_block, replace=False)
            flat_indices.sort()
        flat_p = p.reshape(-1)
        flat_g = grad.reshape(-1)
        for idx in flat_indices:
            original = flat_p[idx]
            flat_p[idx] = original + epsilon
            f_plus = loss_fn()
            flat_p[idx] = original - epsilon
            f_minus = loss_fn()
            flat_p[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = float(flat_g[idx])
            denom = max(abs(analytic), abs(numeric), denom_floor)
            rel = abs(analytic - numeric) / denom
            checked += 1
            if rel > worst.max_rel_error:
                worst = GradCheckResult(
                    max_rel_error=rel,
                    block=name,
                    index=tuple(int(i) for i in np.unravel_index(int(idx), p.shape)),
                    analytic=analytic,
                    numeric=numeric,
                    coords_checked=checked,
                )
    worst.coords_checked = checked
    return worst

"""Central finite-difference verification of analytic gradients.

The contract checked everywhere: with float64 data and step h=1e-4, each
coordinate must satisfy |analytic - numeric| / max(|analytic|, |numeric|)
< 1e-4 whenever that denominator exceeds 1e-6, and |analytic - numeric|
< 1e-7 otherwise.

Checks re-run the forward closure from scratch for every probe, so the
numeric side never touches the analytic adjoints it validates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Variable

H_STEP = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-7
GRAD_FLOOR = 1e-6


@dataclass
class CoordinateFailure:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        if denom > GRAD_FLOOR:
            return abs(self.analytic - self.numeric) / denom
        return abs(self.analytic - self.numeric)

    def __str__(self):
        return (f"{self.name}{list(self.index)}: analytic={self.analytic:.6e} "
                f"numeric={self.numeric:.6e} err={self.error:.3e}")


@dataclass
class GradCheckResult:
    checked: int = 0
    failures: list[CoordinateFailure] = field(default_factory=list)
    max_rel: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def merge(self, other: "GradCheckResult") -> "GradCheckResult":
        self.checked += other.checked
        self.failures.extend(other.failures)
        self.max_rel = max(self.max_rel, other.max_rel)
        return self


def _coordinate_ok(analytic: float, numeric: float) -> tuple[bool, float]:
    denom = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    if denom > GRAD_FLOOR:
        return diff / denom < REL_TOL, diff / denom
    return diff < ABS_TOL, diff


def numeric_gradient(fn: Callable[[], float], var: Variable,
                     indices: Sequence[tuple] | None = None,
                     h: float = H_STEP) -> dict[tuple, float]:
    """Central differences of fn() with respect to selected coordinates."""
    if var.data.dtype != np.float64:
        raise ValueError("finite differences require float64 data")
    if indices is None:
        indices = list(np.ndindex(var.data.shape))
    grads: dict[tuple, float] = {}
    for idx in indices:
        saved = var.data[idx]
        var.data[idx] = saved + h
        f_plus = float(fn())
        var.data[idx] = saved - h
        f_minus = float(fn())
        var.data[idx] = saved
        grads[idx] = (f_plus - f_minus) / (2.0 * h)
    return grads


def check_gradients(build_loss: Callable[[], Variable],
                    variables: dict[str, Variable],
                    max_coords_per_var: int | None = None,
                    rng: np.random.Generator | None = None,
                    h: float = H_STEP) -> GradCheckResult:
    """Compare analytic grads of a scalar loss against central differences.

    ``build_loss`` must rebuild the forward graph from the variables' current
    ``data`` every call. When ``max_coords_per_var`` is set, a deterministic
    random subset of coordinates is probed per variable (full check otherwise).
    """
    for name, var in variables.items():
        if not var.requires_grad:
            raise ValueError(f"variable {name!r} does not require grad")
        var.zero_grad()

    loss = build_loss()
    if loss.data.dtype != np.float64:
        raise ValueError("gradcheck must run in float64")
    loss.backward()
    analytic = {name: var.grad.copy() for name, var in variables.items()}

    def scalar_loss() -> float:
        return build_loss().data.item()

    result = GradCheckResult()
    rng = rng or np.random.default_rng(0)
    for name, var in variables.items():
        n = var.data.size
        all_indices = list(np.ndindex(var.data.shape))
        if max_coords_per_var is not None and n > max_coords_per_var:
            pick = rng.choice(n, size=max_coords_per_var, replace=False)
            indices = [all_indices[i] for i in sorted(pick)]
        else:
            indices = all_indices
        numeric = numeric_gradient(scalar_loss, var, indices, h=h)
        for idx, num in numeric.items():
            ana = float(analytic[name][idx])
            ok, err = _coordinate_ok(ana, num)
            result.checked += 1
            result.max_rel = max(result.max_rel, err)
            if not ok:
                result.failures.append(CoordinateFailure(name, idx, ana, num))
    return result

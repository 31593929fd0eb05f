"""AdamW with decoupled weight decay and the warmup/cosine one-cycle schedule.

The schedule climbs linearly from ``lr_warm_start`` to ``lr_peak`` over the
first ``warmup_frac`` of steps, then follows a half-cosine down to
``lr_final``; both pieces meet at the peak, so the curve is continuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Variable


@dataclass(frozen=True)
class ScheduleConfig:
    lr_warm_start: float = 0.00002
    lr_peak: float = 0.001
    warmup_frac: float = 0.10
    lr_final: float = 0.0002

    def __post_init__(self):
        if not (0.0 < self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must lie in (0, 1)")
        if min(self.lr_warm_start, self.lr_peak, self.lr_final) <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(step: int, total: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Learning rate for ``step`` of ``total`` training steps."""
    if not (0 <= step <= total):
        raise ValueError(f"step {step} outside [0, {total}]")
    warm_end = cfg.warmup_frac * total
    if step <= warm_end:
        frac = step / warm_end if warm_end > 0 else 1.0
        return cfg.lr_warm_start + (cfg.lr_peak - cfg.lr_warm_start) * frac
    tau = (step - warm_end) / (total - warm_end)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * tau))


@dataclass
class AdamWState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: list[Variable], lr: float, state: AdamWState,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One in-place update; decoupled decay first, then bias-corrected Adam.

    Moment buffers key off position in ``params``, which must stay stable
    across steps. Raises on non-finite gradients rather than corrupting state.
    """
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {i} has no gradient buffer")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i}")
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)

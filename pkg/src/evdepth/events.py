"""Asynchronous event streams and their fixed-size frame encodings.

An ``EventStream`` is a time-sorted struct-of-arrays of (t, x, y, polarity)
records over a known sensor extent and time window. ``voxelize`` bins the
stream into a ``[B,H,W]`` signed-count grid: each event lands in exactly one
temporal bin and adds its polarity at its pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EventStream:
    t: np.ndarray          # float64 seconds, non-decreasing
    x: np.ndarray          # int column indices in [0, width)
    y: np.ndarray          # int row indices in [0, height)
    polarity: np.ndarray   # int8 in {-1, +1}
    height: int
    width: int
    t0: float
    t1: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ValueError("event field lengths disagree")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if self.t[0] < self.t0 or self.t[-1] > self.t1:
                raise ValueError("event timestamps fall outside the window")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("event x coordinate out of range")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event y coordinate out of range")
            if not np.all(np.abs(self.polarity) == 1):
                raise ValueError("polarity must be +1 or -1")

    def __len__(self):
        return len(self.t)

    @staticmethod
    def empty(height: int, width: int, t0: float, t1: float) -> "EventStream":
        z = np.zeros(0)
        return EventStream(z, z, z, z.astype(np.int8), height, width, t0, t1)


def voxelize(stream: EventStream, bins: int = 4) -> np.ndarray:
    """Bin a stream into a [B,H,W] signed-count grid.

    An event at time t goes to bin floor(B*(t-t0)/(t1-t0)), clamped to the
    last bin at t == t1. Opposite polarities at the same cell cancel, so the
    grid sum always equals the stream's polarity sum.
    """
    if stream.t1 <= stream.t0:
        raise ValueError(f"window [{stream.t0}, {stream.t1}] must have positive length")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float32)
    if len(stream) == 0:
        return grid
    span = stream.t1 - stream.t0
    b = np.minimum((bins * (stream.t - stream.t0) / span).astype(np.int64), bins - 1)
    np.add.at(grid, (b, stream.y, stream.x), stream.polarity.astype(np.float32))
    return grid


def window_select(all_events: EventStream, t_center: float,
                  half_width: float = 0.015) -> EventStream:
    """Keep events with t in the closed interval [t_center-hw, t_center+hw]."""
    if half_width <= 0:
        raise ValueError("half_width must be positive")
    lo = t_center - half_width
    hi = t_center + half_width
    i0 = np.searchsorted(all_events.t, lo, side="left")
    i1 = np.searchsorted(all_events.t, hi, side="right")
    return EventStream(all_events.t[i0:i1].copy(), all_events.x[i0:i1].copy(),
                       all_events.y[i0:i1].copy(), all_events.polarity[i0:i1].copy(),
                       all_events.height, all_events.width, lo, hi)

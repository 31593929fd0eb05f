"""Depth evaluation metrics over valid (ground truth > 0) pixels.

RMSE and MAE are reported in millimeters from meter-valued maps, REL is the
mean absolute relative error, and each threshold accuracy is the percentage
of pixels whose bidirectional ratio max(D/Z, Z/D) stays below the threshold.
Pixels pool across the whole dataset by default; ``per_image`` averages the
per-sample metrics instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_PREDICTION = 1e-3   # meters; clamp before ratio metrics
DELTA_THRESHOLDS = (1.05, 1.10, 1.15)


@dataclass
class MetricsReport:
    rmse_mm: float
    mae_mm: float
    rel: float
    delta_105: float
    delta_110: float
    delta_115: float
    n_valid: int

    def as_dict(self) -> dict[str, float]:
        return {
            "rmse_mm": self.rmse_mm,
            "mae_mm": self.mae_mm,
            "rel": self.rel,
            "delta_1.05": self.delta_105,
            "delta_1.10": self.delta_110,
            "delta_1.15": self.delta_115,
            "n_valid": self.n_valid,
        }

    def __post_init__(self):
        if not (0 <= self.delta_105 <= self.delta_110 <= self.delta_115 <= 100.0 + 1e-9):
            raise ValueError("threshold accuracies must be nested within [0, 100]")
        if self.rmse_mm + 1e-9 < self.mae_mm or self.mae_mm < 0:
            raise ValueError("need RMSE >= MAE >= 0")


def _collect(prediction: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if prediction.shape != gt.shape:
        raise ValueError(f"prediction {prediction.shape} vs gt {gt.shape}")
    valid = gt > 0
    return prediction[valid], gt[valid]


def compute_metrics(predictions: list[np.ndarray], gts: list[np.ndarray],
                    per_image: bool = False) -> MetricsReport:
    """Metrics over matched prediction/ground-truth lists."""
    if len(predictions) != len(gts) or not predictions:
        raise ValueError("need equal, non-empty prediction and ground-truth lists")
    pairs = [_collect(p, z) for p, z in zip(predictions, gts)]
    if per_image:
        parts = []
        for d, z in pairs:
            if d.size == 0:
                raise ValueError("a sample has no valid pixels")
            parts.append(_metric_values(d, z))
        stacked = np.array(parts)
        mean = stacked.mean(axis=0)
        n = int(sum(d.size for d, _ in pairs))
        return MetricsReport(*mean, n_valid=n)
    d = np.concatenate([p for p, _ in pairs])
    z = np.concatenate([g for _, g in pairs])
    if d.size == 0:
        raise ValueError("no valid pixels in the whole dataset")
    return MetricsReport(*_metric_values(d, z), n_valid=int(d.size))


def _metric_values(d: np.ndarray, z: np.ndarray) -> tuple[float, ...]:
    err = d - z
    rmse = 1000.0 * float(np.sqrt(np.mean(err * err)))
    mae = 1000.0 * float(np.mean(np.abs(err)))
    rel = float(np.mean(np.abs(err) / z))
    d_safe = np.maximum(d, MIN_PREDICTION)
    ratio = np.maximum(d_safe / z, z / d_safe)
    deltas = tuple(100.0 * float(np.mean(ratio < t)) for t in DELTA_THRESHOLDS)
    return (rmse, mae, rel) + deltas

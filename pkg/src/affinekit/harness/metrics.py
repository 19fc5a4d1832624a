"""Two-sample distances used in place of FID."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """2 E|X - Y| - E|X - X'| - E|Y - Y'| with V-statistic means."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def mmd_rbf(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased squared MMD with a Gaussian kernel; median heuristic bandwidth by default."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    dxy = cdist(x, y, "sqeuclidean")
    if bandwidth is None:
        bandwidth = float(np.sqrt(0.5 * np.median(dxy)))
    g = 1.0 / (2 * bandwidth ** 2)
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean")).mean()
    kxy = np.exp(-g * dxy).mean()
    return float(kxx + kyy - 2 * kxy)


def mode_coverage(samples: np.ndarray, means: np.ndarray, radius: float) -> np.ndarray:
    """Fraction of samples within ``radius`` of each mode."""
    d = cdist(np.asarray(samples).reshape(len(samples), -1), means)
    return (d <= radius).mean(axis=0)

"""Gaussian density maps, detection weight maps and peak extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

SUPPORT_EPS = 1e-8
PEAK_FLOOR = 1e-4


@dataclass
class DensityMap:
    values: np.ndarray
    sigma: float

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class WeightMaps:
    w: np.ndarray
    beta: np.ndarray


@dataclass
class PeakSet:
    peaks: list[tuple[int, int, float]]
    nms_radius: float

    def __len__(self):
        return len(self.peaks)

    @property
    def coords(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c, _ in self.peaks]


def render_density(points, H: int, W: int, sigma: float) -> DensityMap:
    """Sum of unit-mass Gaussians truncated at 4 sigma and renormalized inside the grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = np.zeros((H, W), dtype=np.float64)
    rad = int(math.ceil(4 * sigma))
    for r, c in points:
        r, c = int(r), int(c)
        r0, r1 = max(0, r - rad), min(H, r + rad + 1)
        c0, c1 = max(0, c - rad), min(W, c + rad + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        gy = np.exp(-((np.arange(r0, r1) - r) ** 2) / (2 * sigma * sigma))
        gx = np.exp(-((np.arange(c0, c1) - c) ** 2) / (2 * sigma * sigma))
        k = np.outer(gy, gx)
        out[r0:r1, c0:c1] += k / k.sum()
    return DensityMap(out, float(sigma))


def _fg(fg_prob) -> np.ndarray:
    a = np.asarray(fg_prob, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[0] != 2:
            raise ValueError(f"expected a 2-channel probability map, got {a.shape}")
        a = a[1]
    return a


def build_weight_maps(sparse_points, fg_prob, rho: float = 0.1, sigma2: float = 2.0,
                      sigma1: float = 10.0) -> WeightMaps:
    """Target weight map w and focus weight beta for the partial detection loss.

    w is 1 on confident background (foreground probability below ``rho``) and
    on the support of the sparse-point heatmap, 0 elsewhere.
    """
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    fg = _fg(fg_prob)
    H, W = fg.shape
    hbar = render_density(sparse_points, H, W, sigma1).values
    w = ((fg < rho) | (hbar > SUPPORT_EPS)).astype(np.float32)
    beta = render_density(sparse_points, H, W, sigma2).values
    return WeightMaps(w, beta)


def extract_peaks(heatmap, nms_radius: float = 4.0, keep_fraction: float = 0.8,
                  floor: float = PEAK_FLOOR) -> PeakSet:
    """3x3 local maxima above ``floor``, greedy NMS, then the top ``keep_fraction`` (ceil)."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if nms_radius < 1:
        raise ValueError(f"nms_radius must be >= 1, got {nms_radius}")
    h = heatmap.values if isinstance(heatmap, DensityMap) else np.asarray(heatmap, dtype=np.float64)
    is_max = (h == ndi.maximum_filter(h, size=3, mode="constant", cval=-np.inf)) & (h > floor)
    rr, cc = np.nonzero(is_max)
    if rr.size == 0:
        return PeakSet([], nms_radius)
    scores = h[rr, cc]
    order = np.lexsort((cc, rr, -scores))  # score desc, then raster order
    kept: list[tuple[int, int, float]] = []
    r2 = nms_radius * nms_radius
    for i in order:
        r, c = int(rr[i]), int(cc[i])
        if all((r - kr) ** 2 + (c - kc) ** 2 > r2 for kr, kc, _ in kept):
            kept.append((r, c, float(scores[i])))
    n = int(math.ceil(keep_fraction * len(kept)))
    return PeakSet(kept[:n], nms_radius)

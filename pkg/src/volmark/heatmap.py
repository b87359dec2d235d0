"""Gaussian heatmap targets and argmax decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkSet

DEFAULT_SIGMA = 3.0
DEFAULT_PRESENCE_THRESHOLD = 0.25
FULL_RESOLUTION = (128, 128, 64)


@dataclass(frozen=True)
class HeatmapVolume:
    """Per-landmark heatmaps, ``values`` shaped ``(H, W, D, L)``."""

    values: np.ndarray
    sigma: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[:3])

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def scaled_sigma(dims, sigma: float = DEFAULT_SIGMA, reference=FULL_RESOLUTION) -> float:
    """Scale a full-resolution sigma to a smaller volume (by the mean axis ratio)."""
    ratio = np.mean(np.asarray(dims, dtype=float) / np.asarray(reference, dtype=float))
    return float(sigma * ratio)


def encode_heatmaps(landmarks: LandmarkSet, dims, sigma: float = DEFAULT_SIGMA,
                    dtype=np.float64) -> HeatmapVolume:
    """One isotropic Gaussian per present landmark, sampled at integer voxel centers."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    dims = tuple(int(n) for n in dims)
    landmarks.check_bounds(dims)
    out = np.zeros(dims + (landmarks.count,), dtype=dtype)
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    for i in np.flatnonzero(landmarks.present):
        gx, gy, gz = (np.exp(-(a - c) ** 2 / (2.0 * sigma ** 2)) for a, c in zip(axes, landmarks.coords[i]))
        out[..., i] = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    return HeatmapVolume(out, float(sigma))


def _values(h) -> np.ndarray:
    return h.values if isinstance(h, HeatmapVolume) else np.asarray(h)


def _centroid(channel: np.ndarray, peak) -> np.ndarray:
    lo = [max(p - 1, 0) for p in peak]
    hi = [min(p + 2, n) for p, n in zip(peak, channel.shape)]
    patch = np.clip(channel[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 0.0, None)
    total = patch.sum()
    if total <= 0:
        return np.asarray(peak, dtype=np.float64)
    grids = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    return np.array([(g * patch).sum() / total for g in grids])


def decode_peaks(h, presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD,
                 spacing=(1.0, 1.0, 1.0), refine: bool = False, names=()) -> LandmarkSet:
    """Per-channel argmax.

    Ties go to the lowest x, then y, then z. A channel whose peak is below
    ``presence_threshold`` decodes as absent. ``refine`` replaces the voxel
    peak with the centroid of its 3x3x3 neighbourhood.
    """
    v = _values(h)
    n = v.shape[-1]
    coords = np.zeros((n, 3))
    present = np.zeros(n, dtype=bool)
    for i in range(n):
        ch = v[..., i]
        flat = int(np.argmax(ch))
        peak = np.unravel_index(flat, ch.shape)
        present[i] = ch.flat[flat] >= presence_threshold
        coords[i] = _centroid(ch, peak) if refine else peak
    return LandmarkSet(coords, present, spacing, names)


def sum_heatmap(h) -> np.ndarray:
    """Sum over landmark channels; for export and display only."""
    return _values(h).sum(axis=-1)

"""Anchor lattice, offset/existence targets and decoding.

Sites sit on a regular lattice with spacing ``unit`` input voxels; the site
``(i, j, k)`` has center ``((i, j, k) + 0.5) * unit``. Each site carries one
anchor per radius. Channel layout of the flattened targets and predictions:

* existence: channel ``l * n_a + a`` for landmark ``l`` and radius ``a``;
* offsets: channels ``3 * (l * n_a + a) + axis``.

Sites are enumerated x-fastest (site index ``i + H' * (j + W' * k)``); an
anchor's index is ``site * n_a + a``. Ties are always broken toward the lower
anchor index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkSet

DEFAULT_UNIT = 4
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class AnchorGrid:
    dims: tuple[int, int, int]
    unit: float
    radii: tuple[float, ...]

    @property
    def n_anchors(self) -> int:
        return len(self.radii)

    @property
    def centers(self) -> np.ndarray:
        """``(H', W', D', 3)`` site centers in input-voxel coordinates."""
        grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in self.dims), indexing="ij")
        return (np.stack(grids, axis=-1) + 0.5) * self.unit

    def xfast(self, a: np.ndarray) -> np.ndarray:
        """Reorder a ``(H', W', D', ...)`` array to x-fastest site order, flattened."""
        return np.swapaxes(a, 0, 2).reshape((-1,) + a.shape[3:])


@dataclass(frozen=True)
class AnchorTargets:
    offsets: np.ndarray  # (H', W', D', 3 * L * n_a); zero except at positives
    labels: np.ndarray  # (H', W', D', L * n_a) in {0, 1}

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0.5


def default_radii(unit: float) -> tuple[float, ...]:
    return (0.5 * unit, 1.0 * unit, 1.5 * unit)


def build_grid(feature_dims, unit: float = DEFAULT_UNIT, radii=None, input_dims=None) -> AnchorGrid:
    """Lattice matching a prediction map of extent ``feature_dims``."""
    if unit < 1:
        raise ValueError(f"unit spacing must be >= 1, got {unit}")
    radii = default_radii(unit) if radii is None else tuple(float(r) for r in radii)
    if not radii:
        raise ValueError("at least one anchor radius is required")
    if min(radii) <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be positive and strictly increasing, got {radii}")
    dims = tuple(int(n) for n in feature_dims)
    if input_dims is not None and tuple(int(n) for n in input_dims) != tuple(int(n * unit) for n in dims):
        raise ValueError(f"feature dims {dims} x unit {unit} do not cover input {tuple(input_dims)}")
    return AnchorGrid(dims, float(unit), radii)


def nearest_anchor(g, grid: AnchorGrid) -> tuple[int, int, int]:
    """Site (i, j, k) whose center is closest to ``g``; ties to the lower site index."""
    d2 = ((grid.centers - np.asarray(g, dtype=np.float64)) ** 2).sum(axis=-1)
    site = int(np.argmin(grid.xfast(d2)))
    h, w, _ = grid.dims
    return site % h, (site // h) % w, site // (h * w)


def encode_targets(landmarks: LandmarkSet, grid: AnchorGrid) -> AnchorTargets:
    """Offsets ``t = (g - f) / r`` and existence labels per anchor.

    An anchor is positive when ``max|g - f| <= r``; the nearest site's
    smallest-radius anchor is always positive. Absent landmarks produce no
    positives.
    """
    centers = grid.centers
    n_a = grid.n_anchors
    n = landmarks.count
    offsets = np.zeros(grid.dims + (n, n_a, 3))
    labels = np.zeros(grid.dims + (n, n_a))
    for l in np.flatnonzero(landmarks.present):
        g = landmarks.coords[l]
        delta = g - centers
        cheb = np.abs(delta).max(axis=-1)
        for a, r in enumerate(grid.radii):
            labels[..., l, a] = cheb <= r
        labels[nearest_anchor(g, grid) + (l, 0)] = 1.0
        for a, r in enumerate(grid.radii):
            pos = labels[..., l, a] > 0
            offsets[..., l, a, :][pos] = delta[pos] / r
    return AnchorTargets(offsets.reshape(grid.dims + (3 * n * n_a,)),
                         labels.reshape(grid.dims + (n * n_a,)))


def decode_predictions(offsets, probs, grid: AnchorGrid, tau: float = DEFAULT_TAU,
                       spacing=(1.0, 1.0, 1.0), names=()) -> LandmarkSet:
    """Pick the most probable anchor per landmark and undo the offset encoding.

    A landmark whose best probability is below ``tau`` decodes as absent.
    """
    probs = np.asarray(probs, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    n_a = grid.n_anchors
    if probs.shape[:3] != grid.dims or probs.shape[3] % n_a:
        raise ValueError(f"probabilities {probs.shape} do not match grid {grid.dims} x {n_a} anchors")
    n = probs.shape[3] // n_a
    if offsets.shape != grid.dims + (3 * n * n_a,):
        raise ValueError(f"offsets {offsets.shape} do not match probabilities {probs.shape}")
    p = grid.xfast(probs.reshape(grid.dims + (n, n_a)))  # (sites, L, n_a)
    t = grid.xfast(offsets.reshape(grid.dims + (n, n_a, 3)))
    f = grid.xfast(grid.centers)
    radii = np.asarray(grid.radii)
    coords = np.zeros((n, 3))
    present = np.zeros(n, dtype=bool)
    for l in range(n):
        best = int(np.argmax(p[:, l, :]))
        site, a = divmod(best, n_a)
        present[l] = p[site, l, a] >= tau
        coords[l] = f[site] + radii[a] * t[site, l, a]
    return LandmarkSet(coords, present, spacing, names)

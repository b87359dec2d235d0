"""Landmark sets in voxel coordinates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LandmarkSet:
    """``N`` landmarks, coordinates ``(x, y, z)`` in voxels, with presence flags.

    ``spacing`` is the physical voxel size in mm along each axis.
    """

    coords: np.ndarray
    present: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.coords = np.array(self.coords, dtype=np.float64).reshape(-1, 3)
        self.present = np.array(self.present, dtype=bool).reshape(-1)
        if len(self.present) != len(self.coords):
            raise ValueError(f"{len(self.coords)} coordinates but {len(self.present)} presence flags")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if not self.names:
            self.names = tuple(f"L{i}" for i in range(len(self.coords)))
        self.names = tuple(self.names)
        if len(self.names) != len(self.coords):
            raise ValueError("one name per landmark required")
        self.coords[~self.present] = 0.0

    @property
    def count(self) -> int:
        return len(self.coords)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.count)

    def check_bounds(self, dims) -> None:
        """Raise if a present landmark lies outside ``[0, n - 1]`` on any axis."""
        hi = np.asarray(dims, dtype=np.float64) - 1.0
        c = self.coords[self.present]
        bad = (c < 0).any(axis=1) | (c > hi).any(axis=1)
        if bad.any():
            idx = np.flatnonzero(self.present)[bad][0]
            raise ValueError(f"landmark {idx} at {tuple(self.coords[idx])} is outside volume {tuple(dims)}")

    def copy(self, coords=None, present=None) -> "LandmarkSet":
        return LandmarkSet(self.coords.copy() if coords is None else coords,
                           self.present.copy() if present is None else present,
                           self.spacing, self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (np.array_equal(self.coords, other.coords) and np.array_equal(self.present, other.present)
                and self.spacing == other.spacing and self.names == other.names)

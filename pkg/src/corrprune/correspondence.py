"""Putative correspondence container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class CorrespondenceSet:
    """N putative matches in normalized (calibrated) coordinates.

    coords: (N, 4) rows ``(x, y, x', y')``; labels: optional (N,) 0/1 inlier
    labels; essential: optional 3x3 ground-truth essential matrix.
    """

    coords: np.ndarray
    labels: Optional[np.ndarray] = None
    essential: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 4:
            raise ValueError(f"coords must have shape (N, 4), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(np.int8)
            if self.labels.shape != (len(self.coords),):
                raise ValueError("labels length must equal the number of rows")
            if not np.isin(self.labels, (0, 1)).all():
                raise ValueError("labels must be 0 or 1")
        if self.essential is not None:
            self.essential = np.asarray(self.essential, dtype=np.float64).reshape(3, 3)

    def __len__(self):
        return len(self.coords)

    def subset(self, mask):
        mask = np.asarray(mask)
        return CorrespondenceSet(
            self.coords[mask],
            None if self.labels is None else self.labels[mask],
            self.essential,
        )

    def __eq__(self, other):
        if not isinstance(other, CorrespondenceSet):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (same(self.coords, other.coords) and same(self.labels, other.labels)
                and same(self.essential, other.essential))


def as_coords(corr):
    """Coordinates array of a CorrespondenceSet or array-like."""
    if isinstance(corr, CorrespondenceSet):
        return corr.coords
    return np.asarray(corr, dtype=np.float64)

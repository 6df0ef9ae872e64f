"""
Initial condition sampling on polyhedral unions
Boundary points from last-dimension slices over a grid, interior points by shift or scale
"""

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from config import tolerances
from polytope import Polytope, UnionRegion, in_interior, region_bounding_box, slice_last_dim

logger = structlog.get_logger(__name__)

INTERIOR_MARGIN = 1e-6


class Provenance(Enum):
    BOUNDARY = "boundary"
    INTERIOR = "interior"


@dataclass
class SampleGrid:
    """
    Grid over every state coordinate except `slice_dim`.

    `axes[k]` holds the grid values of the k-th non-sliced coordinate, in
    increasing coordinate order.
    """
    axes: List[np.ndarray]
    slice_dim: Optional[int] = None

    def __post_init__(self):
        self.axes = [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.axes]
        if any(a.size < 1 for a in self.axes):
            raise ValueError("Every grid axis needs at least one point")

    @property
    def dim(self) -> int:
        return len(self.axes) + 1

    @property
    def counts(self) -> List[int]:
        return [a.size for a in self.axes]

    @property
    def sliced(self) -> int:
        return self.dim - 1 if self.slice_dim is None else self.slice_dim

    @classmethod
    def from_box(cls, lo: Sequence[float], hi: Sequence[float], counts: Sequence[int],
                 slice_dim: Optional[int] = None) -> 'SampleGrid':
        """Evenly spaced grid over a box; a count of 1 places the midpoint."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        n = lo.size
        sliced = n - 1 if slice_dim is None else slice_dim
        free = [k for k in range(n) if k != sliced]
        if len(counts) != len(free):
            raise ValueError(f"Grid needs {len(free)} counts, got {len(counts)}")
        if not (np.all(np.isfinite(lo[free])) and np.all(np.isfinite(hi[free]))):
            raise ValueError("Grid box must be bounded on the gridded coordinates")
        axes = []
        for k, count in zip(free, counts):
            if count < 1:
                raise ValueError("Grid counts must be >= 1")
            if count == 1:
                axes.append(np.array([0.5 * (lo[k] + hi[k])]))
            else:
                axes.append(np.linspace(lo[k], hi[k], count))
        return cls(axes, slice_dim)

    @classmethod
    def for_region(cls, R: UnionRegion, counts: Sequence[int], slice_dim: Optional[int] = None,
                   lo: Optional[Sequence[float]] = None, hi: Optional[Sequence[float]] = None) -> 'SampleGrid':
        """Grid over the bounding box of R, optionally clipped to [lo, hi]."""
        box_lo, box_hi = region_bounding_box(R)
        if lo is not None:
            box_lo = np.maximum(box_lo, np.asarray(lo, dtype=float))
        if hi is not None:
            box_hi = np.minimum(box_hi, np.asarray(hi, dtype=float))
        return cls.from_box(box_lo, box_hi, counts, slice_dim)

    def refined(self) -> 'SampleGrid':
        """Grid with 2c − 1 points per axis; contains every point of this grid."""
        axes = []
        for a in self.axes:
            if a.size == 1:
                axes.append(a.copy())
                continue
            mids = 0.5 * (a[:-1] + a[1:])
            merged = np.empty(2 * a.size - 1)
            merged[0::2] = a
            merged[1::2] = mids
            axes.append(merged)
        return SampleGrid(axes, self.slice_dim)

    def points(self) -> np.ndarray:
        """All grid points, shape (prod(counts), n − 1)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class InitialConditionSet:
    """Sampled initial states with where they came from."""
    points: np.ndarray
    provenance: Provenance
    params: Dict[str, Union[float, List[float], str]] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points.reshape(0, 0) if self.points.size == 0 else self.points.reshape(1, -1)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        return iter(self.points)

    def subsample(self, max_samples: Optional[int]) -> 'InitialConditionSet':
        """Evenly spaced deterministic subset of at most `max_samples` points."""
        if max_samples is None or len(self) <= max_samples:
            return self
        index = np.unique(np.linspace(0, len(self) - 1, max_samples).round().astype(int))
        return InitialConditionSet(self.points[index], self.provenance, dict(self.params))

    def to_csv(self, path: Union[str, Path], names: Optional[Sequence[str]] = None) -> None:
        """One state per row plus a provenance column."""
        n = self.points.shape[1] if len(self) else len(names or [])
        names = list(names) if names else [f"x{k}" for k in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(names + ["provenance"])
            for point in self.points:
                writer.writerow([repr(float(v)) for v in point] + [self.provenance.value])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'InitialConditionSet':
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        n = len(header) - 1
        if not body:
            return cls(np.zeros((0, n)), Provenance.BOUNDARY)
        provenance = Provenance(body[0][-1])
        points = np.array([[float(v) for v in row[:n]] for row in body])
        return cls(points, provenance)


def _dedupe(points: List[np.ndarray], tol: float) -> List[np.ndarray]:
    kept: List[np.ndarray] = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in kept):
            kept.append(p)
    return kept


def sample_boundary(R: UnionRegion, g: SampleGrid) -> InitialConditionSet:
    """
    Boundary points of R: at every grid point, the endpoints of each part's
    slice along `g.sliced`, keeping only those not interior to any part.

    Args:
        R: Union region to sample
        g: Grid over the remaining coordinates

    Returns:
        InitialConditionSet with BOUNDARY provenance (possibly empty)
    """
    n = R.dim
    if g.dim != n:
        raise ValueError(f"Grid is for {g.dim}-D states, region is {n}-D")
    sliced = g.sliced
    free = [k for k in range(n) if k != sliced]
    order = free + [sliced]
    # moves the sliced coordinate last
    permuted = [Polytope(part.A[:, order], part.b, dim=n, normalize=False) for part in R]

    admitted: List[np.ndarray] = []
    for y in g.points():
        for part in permuted:
            interval = slice_last_dim(part, y)
            for end in interval.endpoints():
                x = np.empty(n)
                x[free] = y
                x[sliced] = end
                if in_interior(R, x, INTERIOR_MARGIN):
                    continue
                admitted.append(x)

    points = _dedupe(admitted, tolerances.tol_dedup)
    logger.info("✅ Boundary sampling finished", grid_points=int(np.prod(g.counts)), admitted=len(points))
    array = np.array(points) if points else np.zeros((0, n))
    return InitialConditionSet(array, Provenance.BOUNDARY, {"grid_counts": g.counts, "slice_dim": sliced})


@dataclass(frozen=True)
class ShiftMode:
    delta: Sequence[float]


@dataclass(frozen=True)
class ScaleMode:
    gamma: float
    center: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("Scale factor must lie in (0, 1)")


def sample_interior(boundary: InitialConditionSet, R: UnionRegion,
                    mode: Union[ShiftMode, ScaleMode]) -> InitialConditionSet:
    """
    Interior candidates from boundary points: p + δ (shift) or
    c + γ(p − c) (scale); points leaving R are dropped.
    """
    points = boundary.points
    n = R.dim
    if isinstance(mode, ShiftMode):
        delta = np.asarray(mode.delta, dtype=float).ravel()
        if delta.size != n:
            raise ValueError(f"Shift needs {n} entries")
        moved = points + delta if len(points) else points
        params = {"mode": "shift", "shift": delta.tolist()}
    else:
        center = np.zeros(n) if mode.center is None else np.asarray(mode.center, dtype=float).ravel()
        moved = center + mode.gamma * (points - center) if len(points) else points
        params = {"mode": "scale", "scale": mode.gamma, "center": center.tolist()}

    kept = [p for p in moved if R.contains(p)]
    dropped = len(moved) - len(kept)
    if dropped:
        logger.debug("Interior candidates outside the region dropped", dropped=dropped)
    array = np.array(kept) if kept else np.zeros((0, n))
    return InitialConditionSet(array, Provenance.INTERIOR, params)

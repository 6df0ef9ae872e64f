"""
Polyhedral geometry kernel
H-polytopes, unions of polytopes, Fourier-Motzkin projection, LP-based set predicates
"""

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.spatial import ConvexHull, QhullError

from config import PolyfalsifyError, tolerances
from optim import LpProblem, OptimizationError, SolveStatus, solve_lp

logger = structlog.get_logger(__name__)

_ZERO_ROW = 1e-12


class EmptyPolytopeError(PolyfalsifyError):
    """An operation that needs a non-empty set received an empty one."""


class DegenerateHullError(PolyfalsifyError):
    """Point cloud is lower-dimensional."""


class Polytope:
    """
    Convex polyhedron {x : A x <= b} in H-representation.

    Rows are scaled to unit Euclidean norm on construction so tolerances are
    geometric distances. A polytope with zero rows is the full space.
    Instances are immutable.
    """

    __slots__ = ("_A", "_b", "_dim", "minimal")

    def __init__(self, A, b, dim: Optional[int] = None, normalize: bool = True, minimal: bool = False):
        A = np.array(A, dtype=float)
        b = np.array(b, dtype=float).ravel()
        if A.ndim < 2:
            A = A.reshape(-1, dim) if dim is not None else A.reshape(1, -1)
        if dim is None:
            if A.shape[0] == 0 and A.shape[1] == 0:
                raise ValueError("Dimension must be given for a polytope without rows")
            dim = A.shape[1]
        A = A.reshape(-1, dim)
        if A.shape[0] != b.size:
            raise ValueError(f"Polytope has {A.shape[0]} rows but {b.size} offsets")
        if not np.all(np.isfinite(A)):
            raise ValueError("Polytope rows must have finite entries")

        if normalize and A.shape[0] > 0:
            norms = np.linalg.norm(A, axis=1)
            zero = norms < _ZERO_ROW
            if np.any(zero & (b < -tolerances.tol_feas)):
                # 0·x <= negative beyond round-off: canonical empty set
                A, b = _empty_rows(dim)
            else:
                keep = ~zero & (b < np.inf)
                A = A[keep] / norms[keep, None]
                b = b[keep] / norms[keep]

        A.setflags(write=False)
        b.setflags(write=False)
        self._A = A
        self._b = b
        self._dim = int(dim)
        self.minimal = minimal

    # -- constructors ---------------------------------------------------
    @classmethod
    def full_space(cls, dim: int) -> 'Polytope':
        return cls(np.zeros((0, dim)), np.zeros(0), dim=dim, minimal=True)

    @classmethod
    def empty(cls, dim: int) -> 'Polytope':
        A, b = _empty_rows(dim)
        return cls(A, b, dim=dim, normalize=False, minimal=True)

    @classmethod
    def from_box(cls, lo: Sequence[float], hi: Sequence[float]) -> 'Polytope':
        """Axis-aligned box; infinite bounds are omitted. Upper-bound rows come first."""
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        if lo.size != hi.size:
            raise ValueError("Box bounds must have equal length")
        n = lo.size
        eye = np.eye(n)
        A = np.vstack([eye, -eye])
        b = np.concatenate([hi, -lo])
        keep = np.isfinite(b)
        return cls(A[keep], b[keep], dim=n)

    @classmethod
    def from_dict(cls, data: Dict) -> 'Polytope':
        dim = int(data["dim"])
        A = np.asarray(data["A"], dtype=float).reshape(-1, dim)
        return cls(A, np.asarray(data["b"], dtype=float), dim=dim)

    # -- accessors ------------------------------------------------------
    @property
    def A(self) -> np.ndarray:
        return self._A

    @property
    def b(self) -> np.ndarray:
        return self._b

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def n_rows(self) -> int:
        return self._A.shape[0]

    def contains(self, x, tol: Optional[float] = None) -> bool:
        """Point membership with slack `tol` (default tol_feas)."""
        tol = tolerances.tol_feas if tol is None else tol
        x = np.asarray(x, dtype=float).ravel()
        if self.n_rows == 0:
            return True
        return bool(np.all(self._A @ x <= self._b + tol))

    def to_dict(self) -> Dict:
        return {"A": self._A.tolist(), "b": self._b.tolist(), "dim": self._dim}

    def __repr__(self) -> str:
        return f"Polytope(dim={self._dim}, rows={self.n_rows})"


def _empty_rows(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    A = np.zeros((2, dim))
    if dim > 0:
        A[0, 0] = 1.0
        A[1, 0] = -1.0
    return A, np.array([-1.0, -1.0])


@dataclass(frozen=True)
class Interval1D:
    """Closed interval [lo, hi]; `empty` marks the empty set."""
    lo: float = math.inf
    hi: float = -math.inf

    @property
    def empty(self) -> bool:
        return not self.lo <= self.hi

    @property
    def length(self) -> float:
        return 0.0 if self.empty else self.hi - self.lo

    def endpoints(self) -> List[float]:
        """Finite endpoints (one when the interval is a point)."""
        if self.empty:
            return []
        points = [p for p in (self.lo, self.hi) if math.isfinite(p)]
        if len(points) == 2 and points[0] == points[1]:
            return points[:1]
        return points


class UnionRegion:
    """Finite union of same-dimension polytopes; parts may overlap."""

    __slots__ = ("_parts", "_dim")

    def __init__(self, parts: Iterable[Polytope], dim: Optional[int] = None):
        parts = tuple(parts)
        if dim is None:
            if not parts:
                raise ValueError("Dimension must be given for an empty union")
            dim = parts[0].dim
        for part in parts:
            if part.dim != dim:
                raise ValueError(f"Union part has dim {part.dim}, expected {dim}")
        self._parts = parts
        self._dim = int(dim)

    @classmethod
    def single(cls, part: Polytope) -> 'UnionRegion':
        return cls([part])

    @classmethod
    def from_list(cls, data: List[Dict], dim: Optional[int] = None) -> 'UnionRegion':
        return cls([Polytope.from_dict(item) for item in data], dim=dim)

    @property
    def parts(self) -> Tuple[Polytope, ...]:
        return self._parts

    @property
    def dim(self) -> int:
        return self._dim

    def __iter__(self) -> Iterator[Polytope]:
        return iter(self._parts)

    def __len__(self) -> int:
        return len(self._parts)

    def contains(self, x, tol: Optional[float] = None) -> bool:
        return any(part.contains(x, tol) for part in self._parts)

    def is_empty(self) -> bool:
        return all(is_empty(part) for part in self._parts)

    def non_empty(self) -> 'UnionRegion':
        return UnionRegion([p for p in self._parts if not is_empty(p)], dim=self._dim)

    def to_list(self) -> List[Dict]:
        return [part.to_dict() for part in self._parts]

    def __repr__(self) -> str:
        return f"UnionRegion(dim={self._dim}, parts={len(self._parts)})"


# ---------------------------------------------------------------------------
# LP-based predicates
# ---------------------------------------------------------------------------

def _max_slack(P: Polytope) -> Tuple[float, Optional[np.ndarray]]:
    """Phase one: min t s.t. A x - t <= b, t >= -1. Returns (t*, x*)."""
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A = np.hstack([P.A, -np.ones((P.n_rows, 1))])
    floor = np.zeros((1, n + 1))
    floor[0, -1] = -1.0
    result = solve_lp(LpProblem(c, np.vstack([A, floor]), np.concatenate([P.b, [1.0]])))
    if not result.optimal:
        raise OptimizationError("Feasibility LP failed", result.status)
    return result.value, result.x[:n]


def is_empty(P: Polytope, tol: Optional[float] = None) -> bool:
    """
    True iff {x : A x <= b} is empty, up to `tol` (default tol_feas).

    Raises:
        OptimizationError: if the phase-one LP fails
    """
    tol = tolerances.tol_feas if tol is None else tol
    if P.n_rows == 0:
        return False
    t, _ = _max_slack(P)
    return t > tol


def feasible_point(P: Polytope) -> np.ndarray:
    """Some point of P (the phase-one optimizer)."""
    t, x = _max_slack(P) if P.n_rows else (0.0, np.zeros(P.dim))
    if t > tolerances.tol_feas:
        raise EmptyPolytopeError("Polytope is empty")
    return x


def support(P: Polytope, c) -> float:
    """
    Support function max c·x over P.

    Returns:
        The optimal value, or math.inf when unbounded

    Raises:
        EmptyPolytopeError: if P is empty
    """
    c = np.asarray(c, dtype=float).ravel()
    if c.size != P.dim:
        raise ValueError(f"Direction has length {c.size}, polytope dim is {P.dim}")
    if not np.any(c):
        if P.n_rows and is_empty(P):
            raise EmptyPolytopeError("Support of an empty polytope")
        return 0.0
    if P.n_rows == 0:
        return math.inf
    result = solve_lp(LpProblem(-c, P.A, P.b))
    if result.status is SolveStatus.UNBOUNDED:
        return math.inf
    if result.status is SolveStatus.INFEASIBLE:
        # HiGHS reports some unbounded problems as "infeasible or unbounded"
        if not is_empty(P):
            return math.inf
        raise EmptyPolytopeError("Support of an empty polytope")
    if not result.optimal:
        raise OptimizationError("Support LP failed", result.status)
    return -result.value


def support_rows(P: Polytope, directions: np.ndarray) -> np.ndarray:
    """Row-wise support values of P for each row of `directions`."""
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if P.dim == 0:
        return np.zeros(directions.shape[0])
    return np.array([support(P, row) for row in directions])


def chebyshev_ball(P: Polytope) -> Tuple[float, Optional[np.ndarray]]:
    """
    Largest inscribed ball of P.

    Returns:
        (radius, center); radius is negative-infinite for an empty polytope and
        infinite when P contains arbitrarily large balls
    """
    n = P.dim
    if P.n_rows == 0:
        return math.inf, np.zeros(n)
    norms = np.linalg.norm(P.A, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([P.A, norms[:, None]])
    result = solve_lp(LpProblem(c, A, P.b))
    # the ball LP is always feasible (negative radii allowed)
    if result.status in (SolveStatus.UNBOUNDED, SolveStatus.INFEASIBLE):
        return math.inf, None
    if not result.optimal:
        raise OptimizationError("Chebyshev LP failed", result.status)
    radius = result.x[-1]
    if radius < -tolerances.tol_feas:
        return -math.inf, None
    return float(max(radius, 0.0)), result.x[:n]


def bounding_box(P: Polytope) -> Tuple[np.ndarray, np.ndarray]:
    """Tight axis-aligned bounds (may be infinite)."""
    eye = np.eye(P.dim)
    hi = support_rows(P, eye)
    lo = -support_rows(P, -eye)
    return lo, hi


def region_bounding_box(R: UnionRegion) -> Tuple[np.ndarray, np.ndarray]:
    boxes = [bounding_box(p) for p in R if not is_empty(p)]
    if not boxes:
        raise EmptyPolytopeError("Bounding box of an empty region")
    lo = np.min([box[0] for box in boxes], axis=0)
    hi = np.max([box[1] for box in boxes], axis=0)
    return lo, hi


# ---------------------------------------------------------------------------
# Representation maintenance
# ---------------------------------------------------------------------------

def _dedupe_parallel(A: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Keep only the tightest of rows sharing a normal direction."""
    order = np.argsort(b, kind="stable")
    A, b = A[order], b[order]
    keep: List[int] = []
    for i in range(A.shape[0]):
        if not any(np.dot(A[j], A[i]) > 1.0 - 1e-12 for j in keep):
            keep.append(i)
    return A[keep], b[keep]


def remove_redundant(P: Polytope, tol: Optional[float] = None) -> Polytope:
    """
    Minimal H-representation: one LP per row, maximizing A_i·x over the
    remaining rows with row i relaxed.

    Empty input returns the canonical empty polytope.
    """
    tol = tolerances.tol_feas if tol is None else tol
    if P.minimal or P.n_rows == 0:
        return P
    if is_empty(P):
        return Polytope.empty(P.dim)

    A, b = _dedupe_parallel(np.array(P.A), np.array(P.b))
    n = P.dim

    # Cheap pass: rows implied by the bounding box of the other constraints
    if A.shape[0] > 3 * n:
        lo, hi = bounding_box(Polytope(A, b, dim=n, normalize=False))
        if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
            box_max = np.where(A > 0, A * hi, A * lo).sum(axis=1)
            loose = box_max <= b - tol
            if np.any(loose):
                A, b = A[~loose], b[~loose]

    keep = np.ones(A.shape[0], dtype=bool)
    for i in range(A.shape[0]):
        keep[i] = False
        others_A = np.vstack([A[keep], A[i]])
        others_b = np.concatenate([b[keep], [b[i] + 1.0]])
        result = solve_lp(LpProblem(-A[i], others_A, others_b))
        if result.status is SolveStatus.OPTIMAL:
            keep[i] = -result.value > b[i] + tol
        elif result.status in (SolveStatus.UNBOUNDED, SolveStatus.INFEASIBLE):
            # P is non-empty, so the relaxed LP is feasible
            keep[i] = True
        else:
            raise OptimizationError(f"Redundancy LP failed on row {i}", result.status)

    return Polytope(A[keep], b[keep], dim=n, normalize=False, minimal=True)


def intersect(P: Polytope, Q: Polytope) -> Polytope:
    """Intersection by stacking rows, then redundancy removal."""
    if P.dim != Q.dim:
        raise ValueError(f"Cannot intersect polytopes of dim {P.dim} and {Q.dim}")
    stacked = Polytope(np.vstack([P.A, Q.A]), np.concatenate([P.b, Q.b]), dim=P.dim, normalize=False)
    return remove_redundant(stacked)


def product(P: Polytope, Q: Polytope) -> Polytope:
    """Cartesian product P × Q (block-diagonal rows)."""
    A = np.block([
        [P.A, np.zeros((P.n_rows, Q.dim))],
        [np.zeros((Q.n_rows, P.dim)), Q.A],
    ])
    return Polytope(A, np.concatenate([P.b, Q.b]), dim=P.dim + Q.dim, normalize=False)


def contains_polytope(P: Polytope, Q: Polytope, tol: Optional[float] = None) -> bool:
    """True iff Q ⊆ P, via support(Q, A_i) <= b_i + tol for each row of P."""
    tol = tolerances.tol_feas if tol is None else tol
    if P.dim != Q.dim:
        raise ValueError("Containment needs equal dimensions")
    if is_empty(Q):
        return True
    for a, bound in zip(P.A, P.b):
        if support(Q, a) > bound + tol:
            return False
    return True


def project(P: Polytope, keep_dims: Sequence[int], tol: Optional[float] = None) -> Polytope:
    """
    Orthogonal projection onto `keep_dims` by Fourier-Motzkin elimination,
    pruning redundant rows after every eliminated dimension.

    The result's coordinates follow the order of `keep_dims`.
    """
    keep_dims = [int(k) for k in keep_dims]
    if not keep_dims:
        raise ValueError("keep_dims must be non-empty")
    if len(set(keep_dims)) != len(keep_dims) or min(keep_dims) < 0 or max(keep_dims) >= P.dim:
        raise ValueError(f"Invalid keep_dims {keep_dims} for dim {P.dim}")

    n_out = len(keep_dims)
    if is_empty(P, tol):
        return Polytope.empty(n_out)

    current = remove_redundant(P, tol)
    columns = list(range(P.dim))
    for j in sorted(set(columns) - set(keep_dims), reverse=True):
        col = columns.index(j)
        current = _eliminate(current, col, tol)
        columns.pop(col)

    order = [columns.index(k) for k in keep_dims]
    A = current.A[:, order]
    return remove_redundant(Polytope(A, current.b, dim=n_out), tol)


def _eliminate(P: Polytope, col: int, tol: Optional[float]) -> Polytope:
    """One Fourier-Motzkin step removing coordinate `col`."""
    a = P.A[:, col]
    pos = np.nonzero(a > _ZERO_ROW)[0]
    neg = np.nonzero(a < -_ZERO_ROW)[0]
    zero = np.nonzero(np.abs(a) <= _ZERO_ROW)[0]

    rows = [P.A[zero]]
    offsets = [P.b[zero]]
    if pos.size and neg.size:
        scaled_pos = P.A[pos] / a[pos, None]
        scaled_neg = P.A[neg] / -a[neg, None]
        rows.append((scaled_pos[:, None, :] + scaled_neg[None, :, :]).reshape(-1, P.dim))
        offsets.append((P.b[pos] / a[pos])[:, None] + (P.b[neg] / -a[neg])[None, :])
    A = np.delete(np.vstack(rows), col, axis=1)
    b = np.concatenate([np.ravel(o) for o in offsets])
    return remove_redundant(Polytope(A, b, dim=P.dim - 1), tol)


def slice_last_dim(P: Polytope, y, tol: Optional[float] = None) -> Interval1D:
    """
    The interval {x_n : (y, x_n) ∈ P} for fixed first n−1 coordinates.

    An empty slice returns an empty Interval1D.
    """
    tol = tolerances.tol_feas if tol is None else tol
    if P.dim < 2:
        raise ValueError("slice_last_dim needs a polytope of dim >= 2")
    y = np.asarray(y, dtype=float).ravel()
    if y.size != P.dim - 1:
        raise ValueError(f"Slice point needs {P.dim - 1} coordinates")

    lo, hi = -math.inf, math.inf
    coeff = P.A[:, -1]
    rest = P.b - P.A[:, :-1] @ y
    for a, r in zip(coeff, rest):
        if abs(a) <= _ZERO_ROW:
            if r < -tol:
                return Interval1D()
        elif a > 0:
            hi = min(hi, r / a)
        else:
            lo = max(lo, r / a)
    if lo > hi:
        if lo - hi <= tol:
            mid = 0.5 * (lo + hi)
            return Interval1D(mid, mid)
        return Interval1D()
    return Interval1D(lo, hi)


def in_interior(R: Union[UnionRegion, Polytope], x, margin: float) -> bool:
    """True iff some part satisfies A x <= b − margin·‖A_i‖ componentwise."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    parts = R.parts if isinstance(R, UnionRegion) else (R,)
    x = np.asarray(x, dtype=float).ravel()
    for part in parts:
        if part.n_rows == 0:
            return True
        norms = np.linalg.norm(part.A, axis=1)
        if np.all(part.A @ x <= part.b - margin * norms):
            return True
    return False


def on_facet(P: Polytope, x, tol: Optional[float] = None) -> bool:
    """True iff x satisfies at least one row of P with equality within `tol`."""
    tol = tolerances.tol_facet if tol is None else tol
    if P.n_rows == 0:
        return False
    return bool(np.any(np.abs(P.A @ np.asarray(x, dtype=float) - P.b) <= tol))


def complement_within(P: Polytope, domain: Polytope, margin: Optional[float] = None) -> UnionRegion:
    """
    Closed cover of domain \\ P: one part {a_i·x >= b_i + margin} ∩ domain per row
    of P. `margin` (default unsafe_margin) keeps the parts disjoint from P.
    """
    margin = tolerances.unsafe_margin if margin is None else margin
    parts = []
    for a, bound in zip(P.A, P.b):
        part = intersect(domain, Polytope(-a[None, :], [-(bound + margin)], dim=P.dim))
        if not is_empty(part):
            parts.append(part)
    return UnionRegion(parts, dim=P.dim)


def regions_intersect(R1: UnionRegion, R2: UnionRegion, tol: Optional[float] = None) -> bool:
    """True iff some pair of parts has a non-empty intersection."""
    for p, q in itertools.product(R1.parts, R2.parts):
        stacked = Polytope(np.vstack([p.A, q.A]), np.concatenate([p.b, q.b]), dim=p.dim, normalize=False)
        if not is_empty(stacked, tol):
            return True
    return False


def degenerate_parts(R: UnionRegion, tol: Optional[float] = None) -> List[int]:
    """Indices of non-empty parts with Chebyshev radius below `tol`."""
    tol = tolerances.tol_feas if tol is None else tol
    flagged = []
    for i, part in enumerate(R.parts):
        radius, _ = chebyshev_ball(part)
        if -math.inf < radius < tol:
            flagged.append(i)
    return flagged


# ---------------------------------------------------------------------------
# Vertex enumeration (oracle / small inputs only)
# ---------------------------------------------------------------------------

def enumerate_vertices(P: Polytope, tol: Optional[float] = None) -> np.ndarray:
    """
    Vertices by brute force over all n-row subsets; returns an (k, n) array
    in subset order, deduplicated.
    """
    tol = tolerances.tol_facet if tol is None else tol
    n = P.dim
    vertices: List[np.ndarray] = []
    for rows in itertools.combinations(range(P.n_rows), n):
        sub_A = P.A[list(rows)]
        if abs(np.linalg.det(sub_A)) < 1e-12:
            continue
        x = np.linalg.solve(sub_A, P.b[list(rows)])
        if np.all(P.A @ x <= P.b + tol):
            if not any(np.linalg.norm(x - v) <= tol for v in vertices):
                vertices.append(x)
    if not vertices:
        return np.zeros((0, n))
    return np.array(vertices)


def hull_of_points(points: np.ndarray) -> Polytope:
    """H-representation of the convex hull of a point cloud."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[1]
    if n == 1:
        return Polytope.from_box([points.min()], [points.max()])
    try:
        hull = ConvexHull(points)
    except QhullError as e:
        raise DegenerateHullError(f"Convex hull failed: {e}") from e
    return remove_redundant(Polytope(hull.equations[:, :-1], -hull.equations[:, -1], dim=n))

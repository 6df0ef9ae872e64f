"""
Falsifying disturbance generation
Löwner-John ellipsoid level climbing, dual-game dispatch and hand-written lead car / road heuristics
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from config import PolyfalsifyError
from plant import AccParams, LkParams
from polytope import Polytope, bounding_box, enumerate_vertices, is_empty
from synthesis import DualWinningSets, LinearSystem, dual_strategy

logger = structlog.get_logger(__name__)

_TIE = 1e-12


class DegenerateSetError(PolyfalsifyError):
    """Point set is flat; no enclosing ellipsoid with finite shape exists."""


@dataclass(frozen=True)
class Ellipsoid:
    """
    {x : [x, 1] Q [x, 1]ᵀ <= 1}, stored through its center and shape
    matrix so that Q = [[P, −P c], [−cᵀP, cᵀP c]].
    """
    center: np.ndarray
    shape: np.ndarray

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def Q(self) -> np.ndarray:
        P, c = self.shape, self.center
        Pc = P @ c
        top = np.hstack([P, -Pc[:, None]])
        bottom = np.hstack([-Pc[None, :], np.array([[c @ Pc]])])
        return np.vstack([top, bottom])

    @classmethod
    def from_Q(cls, Q) -> 'Ellipsoid':
        """Recover center and shape from a homogeneous form."""
        Q = np.asarray(Q, dtype=float)
        P = Q[:-1, :-1]
        c = np.linalg.solve(P, -Q[:-1, -1])
        return cls(c, P)

    def scaled(self, factor: float) -> 'Ellipsoid':
        """Same center, shape multiplied by `factor` (level scales linearly)."""
        return Ellipsoid(self.center, self.shape * factor)

    def to_dict(self):
        return {"center": self.center.tolist(), "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, data) -> 'Ellipsoid':
        return cls(np.asarray(data["center"], dtype=float), np.asarray(data["shape"], dtype=float))


def level(E: Ellipsoid, x) -> float:
    """[x, 1] Q [x, 1]ᵀ."""
    diff = np.asarray(x, dtype=float).ravel() - E.center
    return float(diff @ E.shape @ diff)


def lj_ellipsoid(C: Union[Polytope, np.ndarray], eps: float = 1e-3, max_iter: int = 100000) -> Ellipsoid:
    """
    Approximate minimum-volume enclosing ellipsoid by Khachiyan's algorithm.

    Args:
        C: Bounded polytope (its vertices are used) or an (N, n) point array
        eps: Stop once every point has level <= 1 + eps
        max_iter: Iteration budget

    Returns:
        Ellipsoid covering every point

    Raises:
        DegenerateSetError: if the points do not span the space
    """
    if isinstance(C, Polytope):
        if is_empty(C):
            raise DegenerateSetError("Cannot fit an ellipsoid to an empty polytope")
        lo, hi = bounding_box(C)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DegenerateSetError("Polytope is unbounded; clip it before fitting an ellipsoid")
        points = enumerate_vertices(C)
    else:
        points = np.atleast_2d(np.asarray(C, dtype=float))

    N, d = points.shape
    if N <= d or np.linalg.matrix_rank(points - points.mean(axis=0), tol=1e-10) < d:
        raise DegenerateSetError("Points are flat; regularize (e.g. inflate the set) before fitting")

    lifted = np.vstack([points.T, np.ones(N)])
    weights = np.ones(N) / N
    ellipsoid, levels = _from_weights(points, weights)
    iterations = 0
    while np.max(levels) > 1.0 + eps and iterations < max_iter:
        X = lifted @ (weights[:, None] * lifted.T)
        M = np.einsum("ij,ji->i", lifted.T @ np.linalg.inv(X), lifted)
        j = int(np.argmax(M))
        step = (M[j] - d - 1.0) / ((d + 1.0) * (M[j] - 1.0))
        weights *= 1.0 - step
        weights[j] += step
        ellipsoid, levels = _from_weights(points, weights)
        iterations += 1

    worst = float(np.max(levels))
    if worst > 1.0 + eps:
        logger.warning("⚠️ Ellipsoid iteration budget exhausted, rescaling to cover", max_level=worst)
        ellipsoid = ellipsoid.scaled(1.0 / worst)
    logger.debug("Ellipsoid fitted", points=N, iterations=iterations, max_level=min(worst, 1.0 + eps))
    return ellipsoid


def _from_weights(points: np.ndarray, weights: np.ndarray) -> Tuple[Ellipsoid, np.ndarray]:
    d = points.shape[1]
    c = weights @ points
    centered = points - c
    cov = centered.T @ (weights[:, None] * centered)
    shape = np.linalg.inv(cov) / d
    shape = 0.5 * (shape + shape.T)
    levels = np.einsum("ij,jk,ik->i", centered, shape, centered)
    return Ellipsoid(c, shape), levels


def _disturbance_vertices(sys: LinearSystem) -> np.ndarray:
    vertices = enumerate_vertices(sys.D)
    if vertices.shape[0] == 0:
        # single point or unbounded D: use a feasible point
        lo, hi = bounding_box(sys.D)
        return np.atleast_2d(np.where(np.isfinite(lo), lo, 0.0))
    return vertices


def complementary_strategy(x, u, sys: LinearSystem, E: Ellipsoid,
                           vertices: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Vertex of D that pushes the predicted next state to the highest level of E.
    Ties go to the lowest-index vertex.
    """
    vertices = _disturbance_vertices(sys) if vertices is None else vertices
    best, best_level = 0, -math.inf
    for i, d in enumerate(vertices):
        value = level(E, sys.step(x, u, d))
        if value > best_level + _TIE:
            best, best_level = i, value
    return np.array(vertices[best], dtype=float)


def ellipsoid_plus_dual(x, u, sys: LinearSystem, E: Ellipsoid, W: DualWinningSets,
                        vertices: Optional[np.ndarray] = None) -> np.ndarray:
    """Dual strategy inside the dual winning union, level climbing elsewhere."""
    if W.union.contains(x):
        move = dual_strategy(x, W, sys)
        if move.disturbance is not None:
            return move.disturbance
    return complementary_strategy(x, u, sys, E, vertices)


# ---------------------------------------------------------------------------
# Heuristics
# ---------------------------------------------------------------------------

def heuristic_max_brake(v_L: float, dt: float, params: AccParams = AccParams()) -> float:
    """Lead car brakes as hard as allowed without reversing within one step."""
    if v_L <= params.v_L_min:
        return 0.0
    return max(params.a_L_min, (params.v_L_min - v_L) / dt)


def heuristic_track_vdes(v_L: float, k_lead: float, params: AccParams = AccParams()) -> float:
    """Lead car converges to v_des with gain k_lead."""
    return float(np.clip(k_lead * (params.v_des - v_L), params.a_L_min, params.a_L_max))


def heuristic_lk_bang_bang(x, u, sys: LinearSystem, r_bounds: Tuple[float, float]) -> float:
    """
    Road curvature pushing against the predicted lateral drift: r_min when
    y would not decrease over one step with straight road, r_max otherwise.
    """
    x = np.asarray(x, dtype=float).ravel()
    predicted = sys.step(x, u, np.zeros(sys.n_d))
    return r_bounds[0] if predicted[0] >= x[0] else r_bounds[1]


# ---------------------------------------------------------------------------
# Disturbance schemes used by the simulator
# ---------------------------------------------------------------------------

class DisturbanceScheme(ABC):
    """Emits one disturbance per control step; one instance per trajectory."""

    name = "scheme"

    def __init__(self, D: Polytope):
        self.D = D
        self._lo, self._hi = bounding_box(D)

    def reset(self, sample_index: int = 0) -> None:
        """Called at the start of every episode."""

    def clip(self, d) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(d, dtype=float)), self._lo, self._hi)

    def __call__(self, x, u, step: int) -> np.ndarray:
        return self.clip(self.disturbance(np.asarray(x, dtype=float), np.atleast_1d(u), step))

    @abstractmethod
    def disturbance(self, x: np.ndarray, u: np.ndarray, step: int) -> np.ndarray:
        ...

    def describe(self) -> dict:
        return {"kind": self.name}


class ZeroScheme(DisturbanceScheme):
    name = "zero"

    def disturbance(self, x, u, step):
        return np.zeros(self.D.dim)


class DualGameScheme(DisturbanceScheme):
    """Dual strategy inside the winning union, zero disturbance outside."""
    name = "dual_game"

    def __init__(self, sys: LinearSystem, W: DualWinningSets):
        super().__init__(sys.D)
        self.sys = sys
        self.W = W

    def disturbance(self, x, u, step):
        move = dual_strategy(x, self.W, self.sys)
        if move.disturbance is None:
            return np.zeros(self.D.dim)
        return move.disturbance


class EllipsoidPlusDualScheme(DisturbanceScheme):
    name = "ellipsoid_plus_dual"

    def __init__(self, sys: LinearSystem, E: Ellipsoid, W: DualWinningSets):
        super().__init__(sys.D)
        self.sys = sys
        self.E = E
        self.W = W
        self._vertices = _disturbance_vertices(sys)

    def disturbance(self, x, u, step):
        return ellipsoid_plus_dual(x, u, self.sys, self.E, self.W, self._vertices)


class MaxBrakeScheme(DisturbanceScheme):
    name = "max_brake"

    def __init__(self, D: Polytope, dt: float, params: AccParams = AccParams()):
        super().__init__(D)
        self.dt = dt
        self.params = params

    def disturbance(self, x, u, step):
        return np.array([heuristic_max_brake(x[2], self.dt, self.params)])


class TrackVdesScheme(DisturbanceScheme):
    name = "track_vdes"

    def __init__(self, D: Polytope, k_lead: float = 1.0, params: AccParams = AccParams()):
        super().__init__(D)
        if k_lead <= 0:
            raise ValueError("k_lead must be positive")
        self.k_lead = k_lead
        self.params = params

    def disturbance(self, x, u, step):
        return np.array([heuristic_track_vdes(x[2], self.k_lead, self.params)])

    def describe(self):
        return {"kind": self.name, "k_lead": self.k_lead}


class LkBangBangScheme(DisturbanceScheme):
    """`predictor` is the LK model discretized at the look-ahead time τ."""
    name = "lk_bang_bang"

    def __init__(self, predictor: LinearSystem):
        super().__init__(predictor.D)
        self.predictor = predictor
        self.r_bounds = (float(self._lo[0]), float(self._hi[0]))

    def disturbance(self, x, u, step):
        return np.array([heuristic_lk_bang_bang(x, u, self.predictor, self.r_bounds)])

    def describe(self):
        return {"kind": self.name, "tau": self.predictor.dt}


class RandomScheme(DisturbanceScheme):
    """
    Uniform disturbances from a counter-based stream keyed by
    (seed, sample index, scheme index), so episodes are reproducible in any order.
    """
    name = "random"

    def __init__(self, D: Polytope, seed: int, scheme_index: int = 0):
        super().__init__(D)
        self.seed = seed
        self.scheme_index = scheme_index
        self.reset(0)

    def reset(self, sample_index: int = 0) -> None:
        sequence = np.random.SeedSequence([self.seed, sample_index, self.scheme_index])
        self._rng = np.random.Generator(np.random.Philox(sequence))

    def disturbance(self, x, u, step):
        for _ in range(1000):
            d = self._rng.uniform(self._lo, self._hi)
            if self.D.contains(d):
                return d
        return np.zeros(self.D.dim)

    def describe(self):
        return {"kind": self.name, "seed": self.seed}


def lk_disturbance_box(r_d_bound: float) -> Polytope:
    return Polytope.from_box([-r_d_bound], [r_d_bound])


def acc_disturbance_box(params: AccParams = AccParams()) -> Polytope:
    return Polytope.from_box([params.a_L_min], [params.a_L_max])


def default_r_d_bound(params: LkParams = LkParams(), min_radius: float = 230.0) -> float:
    """Largest road yaw rate v_N / R₀ for a minimum curve radius R₀."""
    return params.v_N / min_radius

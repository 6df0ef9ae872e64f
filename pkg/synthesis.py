"""
Controlled invariant sets, dual-game winning sets and supervision
Robust predecessor operators over polytopes for x+ = A x + B u + E d + K
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from config import PolyfalsifyError, tolerances
from optim import QpProblem, solve_qp
from polytope import (
    Polytope,
    UnionRegion,
    chebyshev_ball,
    contains_polytope,
    degenerate_parts,
    enumerate_vertices,
    intersect,
    is_empty,
    product,
    project,
    support_rows,
)

logger = structlog.get_logger(__name__)


class SupervisionImpossible(PolyfalsifyError):
    """No admissible input exists at the current state."""


class UnconvergedSetError(PolyfalsifyError):
    """The invariant set iteration stopped before reaching a fixed point."""


@dataclass(frozen=True)
class LinearSystem:
    """
    Discrete-time affine system x+ = A x + B u + E d + K on domain X.

    `E_r`/`R` describe an optional model-residual input that neither player
    controls: it is robustified together with d when synthesizing for the
    controller and together with u when synthesizing for the disturbance.

    `vertex_models` lists further (A, B, K) triples; with the nominal triple
    they span a polytopic model uncertainty, and every operator below
    requires its guarantee to hold for each of them.
    """
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    K: np.ndarray
    X: Polytope
    U: Polytope
    D: Polytope
    dt: float
    E_r: Optional[np.ndarray] = None
    R: Optional[Polytope] = None
    vertex_models: Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...] = ()

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        E = np.asarray(self.E, dtype=float).reshape(n, -1)
        K = np.asarray(self.K, dtype=float).ravel()
        if A.shape != (n, n) or K.size != n:
            raise ValueError("A must be square and K must match the state dimension")
        if self.X.dim != n or self.U.dim != B.shape[1] or self.D.dim != E.shape[1]:
            raise ValueError("X, U, D dimensions must match A, B, E")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name, poly in (("X", self.X), ("U", self.U), ("D", self.D)):
            if is_empty(poly):
                raise ValueError(f"{name} must be non-empty")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "K", K)
        if self.E_r is not None:
            E_r = np.asarray(self.E_r, dtype=float).reshape(n, -1)
            if self.R is None or self.R.dim != E_r.shape[1]:
                raise ValueError("Residual set R must match E_r")
            object.__setattr__(self, "E_r", E_r)
        models = []
        for A_j, B_j, K_j in self.vertex_models:
            A_j = np.asarray(A_j, dtype=float).reshape(n, n)
            B_j = np.asarray(B_j, dtype=float).reshape(n, B.shape[1])
            K_j = np.asarray(K_j, dtype=float).reshape(n)
            models.append((A_j, B_j, K_j))
        object.__setattr__(self, "vertex_models", tuple(models))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_d(self) -> int:
        return self.E.shape[1]

    def step(self, x, u, d) -> np.ndarray:
        """Nominal one-step map (residual excluded)."""
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(u) + self.E @ np.atleast_1d(d) + self.K

    def with_domain(self, X: Polytope) -> 'LinearSystem':
        return replace(self, X=X)

    def models(self) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Nominal (A, B, K) followed by the vertex models."""
        return [(self.A, self.B, self.K), *self.vertex_models]

    def disturbance_channel(self) -> Tuple[np.ndarray, Polytope]:
        """(E, D) augmented with the residual; what the controller must be robust to."""
        if self.E_r is None:
            return self.E, self.D
        return np.hstack([self.E, self.E_r]), product(self.D, self.R)

    def input_channel(self) -> Tuple[np.ndarray, Polytope]:
        """(B, U) augmented with the residual; what the disturbance must be robust to."""
        if self.E_r is None:
            return self.B, self.U
        return np.hstack([self.B, self.E_r]), product(self.U, self.R)

    def content_hash(self) -> str:
        """Stable hash of the matrices and sets."""
        payload = {
            "A": np.round(self.A, 12).tolist(),
            "B": np.round(self.B, 12).tolist(),
            "E": np.round(self.E, 12).tolist(),
            "K": np.round(self.K, 12).tolist(),
            "X": self.X.to_dict(), "U": self.U.to_dict(), "D": self.D.to_dict(),
            "dt": self.dt,
            "E_r": None if self.E_r is None else np.round(self.E_r, 12).tolist(),
            "R": None if self.R is None else self.R.to_dict(),
            "vertex_models": [[np.round(M, 12).tolist() for M in model] for model in self.vertex_models],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class InvariantResult:
    """Outcome of the maximal controlled invariant set iteration."""
    S_inv: UnionRegion
    iterations: int
    converged: bool

    def to_dict(self) -> Dict:
        return {"parts": self.S_inv.to_list(), "dim": self.S_inv.dim,
                "iterations": self.iterations, "converged": self.converged}

    @classmethod
    def from_dict(cls, data: Dict) -> 'InvariantResult':
        return cls(UnionRegion.from_list(data["parts"], dim=data["dim"]),
                   int(data["iterations"]), bool(data["converged"]))


@dataclass
class DualLayer:
    """One polytope of the dual-game sequence for one unsafe part."""
    step: int
    source_part: int
    lifted: Polytope      # over X × D
    projected: Polytope   # over X


@dataclass
class DualWinningSets:
    """Layers of the dual game, ordered by step then by unsafe part."""
    layers: List[DualLayer]
    n_x: int
    n_d: int
    n_steps: int

    @property
    def union(self) -> UnionRegion:
        return UnionRegion([layer.projected for layer in self.layers], dim=self.n_x)

    def layers_at(self, step: int) -> List[DualLayer]:
        return [layer for layer in self.layers if layer.step == step]

    def cumulative_union(self, step: int) -> UnionRegion:
        return UnionRegion([l.projected for l in self.layers if l.step <= step], dim=self.n_x)

    def to_dict(self) -> Dict:
        return {
            "n_x": self.n_x, "n_d": self.n_d, "n_steps": self.n_steps,
            "layers": [{"step": l.step, "source_part": l.source_part,
                        "lifted": l.lifted.to_dict(), "projected": l.projected.to_dict()}
                       for l in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DualWinningSets':
        layers = [DualLayer(int(item["step"]), int(item["source_part"]),
                            Polytope.from_dict(item["lifted"]), Polytope.from_dict(item["projected"]))
                  for item in data["layers"]]
        return cls(layers, int(data["n_x"]), int(data["n_d"]), int(data["n_steps"]))


@dataclass
class DualMove:
    """Result of the dual strategy at one state."""
    disturbance: Optional[np.ndarray]
    layer: Optional[int]
    already_falsified: bool = False


@dataclass
class InvarianceReport:
    """Sampling check of the controlled invariance condition."""
    n_samples: int
    violations: int
    violating_states: List[np.ndarray] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0


@dataclass
class SupervisorMap:
    """Admissible (x, u) pairs, one polytope per target part of S_inv."""
    parts: List[Polytope]
    n_x: int
    n_u: int

    def slices(self, x, tol: Optional[float] = None) -> List[Polytope]:
        """Non-empty admissible input sets at state x (relaxed by `tol`)."""
        tol = tolerances.tol_feas if tol is None else tol
        x = np.asarray(x, dtype=float).ravel()
        result = []
        for part in self.parts:
            A_x, A_u = part.A[:, :self.n_x], part.A[:, self.n_x:]
            rhs = part.b - A_x @ x
            if np.any((np.linalg.norm(A_u, axis=1) < 1e-12) & (rhs < -tol)):
                continue
            u_set = Polytope(A_u, rhs + tol, dim=self.n_u)
            if not is_empty(u_set):
                result.append(u_set)
        return result

    def is_admissible(self, x, u, tol: Optional[float] = None) -> bool:
        point = np.concatenate([np.asarray(x, dtype=float).ravel(), np.atleast_1d(u).astype(float)])
        return any(part.contains(point, tol) for part in self.parts)

    def to_dict(self) -> Dict:
        return {"n_x": self.n_x, "n_u": self.n_u, "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, data: Dict) -> 'SupervisorMap':
        return cls([Polytope.from_dict(p) for p in data["parts"]], int(data["n_x"]), int(data["n_u"]))


# ---------------------------------------------------------------------------
# Predecessor operators
# ---------------------------------------------------------------------------

def _robust_lift(target: Polytope, sys: LinearSystem) -> Polytope:
    """{(x, u) : H(Ax + Bu + K) <= h − ŝ, u ∈ U}, ŝ row-wise support of the disturbance channel."""
    E, D = sys.disturbance_channel()
    H, h = target.A, target.b
    s_hat = support_rows(D, H @ E)
    rows = [np.hstack([H @ A_j, H @ B_j]) for A_j, B_j, _ in sys.models()]
    offsets = [h - H @ K_j - s_hat for _, _, K_j in sys.models()]
    A = np.vstack(rows + [np.hstack([np.zeros((sys.U.n_rows, sys.n_x)), sys.U.A])])
    b = np.concatenate(offsets + [sys.U.b])
    return Polytope(A, b, dim=sys.n_x + sys.n_u)


def robust_pre(S: UnionRegion, sys: LinearSystem) -> UnionRegion:
    """
    States with some u ∈ U such that every disturbance lands in one part of S.

    The union is taken part by part, which under-approximates Pre of a union.
    """
    parts = []
    x_dims = list(range(sys.n_x))
    X_lifted = product(sys.X, Polytope.full_space(sys.n_u))
    for part in S:
        if is_empty(part):
            continue
        lifted = _robust_lift(part, sys)
        if not np.all(np.isfinite(lifted.b)):
            continue
        lifted = intersect(lifted, X_lifted)
        if is_empty(lifted):
            continue
        parts.append(project(lifted, x_dims))
    return UnionRegion(parts, dim=sys.n_x)


def _intersect_regions(R1: UnionRegion, R2: UnionRegion) -> UnionRegion:
    parts = []
    for p in R1:
        for q in R2:
            both = intersect(p, q)
            if not is_empty(both):
                parts.append(both)
    return UnionRegion(_drop_covered(parts), dim=R1.dim)


def _drop_covered(parts: List[Polytope]) -> List[Polytope]:
    """Remove parts contained in another part."""
    kept: List[Polytope] = []
    for i, part in enumerate(parts):
        covered = False
        for j, other in enumerate(parts):
            if i == j:
                continue
            if contains_polytope(other, part) and (j < i or not contains_polytope(part, other)):
                covered = True
                break
        if not covered:
            kept.append(part)
    return kept


def _region_contains(outer: UnionRegion, inner: UnionRegion) -> bool:
    """Sufficient test: every inner part sits inside some outer part."""
    return all(any(contains_polytope(o, p) for o in outer) for p in inner if not is_empty(p))


def max_invariant_set(safe: UnionRegion, sys: LinearSystem, max_iter: int = 400) -> InvariantResult:
    """
    Iterate S_{k+1} = S_k ∩ Pre(S_k) from S_0 = safe.

    Args:
        safe: Safe set inside X
        sys: System dynamics
        max_iter: Iteration budget

    Returns:
        InvariantResult; `converged` is False when the budget ran out
    """
    current = safe.non_empty()
    if len(current) == 0:
        logger.info("✅ Safe set is empty, nothing to iterate")
        return InvariantResult(current, 0, True)

    for k in range(1, max_iter + 1):
        pre = robust_pre(current, sys)
        following = _intersect_regions(current, pre)
        logger.debug("Invariant set iteration", iteration=k, parts=len(following),
                     rows=[p.n_rows for p in following])
        if len(following) == 0:
            logger.info("✅ Invariant set iteration reached the empty set", iterations=k)
            return InvariantResult(following, k, True)
        if _region_contains(following, current):
            flagged = degenerate_parts(following)
            if flagged:
                logger.warning("⚠️ Invariant set has near-degenerate parts", parts=flagged)
            logger.info("✅ Invariant set converged", iterations=k, parts=len(following))
            return InvariantResult(following, k, True)
        current = following

    logger.warning("⚠️ Invariant set iteration hit the budget without converging", max_iter=max_iter)
    return InvariantResult(current, max_iter, False)


def verify_invariance(S: UnionRegion, sys: LinearSystem, n_samples: int, seed: int = 0,
                      window: Optional[Polytope] = None) -> InvarianceReport:
    """
    Sample states of S and check that some u ∈ U keeps every disturbance
    vertex inside one part of S.

    Args:
        S: Candidate controlled invariant set
        sys: System dynamics
        n_samples: Number of sampled states
        seed: Seed for the sampler
        window: Optional bounds on where states are drawn, for unbounded S

    Returns:
        InvarianceReport with the violation count
    """
    S = S.non_empty()
    if len(S) == 0 or n_samples <= 0:
        return InvarianceReport(0, 0)

    rng = np.random.default_rng(seed)
    E, D = sys.disturbance_channel()
    d_vertices = enumerate_vertices(D)
    region = sys.X if window is None else intersect(sys.X, window)
    part_vertices = [enumerate_vertices(intersect(part, region)) for part in S]
    usable = [i for i, v in enumerate(part_vertices) if v.shape[0] > 0]
    if not usable:
        raise ValueError("Invariant set parts must be bounded to be sampled")

    report = InvarianceReport(n_samples, 0)
    for _ in range(n_samples):
        vertices = part_vertices[usable[rng.integers(len(usable))]]
        weights = rng.dirichlet(np.ones(vertices.shape[0]))
        x = weights @ vertices
        if not _has_robust_input(x, S, sys, E, d_vertices):
            report.violations += 1
            report.violating_states.append(x)

    if report.violations:
        logger.warning("⚠️ Invariance check found violations", violations=report.violations, samples=n_samples)
    else:
        logger.info("✅ Invariance check passed", samples=n_samples)
    return report


def _has_robust_input(x, S: UnionRegion, sys: LinearSystem, E: np.ndarray, d_vertices: np.ndarray) -> bool:
    tol = tolerances.tol_feas
    for part in S:
        rows, offsets = [sys.U.A], [sys.U.b]
        for A_j, B_j, K_j in sys.models():
            drift = A_j @ x + K_j
            for d in d_vertices:
                rows.append(part.A @ B_j)
                offsets.append(part.b - part.A @ (drift + E @ d) + tol)
        if not is_empty(Polytope(np.vstack(rows), np.concatenate(offsets), dim=sys.n_u)):
            return True
    return False


# ---------------------------------------------------------------------------
# Dual game
# ---------------------------------------------------------------------------

def _dual_lift(target: Polytope, sys: LinearSystem) -> Polytope:
    """{(x, d) ∈ X × D : ∀u: A x + B u + E d + K ∈ target}."""
    _, U = sys.input_channel()
    G, g = target.A, target.b
    rows, offsets = [], []
    for A_j, B_j, K_j in sys.models():
        B = B_j if sys.E_r is None else np.hstack([B_j, sys.E_r])
        rows.append(np.hstack([G @ A_j, G @ sys.E]))
        offsets.append(g - G @ K_j - support_rows(U, G @ B))
    A = np.vstack(rows + [
        np.hstack([sys.X.A, np.zeros((sys.X.n_rows, sys.n_d))]),
        np.hstack([np.zeros((sys.D.n_rows, sys.n_x)), sys.D.A]),
    ])
    b = np.concatenate(offsets + [sys.X.b, sys.D.b])
    return Polytope(A, b, dim=sys.n_x + sys.n_d)


def dual_winning(unsafe: UnionRegion, sys: LinearSystem, n_steps: int = 50) -> DualWinningSets:
    """
    Backward reachable sets of the unsafe set with the disturbance as the
    controlling player and the input as the adversary.

    Args:
        unsafe: Unsafe set as a union of polytopes over X
        sys: System dynamics (X is the dual-game domain)
        n_steps: Number of backward steps

    Returns:
        DualWinningSets holding lifted and projected layers per unsafe part
    """
    x_dims = list(range(sys.n_x))
    layers: List[DualLayer] = []
    for index, part in enumerate(unsafe):
        if is_empty(part):
            continue
        layers.append(DualLayer(0, index, product(part, sys.D), part))
        target = part
        for step in range(1, n_steps + 1):
            lifted = _dual_lift(target, sys)
            if not np.all(np.isfinite(lifted.b)) or is_empty(lifted):
                logger.debug("Dual game chain ended", part=index, step=step)
                break
            projected = project(lifted, x_dims)
            layers.append(DualLayer(step, index, lifted, projected))
            target = projected

    layers.sort(key=lambda layer: (layer.step, layer.source_part))
    logger.info("✅ Dual winning sets computed", layers=len(layers), n_steps=n_steps)
    return DualWinningSets(layers, sys.n_x, sys.n_d, n_steps)


def dual_strategy(x, W: DualWinningSets, sys: LinearSystem) -> DualMove:
    """
    Disturbance that keeps the state on course to the unsafe set.

    Picks the smallest layer index whose projection contains x and returns the
    Chebyshev center of the disturbance slice of that layer. The center is an
    interior point of the slice, not a vertex, so the chosen d keeps the
    largest margin to every face of the winning region.
    """
    x = np.asarray(x, dtype=float).ravel()
    tol = tolerances.tol_feas
    if any(layer.projected.contains(x, tol) for layer in W.layers_at(0)):
        return DualMove(None, 0, already_falsified=True)

    for step in range(1, W.n_steps + 1):
        for layer in W.layers_at(step):
            if not layer.projected.contains(x, tol):
                continue
            A_x, A_d = layer.lifted.A[:, :W.n_x], layer.lifted.A[:, W.n_x:]
            d_slice = Polytope(A_d, layer.lifted.b - A_x @ x + tol, dim=W.n_d)
            radius, center = chebyshev_ball(d_slice)
            if center is None or not np.isfinite(radius):
                continue
            return DualMove(center, step)
    return DualMove(None, None)


# ---------------------------------------------------------------------------
# Supervision
# ---------------------------------------------------------------------------

def supervisor_map(S_inv: Union[UnionRegion, InvariantResult], sys: LinearSystem) -> SupervisorMap:
    """
    For each target part, the (x, u) pairs whose successors stay in it for every disturbance.

    Raises:
        UnconvergedSetError: if given an InvariantResult that did not converge
    """
    if isinstance(S_inv, InvariantResult):
        if not S_inv.converged:
            raise UnconvergedSetError(
                f"Invariant set did not converge within {S_inv.iterations} iterations; "
                "raise synthesis.max_iter before supervising")
        S_inv = S_inv.S_inv
    parts = []
    for part in S_inv:
        if is_empty(part):
            continue
        lifted = _robust_lift(part, sys)
        if np.all(np.isfinite(lifted.b)) and not is_empty(lifted):
            parts.append(lifted)
    if not parts:
        raise ValueError("Supervisor map needs a non-empty invariant set")
    return SupervisorMap(parts, sys.n_x, sys.n_u)


def _clamp_to_interval(u: np.ndarray, u_set: Polytope) -> Optional[np.ndarray]:
    """Projection onto a one-dimensional slice, read off its rows."""
    a = u_set.A[:, 0]
    with np.errstate(divide="ignore"):
        ratios = u_set.b / a
    lo = np.max(ratios[a < -1e-12], initial=-np.inf)
    hi = np.min(ratios[a > 1e-12], initial=np.inf)
    if lo > hi:
        return None
    return np.array([min(max(float(u[0]), lo), hi)])


def supervise(u_legacy, x, M: SupervisorMap) -> np.ndarray:
    """
    Minimally intrusive filter: pass u_legacy through when admissible,
    otherwise return the closest admissible input.

    Raises:
        SupervisionImpossible: if no admissible input exists at x
    """
    u_legacy = np.atleast_1d(np.asarray(u_legacy, dtype=float))
    if M.is_admissible(x, u_legacy, tol=0.0):
        return u_legacy

    slices = M.slices(x, tol=0.0) or M.slices(x)
    if not slices:
        raise SupervisionImpossible(f"No admissible input at state {np.round(x, 6).tolist()}")

    best, best_cost = None, np.inf
    for u_set in slices:
        if M.n_u == 1:
            candidate = _clamp_to_interval(u_legacy, u_set)
        else:
            result = solve_qp(QpProblem(H=2.0 * np.eye(M.n_u), f=-2.0 * u_legacy, A=u_set.A, b=u_set.b))
            candidate = result.x if result.optimal else None
        if candidate is None:
            continue
        cost = float(np.sum((candidate - u_legacy) ** 2))
        if cost < best_cost:
            best, best_cost = candidate, cost
    if best is None:
        raise SupervisionImpossible("Admissible input QP failed at every part")
    return best

"""
Dense LP and convex QP solving
Thin, stateless wrappers around HiGHS (LP) and OSQP (QP) with a common result type
"""

import contextlib
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import osqp
import structlog
from scipy import sparse
from scipy.optimize import linprog

from config import PolyfalsifyError, solver_settings, tolerances

logger = structlog.get_logger(__name__)


class SolveStatus(Enum):
    """Outcome of a solver call."""
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


class OptimizationError(PolyfalsifyError):
    """Raised by callers that cannot continue after a failed solve."""

    def __init__(self, message: str, status: SolveStatus):
        super().__init__(f"{message} (status: {status.value})")
        self.status = status


@dataclass
class SolveResult:
    """Solver output. `x`, `value` and `dual` are only set when optimal."""
    status: SolveStatus
    x: Optional[np.ndarray] = None
    value: Optional[float] = None
    dual: Optional[np.ndarray] = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass
class LpProblem:
    """min c·x  s.t.  A x <= b,  Aeq x = beq,  x free."""
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    Aeq: Optional[np.ndarray] = None
    beq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"LP has {self.A.shape[0]} rows but {self.b.size} offsets")
        if self.Aeq is not None:
            self.Aeq = np.asarray(self.Aeq, dtype=float).reshape(-1, n)
            self.beq = np.asarray(self.beq, dtype=float).ravel()
            if self.Aeq.shape[0] != self.beq.size:
                raise ValueError("Equality constraint dimensions are inconsistent")


@dataclass
class QpProblem:
    """min ½ xᵀHx + fᵀx  s.t.  A x <= b,  Aeq x = beq."""
    H: np.ndarray
    f: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    Aeq: Optional[np.ndarray] = None
    beq: Optional[np.ndarray] = None
    warm_start: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {self.H.shape}")
        if not np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0):
            raise ValueError("QP cost matrix H must be symmetric")
        if n > 0 and np.min(np.linalg.eigvalsh(self.H)) < -1e-8:
            raise ValueError("QP cost matrix H must be positive semidefinite")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.Aeq is None:
            self.Aeq = np.zeros((0, n))
            self.beq = np.zeros(0)
        self.Aeq = np.asarray(self.Aeq, dtype=float).reshape(-1, n)
        self.beq = np.asarray(self.beq, dtype=float).ravel()
        if self.A.shape[0] != self.b.size or self.Aeq.shape[0] != self.beq.size:
            raise ValueError("QP constraint dimensions are inconsistent")


_LINPROG_STATUS = {
    0: SolveStatus.OPTIMAL,
    2: SolveStatus.INFEASIBLE,
    3: SolveStatus.UNBOUNDED,
}


def _unbounded_or_infeasible(problem: LpProblem) -> SolveStatus:
    """Settle a presolve verdict of "unbounded or infeasible" with a zero-cost solve."""
    feasibility = solve_lp(LpProblem(np.zeros_like(problem.c), problem.A, problem.b, problem.Aeq, problem.beq))
    return SolveStatus.UNBOUNDED if feasibility.optimal else SolveStatus.INFEASIBLE


def solve_lp(problem: LpProblem) -> SolveResult:
    """
    Solve a dense LP with HiGHS.

    Args:
        problem: LP in inequality form with free variables

    Returns:
        SolveResult; `dual` holds the (non-negative) inequality multipliers
    """
    n = problem.c.size
    kwargs = {}
    if problem.A.shape[0] > 0:
        kwargs["A_ub"] = problem.A
        kwargs["b_ub"] = problem.b
    if problem.Aeq is not None and problem.Aeq.shape[0] > 0:
        kwargs["A_eq"] = problem.Aeq
        kwargs["b_eq"] = problem.beq

    try:
        res = linprog(problem.c, bounds=[(None, None)] * n, method="highs",
                      options={"primal_feasibility_tolerance": tolerances.tol_feas * 1e-2,
                               "dual_feasibility_tolerance": tolerances.tol_opt},
                      **kwargs)
    except ValueError as e:
        logger.error(f"❌ LP setup rejected by HiGHS: {e}")
        return SolveResult(SolveStatus.NUMERICAL_FAILURE)

    status = _LINPROG_STATUS.get(res.status, SolveStatus.NUMERICAL_FAILURE)
    if res.status == 4 and "unbounded or infeasible" in str(res.message).lower():
        status = _unbounded_or_infeasible(problem)
    if status is not SolveStatus.OPTIMAL:
        if status is SolveStatus.NUMERICAL_FAILURE:
            logger.warning("⚠️ LP solve failed", highs_status=res.status, message=res.message)
        return SolveResult(status, iterations=int(getattr(res, "nit", 0) or 0))

    dual = None
    if problem.A.shape[0] > 0 and getattr(res, "ineqlin", None) is not None:
        # HiGHS reports marginals of `<=` rows as non-positive sensitivities
        dual = -np.asarray(res.ineqlin.marginals, dtype=float)
    return SolveResult(SolveStatus.OPTIMAL, x=np.asarray(res.x, dtype=float),
                       value=float(res.fun), dual=dual, iterations=int(res.nit))


def _solve_unconstrained_qp(problem: QpProblem) -> SolveResult:
    """Closed form for a QP without constraints."""
    x, _, _, _ = np.linalg.lstsq(problem.H, -problem.f, rcond=None)
    if np.linalg.norm(problem.H @ x + problem.f) > 1e-8 * max(1.0, np.linalg.norm(problem.f)):
        # f has a component in the null space of H
        return SolveResult(SolveStatus.UNBOUNDED)
    value = 0.5 * x @ problem.H @ x + problem.f @ x
    return SolveResult(SolveStatus.OPTIMAL, x=x, value=float(value))


def solve_qp(problem: QpProblem) -> SolveResult:
    """
    Solve a convex QP with OSQP (polished, fixed settings, no randomization).

    Args:
        problem: QP with PSD cost

    Returns:
        SolveResult with the global minimizer when optimal
    """
    n = problem.f.size
    m_ineq = problem.A.shape[0]
    m_eq = problem.Aeq.shape[0]
    if m_ineq + m_eq == 0:
        return _solve_unconstrained_qp(problem)

    A = np.vstack([problem.A, problem.Aeq])
    lower = np.concatenate([np.full(m_ineq, -np.inf), problem.beq])
    upper = np.concatenate([problem.b, problem.beq])

    settings = solver_settings
    # OSQP reports polishing on stdout even with verbose off
    with contextlib.redirect_stdout(io.StringIO()) as chatter:
        solver = osqp.OSQP()
        solver.setup(
            sparse.triu(sparse.csc_matrix(problem.H), format="csc"),
            problem.f,
            sparse.csc_matrix(A),
            lower,
            upper,
            eps_abs=settings.eps_abs,
            eps_rel=settings.eps_rel,
            max_iter=settings.max_iter,
            polish=settings.polish,
            verbose=False,
        )
        if problem.warm_start is not None and problem.warm_start.size == n:
            solver.warm_start(x=problem.warm_start)
        res = solver.solve()
    if chatter.getvalue().strip():
        logger.debug("OSQP output", output=chatter.getvalue().strip())

    status_text = str(res.info.status).lower()
    iterations = int(res.info.iter)
    if status_text in ("solved", "solved inaccurate") and res.x is not None:
        x = np.asarray(res.x, dtype=float)
        if status_text == "solved inaccurate":
            logger.warning("⚠️ OSQP returned an inaccurate solution", iterations=iterations)
        return SolveResult(SolveStatus.OPTIMAL, x=x, value=float(res.info.obj_val),
                           dual=np.asarray(res.y, dtype=float), iterations=iterations)
    if "primal infeasible" in status_text:
        return SolveResult(SolveStatus.INFEASIBLE, iterations=iterations)
    if "dual infeasible" in status_text:
        return SolveResult(SolveStatus.UNBOUNDED, iterations=iterations)

    logger.warning("⚠️ QP solve failed", osqp_status=status_text, iterations=iterations)
    return SolveResult(SolveStatus.NUMERICAL_FAILURE, iterations=iterations)


def kkt_residual(problem: QpProblem, result: SolveResult) -> float:
    """
    Infinity-norm KKT residual of an optimal QP result (stationarity,
    primal feasibility, complementary slackness), used as a certificate.
    """
    if not result.optimal:
        raise OptimizationError("KKT residual requested for a non-optimal result", result.status)
    x = result.x
    m_ineq = problem.A.shape[0]
    y = result.dual if result.dual is not None else np.zeros(m_ineq + problem.Aeq.shape[0])
    A = np.vstack([problem.A, problem.Aeq])
    stationarity = problem.H @ x + problem.f + A.T @ y
    slack = problem.b - problem.A @ x
    primal = np.concatenate([np.maximum(-slack, 0.0), np.abs(problem.Aeq @ x - problem.beq)])
    complementarity = np.abs(y[:m_ineq] * slack) if m_ineq else np.zeros(0)
    parts = [np.abs(stationarity), primal, complementarity]
    return float(max((np.max(p) if p.size else 0.0) for p in parts))

"""
Benchmark controllers under test
P, PI and MPC families for ACC and LK, addressed by their table names (e.g. "PI_ACC#2")
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import signal

from config import PolyfalsifyError
from optim import QpProblem, solve_qp
from plant import (
    AccParams,
    AccState,
    LkParams,
    acc_linear_system,
    lk_linear_system,
    lk_matrices,
    saturate,
    zoh_discretize,
)
from synthesis import LinearSystem

logger = structlog.get_logger(__name__)


class UncontrollableError(PolyfalsifyError):
    """(A, B) is not controllable, so poles cannot be placed."""


@dataclass(frozen=True)
class ControllerSpec:
    """
    One controller variant: its family and parameters.

    `tag` is "table" for tabled variants and "custom" for user-supplied ones.
    """
    family: str
    params: Dict[str, object]
    tag: str = "table"

    FAMILIES = ("P_ACC", "PI_ACC", "MPC_ACC", "P_LK", "PI_LK", "MPC_LK")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"Unknown controller family: {self.family}")
        if self.tag not in ("table", "custom"):
            raise ValueError("Controller tag must be 'table' or 'custom'")

    @property
    def case_study(self) -> str:
        return self.family.split("_")[1]


CONTROLLER_TABLE: Dict[str, ControllerSpec] = {
    "P_ACC#1": ControllerSpec("P_ACC", {"k_P": 600.0}),
    "P_ACC#2": ControllerSpec("P_ACC", {"k_P": 1800.0}),
    "P_ACC#3": ControllerSpec("P_ACC", {"k_P": 4000.0}),
    "PI_ACC#1": ControllerSpec("PI_ACC", {"k_P": 600.0, "k_I": 200.0}),
    "PI_ACC#2": ControllerSpec("PI_ACC", {"k_P": 1800.0, "k_I": 400.0}),
    "PI_ACC#3": ControllerSpec("PI_ACC", {"k_P": 4000.0, "k_I": 2000.0}),
    "MPC_ACC#1": ControllerSpec("MPC_ACC", {"horizon": 2}),
    "MPC_ACC#2": ControllerSpec("MPC_ACC", {"horizon": 8}),
    "MPC_ACC#3": ControllerSpec("MPC_ACC", {"horizon": 20}),
    "P_LK#1": ControllerSpec("P_LK", {"poles": (-0.93, 0.92, 0.9, 0.8)}),
    "P_LK#2": ControllerSpec("P_LK", {"poles": (-0.6 + 0.1j, -0.6 - 0.1j, 0.65 + 0.2j, 0.65 - 0.2j)}),
    "P_LK#3": ControllerSpec("P_LK", {"poles": (0.003, 0.66 + 0.34j, 0.66 - 0.34j, 0.4)}),
    "PI_LK#1": ControllerSpec("PI_LK", {"poles": (-0.93, 0.92, 0.9, 0.8, 0.7)}),
    "PI_LK#2": ControllerSpec("PI_LK", {"poles": (-0.6 + 0.1j, -0.6 - 0.1j, 0.65 + 0.2j, 0.65 - 0.2j, 0.7)}),
    "PI_LK#3": ControllerSpec("PI_LK", {"poles": (0.002, 0.6 + 0.4j, 0.6 - 0.4j, 0.4, 0.7)}),
    "MPC_LK#1": ControllerSpec("MPC_LK", {"horizon": 2}),
    "MPC_LK#2": ControllerSpec("MPC_LK", {"horizon": 5}),
    "MPC_LK#3": ControllerSpec("MPC_LK", {"horizon": 20}),
}


@dataclass
class ControllerState:
    """Per-episode memory: integrator accumulator and MPC warm start."""
    e: float = 0.0
    warm_start: Optional[np.ndarray] = field(default=None, repr=False)

    def reset(self) -> None:
        self.e = 0.0
        self.warm_start = None


# ---------------------------------------------------------------------------
# ACC laws
# ---------------------------------------------------------------------------

def acc_target(s: AccState, params: AccParams = AccParams()) -> float:
    """min(v_des, h / ω_des)."""
    return min(params.v_des, s.h / params.omega_des)


def _acc_p_raw(s: AccState, k_P: float, params: AccParams) -> float:
    return params.f0 + params.f2 * s.v ** 2 - k_P * (s.v - acc_target(s, params))


def acc_p(s: AccState, k_P: float, params: AccParams = AccParams()) -> float:
    """Feedback-linearizing P law saturated to the comfort force bounds."""
    return saturate(_acc_p_raw(s, k_P, params), params.F_wc_min, params.F_wc_max)


def acc_pi(s: AccState, state: ControllerState, k_P: float, k_I: float,
           params: AccParams = AccParams()) -> float:
    """P law plus −k_I·e, saturated; `state.e` is read, not updated."""
    return saturate(_acc_p_raw(s, k_P, params) - k_I * state.e, params.F_wc_min, params.F_wc_max)


def _prediction_matrices(A: np.ndarray, B: np.ndarray, w: np.ndarray, T: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Condensed prediction x_{1..T} = Φ x0 + Γ u_{0..T-1} + c for x+ = A x + B u + w.

    Returns Φ (T·n × n), Γ (T·n × T·m), c (T·n).
    """
    n, m = B.shape
    Phi = np.zeros((T * n, n))
    Gamma = np.zeros((T * n, T * m))
    c = np.zeros(T * n)
    power = np.eye(n)
    drift = np.zeros(n)
    for k in range(T):
        drift = A @ drift + w
        power = A @ power
        Phi[k * n:(k + 1) * n] = power
        c[k * n:(k + 1) * n] = drift
        for j in range(k + 1):
            Gamma[k * n:(k + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(A, k - j) @ B
    return Phi, Gamma, c


def acc_mpc_problem(s: AccState, horizon: int, sys: LinearSystem,
                    params: AccParams = AccParams()) -> Tuple[QpProblem, float]:
    """
    Condensed ACC MPC QP in scaled inputs z = F_w / F_scale.

    Minimizes Σ_{t=1..T} (v(t) − v_target)² with v_target frozen at its
    initial value, subject to force, velocity and h >= 0 constraints.

    Returns:
        (problem, F_scale)
    """
    T = int(horizon)
    if T < 1:
        raise ValueError("MPC horizon must be >= 1")
    n = sys.n_x
    x0 = np.array([s.v, s.h, s.v_L])
    target = acc_target(s, params)
    scale = max(abs(params.F_wc_min), abs(params.F_wc_max))

    Phi, Gamma, c = _prediction_matrices(sys.A, sys.B, sys.K, T)
    free = Phi @ x0 + c
    G = Gamma * scale
    v_rows = np.arange(T) * n
    h_rows = v_rows + 1

    Gv = G[v_rows]
    rv = free[v_rows] - target
    H = 2.0 * Gv.T @ Gv
    f = 2.0 * Gv.T @ rv

    eye = np.eye(T)
    A_ineq = np.vstack([eye, -eye, Gv, -Gv, -G[h_rows]])
    b_ineq = np.concatenate([
        np.full(T, params.F_wc_max / scale),
        np.full(T, -params.F_wc_min / scale),
        params.v_max - free[v_rows],
        free[v_rows] - params.v_min,
        free[h_rows],
    ])
    return QpProblem(H=H, f=f, A=A_ineq, b=b_ineq), scale


def acc_mpc(s: AccState, horizon: int, sys: LinearSystem, params: AccParams = AccParams(),
            state: Optional[ControllerState] = None, fallback_kp: float = 600.0) -> float:
    """First input of the ACC MPC; the saturated P law when the QP has no solution."""
    problem, scale = acc_mpc_problem(s, horizon, sys, params)
    if state is not None and state.warm_start is not None and state.warm_start.size == problem.f.size:
        problem.warm_start = state.warm_start
    result = solve_qp(problem)
    if not result.optimal:
        logger.debug("ACC MPC infeasible, falling back to P law", status=result.status.value)
        return acc_p(s, fallback_kp, params)
    if state is not None:
        state.warm_start = np.append(result.x[1:], result.x[-1])
    return saturate(float(result.x[0]) * scale, params.F_wc_min, params.F_wc_max)


# ---------------------------------------------------------------------------
# Pole placement and LK laws
# ---------------------------------------------------------------------------

def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def _acker(A: np.ndarray, B: np.ndarray, poles: np.ndarray) -> np.ndarray:
    """Ackermann's formula for single-input systems."""
    n = A.shape[0]
    coeffs = np.real(np.poly(poles))
    char = np.zeros_like(A)
    for c in coeffs:
        char = char @ A + c * np.eye(n)
    last = np.zeros(n)
    last[-1] = 1.0
    return last @ np.linalg.solve(controllability_matrix(A, B), char)


def place_poles(A, B, poles: Sequence[complex]) -> np.ndarray:
    """
    State feedback gain K (u = −K x) with eig(A − B K) = poles.

    Args:
        A: State matrix
        B: Single-column input matrix
        poles: Desired closed-loop poles; complex ones in conjugate pairs

    Returns:
        Gain row of length n

    Raises:
        UncontrollableError: if (A, B) is not controllable
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    poles = np.atleast_1d(np.asarray(poles, dtype=complex))
    if B.shape[1] != 1:
        raise ValueError("place_poles supports single-input systems only")
    if poles.size != n:
        raise ValueError(f"Need {n} poles, got {poles.size}")
    if not np.allclose(np.sort_complex(poles), np.sort_complex(poles.conj()), atol=1e-12):
        raise ValueError("Complex poles must come in conjugate pairs")
    if np.linalg.matrix_rank(controllability_matrix(A, B)) < n:
        raise UncontrollableError("System not controllable; pole placement invalid")

    repeated = len(np.unique(np.round(poles, 12))) < n
    if n == 1 or repeated:
        K = _acker(A, B, poles)
    else:
        real_poles = poles.real if np.all(poles.imag == 0) else poles
        K = signal.place_poles(A, B, real_poles, method="YT").gain_matrix.ravel()

    achieved = np.sort_complex(np.linalg.eigvals(A - np.outer(B[:, 0], K)))
    error = np.max(np.abs(achieved - np.sort_complex(poles)))
    if error > 1e-6 and not repeated:
        logger.warning("⚠️ Placed poles deviate from the request", max_error=float(error))
    return K


def lk_pi_augmented(params: LkParams = LkParams(), dt: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """Discretized [[A, 0], [e1ᵀ, 0]], [B; 0]: the LK model with an integrator on y."""
    A, B, _ = lk_matrices(params)
    A_aug = np.zeros((5, 5))
    A_aug[:4, :4] = A
    A_aug[4, 0] = 1.0
    B_aug = np.vstack([B, [[0.0]]])
    A_d, B_d, _, _ = zoh_discretize(A_aug, B_aug, np.zeros((5, 1)), np.zeros(5), dt)
    return A_d, B_d


def lk_p(x, K: np.ndarray, params: LkParams = LkParams()) -> float:
    """δ_f = sat(−K x)."""
    return saturate(-float(np.dot(K, x)), params.theta_min, params.theta_max)


def lk_pi(x, state: ControllerState, K_aug: np.ndarray, params: LkParams = LkParams()) -> float:
    """δ_f = sat(−K_aug [x; e]); `state.e` is read, not updated."""
    return saturate(-float(np.dot(K_aug, np.append(x, state.e))), params.theta_min, params.theta_max)


def lk_mpc_problem(x, horizon: int, sys: LinearSystem, params: LkParams = LkParams()) -> QpProblem:
    """Condensed LK MPC QP: Σ xᵀ diag(1,0,0,0) x + u², input bounds as constraints."""
    T = int(horizon)
    if T < 1:
        raise ValueError("MPC horizon must be >= 1")
    n = sys.n_x
    x0 = np.asarray(x, dtype=float)
    Phi, Gamma, c = _prediction_matrices(sys.A, sys.B, sys.K, T)
    free = Phi @ x0 + c
    y_rows = np.arange(T) * n
    Gy = Gamma[y_rows]
    H = 2.0 * (Gy.T @ Gy + np.eye(T))
    f = 2.0 * Gy.T @ free[y_rows]
    eye = np.eye(T)
    A_ineq = np.vstack([eye, -eye])
    b_ineq = np.concatenate([np.full(T, params.theta_max), np.full(T, -params.theta_min)])
    return QpProblem(H=H, f=f, A=A_ineq, b=b_ineq)


def lk_mpc(x, horizon: int, sys: LinearSystem, params: LkParams = LkParams(),
           state: Optional[ControllerState] = None) -> float:
    problem = lk_mpc_problem(x, horizon, sys, params)
    if state is not None and state.warm_start is not None and state.warm_start.size == problem.f.size:
        problem.warm_start = state.warm_start
    result = solve_qp(problem)
    if not result.optimal:
        logger.debug("LK MPC failed, falling back to zero steering", status=result.status.value)
        return 0.0
    if state is not None:
        state.warm_start = np.append(result.x[1:], 0.0)
    # clip solver tolerance overshoot only
    return saturate(float(result.x[0]), params.theta_min, params.theta_max)


# ---------------------------------------------------------------------------
# Controller objects used by the simulator
# ---------------------------------------------------------------------------

class Controller(ABC):
    """Maps a sampled state to an input; holds per-episode memory."""

    def __init__(self, name: str):
        self.name = name
        self.state = ControllerState()

    def reset(self) -> None:
        self.state.reset()

    def __call__(self, x) -> np.ndarray:
        return np.array([self.control(np.asarray(x, dtype=float))])

    @abstractmethod
    def control(self, x: np.ndarray) -> float:
        ...


class AccPController(Controller):
    def __init__(self, name: str, k_P: float, params: AccParams):
        super().__init__(name)
        self.k_P = k_P
        self.params = params

    def control(self, x):
        return acc_p(AccState.from_array(x), self.k_P, self.params)


class AccPIController(Controller):
    """Conditional integration: the error is committed only while unsaturated."""

    def __init__(self, name: str, k_P: float, k_I: float, params: AccParams):
        super().__init__(name)
        self.k_P = k_P
        self.k_I = k_I
        self.params = params

    def control(self, x):
        s = AccState.from_array(x)
        committed = self.state.e
        self.state.e = committed + s.v - acc_target(s, self.params)
        raw = _acc_p_raw(s, self.k_P, self.params) - self.k_I * self.state.e
        u = acc_pi(s, self.state, self.k_P, self.k_I, self.params)
        if not self.params.F_wc_min < raw < self.params.F_wc_max:
            self.state.e = committed
        return u


class AccMpcController(Controller):
    def __init__(self, name: str, horizon: int, sys: LinearSystem, params: AccParams, fallback_kp: float = 600.0):
        super().__init__(name)
        self.horizon = horizon
        self.sys = sys
        self.params = params
        self.fallback_kp = fallback_kp

    def control(self, x):
        return acc_mpc(AccState.from_array(x), self.horizon, self.sys, self.params, self.state, self.fallback_kp)


class LkPController(Controller):
    def __init__(self, name: str, K: np.ndarray, params: LkParams):
        super().__init__(name)
        self.K = np.asarray(K, dtype=float)
        self.params = params

    def control(self, x):
        return lk_p(x, self.K, self.params)


class LkPIController(Controller):
    """The error state follows the last row of the discretized augmented model."""

    def __init__(self, name: str, K_aug: np.ndarray, A_aug: np.ndarray, B_aug: np.ndarray, params: LkParams):
        super().__init__(name)
        self.K_aug = np.asarray(K_aug, dtype=float)
        self.A_aug = A_aug
        self.B_aug = B_aug
        self.params = params

    def control(self, x):
        u = lk_pi(x, self.state, self.K_aug, self.params)
        z = np.append(x, self.state.e)
        self.state.e = float(self.A_aug[-1] @ z + self.B_aug[-1, 0] * u)
        return u


class LkMpcController(Controller):
    def __init__(self, name: str, horizon: int, sys: LinearSystem, params: LkParams):
        super().__init__(name)
        self.horizon = horizon
        self.sys = sys
        self.params = params

    def control(self, x):
        return lk_mpc(x, self.horizon, self.sys, self.params, self.state)


def lk_gain(poles: Sequence[complex], params: LkParams = LkParams(), dt: float = 0.1,
            pole_domain: str = "discrete", integral: bool = False) -> np.ndarray:
    """State feedback gain for the LK model (augmented with e when `integral`)."""
    if pole_domain not in ("discrete", "continuous"):
        raise ValueError(f"Unknown pole domain: {pole_domain}")
    if integral:
        if pole_domain == "discrete":
            A, B = lk_pi_augmented(params, dt)
        else:
            A_c, B_c, _ = lk_matrices(params)
            A = np.zeros((5, 5))
            A[:4, :4] = A_c
            A[4, 0] = 1.0
            B = np.vstack([B_c, [[0.0]]])
    else:
        A, B, _ = lk_matrices(params)
        if pole_domain == "discrete":
            A, B, _, _ = zoh_discretize(A, B, np.zeros((4, 1)), np.zeros(4), dt)
    return place_poles(A, B, poles)


def build_controller(name_or_spec, dt: float = 0.1, acc_params: AccParams = AccParams(),
                     lk_params: LkParams = LkParams(), linearize_v: float = 20.0,
                     pole_domain: str = "discrete") -> Controller:
    """
    Instantiate a controller from its table name or a ControllerSpec.

    Raises:
        KeyError: for an unknown table name
    """
    if isinstance(name_or_spec, ControllerSpec):
        spec, name = name_or_spec, f"{name_or_spec.family}#custom"
    else:
        name = name_or_spec
        if name not in CONTROLLER_TABLE:
            raise KeyError(f"Unknown controller variant: {name}")
        spec = CONTROLLER_TABLE[name]
    p = spec.params

    if spec.family == "P_ACC":
        return AccPController(name, float(p["k_P"]), acc_params)
    if spec.family == "PI_ACC":
        return AccPIController(name, float(p["k_P"]), float(p["k_I"]), acc_params)
    if spec.family == "MPC_ACC":
        sys = acc_linear_system(acc_params, dt, linearize_v)
        return AccMpcController(name, int(p["horizon"]), sys, acc_params, float(p.get("fallback_kp", 600.0)))
    if spec.family == "P_LK":
        K = lk_gain(p["poles"], lk_params, dt, pole_domain)
        return LkPController(name, K, lk_params)
    if spec.family == "PI_LK":
        K_aug = lk_gain(p["poles"], lk_params, dt, pole_domain, integral=True)
        A_aug, B_aug = lk_pi_augmented(lk_params, dt)
        return LkPIController(name, K_aug, A_aug, B_aug, lk_params)
    sys = lk_linear_system(lk_params, dt)
    return LkMpcController(name, int(p["horizon"]), sys, lk_params)

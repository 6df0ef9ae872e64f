"""
Vehicle models and closed-loop simulation
Nonlinear ACC and linear LK plants, zero-order-hold discretization, fixed-step RK4 episodes
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, IO, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from dataclasses_json import dataclass_json
from scipy.linalg import expm

from config import tolerances
from polytope import Polytope
from synthesis import LinearSystem, SupervisionImpossible, SupervisorMap, supervise

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class AccParams:
    """Longitudinal model constants and bounds (SI units)."""
    m: float = 1462.0
    f0: float = 51.0
    f1: float = 1.2567
    f2: float = 0.4342
    v_min: float = 0.0
    v_max: float = 25.0
    v_L_min: float = 0.0
    v_L_max: float = 25.0
    v_des: float = 20.0
    F_wc_min: float = -4305.9
    F_wc_max: float = 2870.6
    F_wp_min: float = -11482.5
    F_wp_max: float = 7176.6
    a_L_min: float = -0.97
    a_L_max: float = 0.65
    omega_min: float = 1.7
    h_min: float = 4.0
    omega_des: float = 2.0
    h_cap: float = 200.0

    def __post_init__(self):
        for lo, hi in (("v_min", "v_max"), ("v_L_min", "v_L_max"), ("F_wc_min", "F_wc_max"),
                       ("F_wp_min", "F_wp_max"), ("a_L_min", "a_L_max"), ("h_min", "h_cap")):
            if getattr(self, lo) >= getattr(self, hi):
                raise ValueError(f"{lo} must be below {hi}")
        if min(self.m, self.omega_min, self.omega_des, self.h_min) <= 0:
            raise ValueError("Mass, time headways and h_min must be positive")

    def input_box(self) -> Polytope:
        return Polytope.from_box([self.F_wc_min], [self.F_wc_max])

    def disturbance_box(self) -> Polytope:
        return Polytope.from_box([self.a_L_min], [self.a_L_max])


@dataclass(frozen=True)
class LkParams:
    """Lateral model constants and bounds (SI units)."""
    v_N: float = 20.0
    m: float = 1462.0
    I_z: float = 2500.0
    a: float = 1.08
    b: float = 1.62
    C_af: float = 85400.0
    C_ar: float = 90000.0
    y_max: float = 0.9
    nu_max: float = 1.0
    dpsi_max: float = 0.15
    r_max: float = 0.27
    theta_min: float = -0.26
    theta_max: float = 0.26

    def domain_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        hi = np.array([self.y_max, self.nu_max, self.dpsi_max, self.r_max])
        return -hi, hi

    def input_box(self) -> Polytope:
        return Polytope.from_box([self.theta_min], [self.theta_max])


@dataclass(frozen=True)
class AccState:
    v: float
    h: float
    v_L: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.h, self.v_L])

    @classmethod
    def from_array(cls, x) -> 'AccState':
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class LkState:
    y: float
    nu: float
    dpsi: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.y, self.nu, self.dpsi, self.r])

    @classmethod
    def from_array(cls, x) -> 'LkState':
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


def saturate(x, lo, hi):
    """Clamp to [lo, hi] (elementwise for arrays)."""
    if np.ndim(x) == 0:
        return float(min(max(x, lo), hi))
    return np.clip(x, lo, hi)


# ---------------------------------------------------------------------------
# Continuous-time models
# ---------------------------------------------------------------------------

def acc_derivative(s: Union[AccState, np.ndarray], F_w: float, a_L: float,
                   params: AccParams = AccParams()) -> np.ndarray:
    """(dv/dt, dh/dt, dv_L/dt) of the nonlinear longitudinal model."""
    v, h, v_L = s.as_array() if isinstance(s, AccState) else np.asarray(s, dtype=float)
    dv = (F_w - params.f0 - params.f1 * v - params.f2 * v * v) / params.m
    return np.array([dv, v_L - v, a_L])


def lk_matrices(params: LkParams = LkParams()) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (A, B, E) of the lateral model; E is the road yaw-rate column."""
    p = params
    mv = p.m * p.v_N
    iv = p.I_z * p.v_N
    A = np.array([
        [0.0, 1.0, p.v_N, 0.0],
        [0.0, -(p.C_af + p.C_ar) / mv, 0.0, (p.b * p.C_ar - p.a * p.C_af) / mv - p.v_N],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, (p.b * p.C_ar - p.a * p.C_af) / iv, 0.0, -(p.a ** 2 * p.C_af + p.b ** 2 * p.C_ar) / iv],
    ])
    B = np.array([[0.0], [p.C_af / p.m], [0.0], [p.a * p.C_af / p.I_z]])
    E = np.array([[0.0], [0.0], [-1.0], [0.0]])
    return A, B, E


def lk_derivative(s: Union[LkState, np.ndarray], delta_f: float, r_d: float,
                  params: LkParams = LkParams()) -> np.ndarray:
    x = s.as_array() if isinstance(s, LkState) else np.asarray(s, dtype=float)
    A, B, E = lk_matrices(params)
    return A @ x + B[:, 0] * delta_f + E[:, 0] * r_d


def zoh_discretize(A_c, B_c, E_c, K_c, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact zero-order-hold discretization of dx/dt = A x + B u + E d + K
    through the exponential of the augmented matrix.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
    n = A_c.shape[0]
    B_c = np.asarray(B_c, dtype=float).reshape(n, -1)
    E_c = np.asarray(E_c, dtype=float).reshape(n, -1)
    K_c = np.asarray(K_c, dtype=float).reshape(n, 1)
    m, p = B_c.shape[1], E_c.shape[1]

    size = n + m + p + 1
    M = np.zeros((size, size))
    M[:n, :n] = A_c
    M[:n, n:] = np.hstack([B_c, E_c, K_c])
    Phi = expm(M * dt)
    A_d = Phi[:n, :n]
    B_d = Phi[:n, n:n + m]
    E_d = Phi[:n, n + m:n + m + p]
    K_d = Phi[:n, -1]
    return A_d, B_d, E_d, K_d


def acc_residual_bound(params: AccParams = AccParams(), linearize_v: float = 20.0) -> float:
    """Largest f2·(v − v_N)² over [v_min, v_max]."""
    worst = max((params.v_min - linearize_v) ** 2, (params.v_max - linearize_v) ** 2)
    return params.f2 * worst


def acc_linear_system(params: AccParams = AccParams(), dt: float = 0.1, linearize_v: float = 20.0,
                      h_cap: Optional[float] = None) -> LinearSystem:
    """
    ACC dynamics linearized around v = linearize_v and discretized at dt.

    The quadratic drag residual f2·(v − v_N)² is carried as a bounded input
    on two independent columns (its hold effect on v and on h).
    Domain: [v_min, v_max] × [0, h_cap] × [v_L_min, v_L_max].
    """
    p = params
    h_cap = tolerances.h_cap if h_cap is None else h_cap
    A_c = np.array([
        [-(p.f1 + 2.0 * p.f2 * linearize_v) / p.m, 0.0, 0.0],
        [-1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0],
    ])
    B_c = np.array([[1.0 / p.m], [0.0], [0.0]])
    E_c = np.array([[0.0, -1.0 / p.m], [0.0, 0.0], [1.0, 0.0]])
    K_c = np.array([(p.f2 * linearize_v ** 2 - p.f0) / p.m, 0.0, 0.0])
    A_d, B_d, E_both, K_d = zoh_discretize(A_c, B_c, E_c, K_c, dt)

    residual = E_both[:, 1]
    E_r = np.array([[residual[0], 0.0], [0.0, residual[1]], [0.0, residual[2]]])
    bound = acc_residual_bound(p, linearize_v)
    X = Polytope.from_box([p.v_min, 0.0, p.v_L_min], [p.v_max, h_cap, p.v_L_max])
    return LinearSystem(A_d, B_d, E_both[:, :1], K_d, X, p.input_box(), p.disturbance_box(), dt,
                        E_r=E_r, R=Polytope.from_box([0.0, 0.0], [bound, bound]))


def _ego_hold(params: AccParams, dt: float, drag_slope: float, drag_offset: float):
    """ZOH of (v, h) with drag f0 + (f1 + drag_slope)·v + drag_offset and ḣ = −v."""
    p = params
    A_c = np.array([[-(p.f1 + drag_slope) / p.m, 0.0], [-1.0, 0.0]])
    B_c = np.array([[1.0 / p.m], [0.0]])
    K_c = np.array([-(p.f0 + drag_offset) / p.m, 0.0])
    A_d, B_d, _, K_d = zoh_discretize(A_c, B_c, np.zeros((2, 1)), K_c, dt)
    return A_d, B_d[:, 0], K_d


def acc_invariance_system(params: AccParams = AccParams(), dt: float = 0.1) -> LinearSystem:
    """
    ACC dynamics for invariant-set synthesis, sound for every lead behaviour
    that keeps v_L inside its bounds.

    The lead enters through d = (next v_L, lead travel over the step), both
    boxed by the speed bounds and independent of the current v_L. Over
    [v_min, v_max] the drag f2·v² lies between its tangent at v_min and its
    chord; the two hold maps bracket v+ and the ego travel separately, so
    the four row combinations are carried as vertex models. Both bounds are
    exact at v_min, which lets a stopped car stay stopped.
    Domain: [v_min, v_max] × [0, ∞) × [v_L_min, v_L_max].
    """
    p = params
    tangent = (2.0 * p.f2 * p.v_min, -p.f2 * p.v_min ** 2)
    chord = (p.f2 * (p.v_min + p.v_max), -p.f2 * p.v_min * p.v_max)
    holds = [_ego_hold(p, dt, *bound) for bound in (tangent, chord)]

    models = []
    for speed_row, travel_row in ((0, 0), (0, 1), (1, 0), (1, 1)):
        A_v, B_v, K_v = holds[speed_row]
        A_h, B_h, K_h = holds[travel_row]
        A = np.array([[A_v[0, 0], 0.0, 0.0], [A_h[1, 0], 1.0, 0.0], [0.0, 0.0, 0.0]])
        B = np.array([[B_v[0]], [B_h[1]], [0.0]])
        K = np.array([K_v[0], K_h[1], 0.0])
        models.append((A, B, K))

    E = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    D = Polytope.from_box([p.v_L_min, dt * p.v_L_min], [p.v_L_max, dt * p.v_L_max])
    X = Polytope.from_box([p.v_min, 0.0, p.v_L_min], [p.v_max, np.inf, p.v_L_max])
    A, B, K = models[0]
    return LinearSystem(A, B, E, K, X, p.input_box(), D, dt, vertex_models=tuple(models[1:]))


def acc_intersample_margin(params: AccParams = AccParams(), dt: float = 0.1) -> float:
    """
    Headway margin that keeps h − ω_min·v and h nonnegative between samples
    when both are nonnegative at them: M·dt²/8 with M bounding |d²/dt²|.
    """
    p = params
    accel = (max(-p.F_wc_min, p.F_wc_max) + p.f0 + p.f1 * p.v_max + p.f2 * p.v_max ** 2) / p.m
    jerk = (p.f1 + 2.0 * p.f2 * p.v_max) * accel / p.m
    lead = max(-p.a_L_min, p.a_L_max)
    bound = lead + accel + p.omega_min * jerk
    return bound * dt ** 2 / 8.0


def lk_linear_system(params: LkParams = LkParams(), dt: float = 0.1, r_d_bound: float = 0.087,
                     domain_scale: float = 1.0) -> LinearSystem:
    """LK dynamics discretized at dt on the lateral domain box scaled by `domain_scale`."""
    A_c, B_c, E_c = lk_matrices(params)
    A_d, B_d, E_d, K_d = zoh_discretize(A_c, B_c, E_c, np.zeros(4), dt)
    lo, hi = params.domain_bounds()
    X = Polytope.from_box(lo * domain_scale, hi * domain_scale)
    D = Polytope.from_box([-r_d_bound], [r_d_bound])
    return LinearSystem(A_d, B_d, E_d, K_d, X, params.input_box(), D, dt)


# ---------------------------------------------------------------------------
# Plants used by the simulator
# ---------------------------------------------------------------------------

class AccPlant:
    """Nonlinear longitudinal plant; the lead car stops at its velocity rails."""

    state_names = ("v", "h", "v_L")
    input_names = ("F_w",)
    disturbance_names = ("a_L",)

    def __init__(self, params: AccParams = AccParams()):
        self.params = params

    def derivative(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        return acc_derivative(x, float(u[0]), float(d[0]), self.params)

    def hold_disturbance(self, x: np.ndarray, d: np.ndarray, h_sub: float) -> np.ndarray:
        """Lead acceleration limited so v_L stays in its bounds over the substep."""
        p = self.params
        lo = (p.v_L_min - x[2]) / h_sub
        hi = (p.v_L_max - x[2]) / h_sub
        return np.array([min(max(float(d[0]), min(lo, 0.0)), max(hi, 0.0))])

    def crashed(self, x: np.ndarray) -> bool:
        return bool(x[1] < -tolerances.monitor_tol)


class LkPlant:
    """Linear lateral plant at fixed longitudinal speed."""

    state_names = ("y", "nu", "dpsi", "r")
    input_names = ("delta_f",)
    disturbance_names = ("r_d",)

    def __init__(self, params: LkParams = LkParams()):
        self.params = params
        self._A, self._B, self._E = lk_matrices(params)

    def derivative(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self._A @ x + self._B @ u + self._E @ d

    def hold_disturbance(self, x: np.ndarray, d: np.ndarray, h_sub: float) -> np.ndarray:
        return d

    def crashed(self, x: np.ndarray) -> bool:
        return False


def rk4_step(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of size h."""
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass_json
@dataclass
class StepRecord:
    """One control step: the sampled state, inputs, disturbance and the substep states it produced."""
    step: int
    time: float
    state: List[float]
    u_legacy: List[float]
    u: List[float]
    d: List[float]
    overridden: bool = False
    supervision_failed: bool = False
    substates: List[List[float]] = field(default_factory=list)


@dataclass
class Trajectory:
    """
    Closed-loop episode sampled at dt.

    `substates[0]` is the initial state and `substates[i]` the state after
    i substeps; `states[k]` is the state at control step k.
    """
    substates: np.ndarray
    u_legacy: np.ndarray
    u: np.ndarray
    d: np.ndarray
    dt: float
    substeps: int
    state_names: Tuple[str, ...] = ()
    overrides: int = 0
    supervision_failures: List[int] = field(default_factory=list)
    failure: Optional[str] = None
    crashed: bool = False

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    @property
    def states(self) -> np.ndarray:
        samples = self.substates[::self.substeps]
        if (self.substates.shape[0] - 1) % self.substeps:
            samples = np.vstack([samples, self.substates[-1]])
        return samples

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt

    @property
    def final_state(self) -> np.ndarray:
        return self.substates[-1]

    def to_records(self) -> List[StepRecord]:
        records = []
        for k in range(self.n_steps):
            start = k * self.substeps
            chunk = self.substates[start + 1:start + 1 + self.substeps]
            records.append(StepRecord(
                step=k,
                time=round(k * self.dt, 12),
                state=self.substates[start].tolist(),
                u_legacy=self.u_legacy[k].tolist(),
                u=self.u[k].tolist(),
                d=self.d[k].tolist(),
                overridden=not np.allclose(self.u[k], self.u_legacy[k], rtol=0.0, atol=1e-12),
                supervision_failed=k in self.supervision_failures,
                substates=chunk.tolist(),
            ))
        return records

    @classmethod
    def from_records(cls, records: Sequence[StepRecord], dt: float, substeps: int,
                     state_names: Tuple[str, ...] = (), failure: Optional[str] = None) -> 'Trajectory':
        """Rebuild a trajectory from its step records."""
        if not records:
            raise ValueError("A trajectory needs at least one step record")
        rows = [records[0].state]
        for record in records:
            rows.extend(record.substates)
        substates = np.array(rows, dtype=float)
        return cls(
            substates=substates,
            u_legacy=np.array([r.u_legacy for r in records], dtype=float),
            u=np.array([r.u for r in records], dtype=float),
            d=np.array([r.d for r in records], dtype=float),
            dt=dt,
            substeps=substeps,
            state_names=tuple(state_names),
            overrides=sum(r.overridden for r in records),
            supervision_failures=[r.step for r in records if r.supervision_failed],
            failure=failure,
            crashed=len(records[-1].substates) < substeps,
        )

    def write_jsonl(self, sink: Union[str, Path, IO[str]], **extra) -> None:
        """One JSON object per step; `extra` keys are merged into every line."""
        if isinstance(sink, (str, Path)):
            with open(sink, "w", encoding="utf-8") as f:
                self.write_jsonl(f, **extra)
            return
        for record in self.to_records():
            payload = dict(extra)
            payload.update(record.to_dict())
            sink.write(json.dumps(payload) + "\n")

    def to_csv(self, path: Union[str, Path]) -> None:
        """Compact per-step CSV: time, sampled state, applied input, disturbance."""
        names = list(self.state_names) or [f"x{k}" for k in range(self.substates.shape[1])]
        m, p = self.u.shape[1], self.d.shape[1]
        header = ["step", "time"] + names + [f"u{k}" for k in range(m)] + [f"d{k}" for k in range(p)]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            states = self.states
            for k in range(states.shape[0]):
                # the final sample has no input applied
                u = self.u[k].tolist() if k < self.n_steps else [""] * m
                d = self.d[k].tolist() if k < self.n_steps else [""] * p
                writer.writerow([k, f"{k * self.dt:.6g}"] + [repr(float(v)) for v in states[k]] + u + d)


def simulate(x0, plant, controller, scheme, supervisor: Optional[SupervisorMap] = None,
             horizon: int = 300, dt: float = 0.1, substeps: int = 10, sample_index: int = 0) -> Trajectory:
    """
    Run one closed-loop episode.

    Args:
        x0: Initial state
        plant: AccPlant or LkPlant
        controller: Callable state -> input with a reset() method
        scheme: DisturbanceScheme emitting one disturbance per step
        supervisor: Optional admissible-input map filtering the controller
        horizon: Number of control steps
        dt: Control period
        substeps: RK4 steps per control period
        sample_index: Episode index handed to the scheme

    Returns:
        Trajectory; stops early on a crash or a controller failure
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    h_sub = dt / substeps
    controller.reset()
    scheme.reset(sample_index)

    substates = [x.copy()]
    u_legacy_rows, u_rows, d_rows = [], [], []
    supervision_failures: List[int] = []
    overrides = 0
    failure = None
    crashed = False

    for k in range(horizon):
        try:
            u_legacy = np.atleast_1d(np.asarray(controller(x), dtype=float))
        except Exception as e:
            failure = f"controller failed at step {k}: {e}"
            logger.error(f"❌ {failure}")
            break

        u = u_legacy
        if supervisor is not None:
            try:
                u = supervise(u_legacy, x, supervisor)
            except SupervisionImpossible as e:
                supervision_failures.append(k)
                logger.debug("Supervision impossible, legacy input applied", step=k, reason=str(e))
            if not np.allclose(u, u_legacy, rtol=0.0, atol=1e-12):
                overrides += 1

        d = np.atleast_1d(scheme(x, u, k))
        u_legacy_rows.append(u_legacy)
        u_rows.append(u)
        d_rows.append(d)

        for _ in range(substeps):
            d_held = plant.hold_disturbance(x, d, h_sub)
            x = rk4_step(lambda z: plant.derivative(z, u, d_held), x, h_sub)
            substates.append(x.copy())
            if plant.crashed(x):
                crashed = True
                break
        if crashed:
            logger.debug("Episode stopped on crash", step=k)
            break

    m = len(plant.input_names)
    p = len(plant.disturbance_names)
    return Trajectory(
        substates=np.array(substates),
        u_legacy=np.array(u_legacy_rows).reshape(-1, m),
        u=np.array(u_rows).reshape(-1, m),
        d=np.array(d_rows).reshape(-1, p),
        dt=dt,
        substeps=substeps,
        state_names=plant.state_names,
        overrides=overrides,
        supervision_failures=supervision_failures,
        failure=failure,
        crashed=crashed,
    )

"""
Safety specifications and trajectory monitors
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import structlog
from dataclasses_json import dataclass_json

from config import tolerances
from plant import AccParams, LkParams, Trajectory, acc_intersample_margin
from polytope import Polytope, UnionRegion, complement_within, intersect

logger = structlog.get_logger(__name__)

ACC_SPECS = ("phi_acc_1", "phi_acc_2", "phi_acc_3", "phi_acc")
LK_SPECS = ("phi_lk_1", "phi_lk")


@dataclass(frozen=True)
class AccSpecSets:
    """
    M: lead car close (h <= v_des·ω_des, closed); S: time and distance headway;
    S_U: comfort force bounds; domain: X_ACC.
    """
    M: Polytope
    S: Polytope
    S_U: Polytope
    domain: Polytope


def acc_spec_sets(params: AccParams = AccParams()) -> AccSpecSets:
    p = params
    M = Polytope([[0.0, 1.0, 0.0]], [p.v_des * p.omega_des])
    S = Polytope([[p.omega_min, -1.0, 0.0], [0.0, -1.0, 0.0]], [0.0, -p.h_min])
    domain = Polytope.from_box([p.v_min, p.h_min, p.v_L_min], [p.v_max, np.inf, p.v_L_max])
    return AccSpecSets(M, S, p.input_box(), domain)


def acc_safe_region(params: AccParams = AccParams(), h_cap: Optional[float] = None,
                    margin: float = 0.0) -> UnionRegion:
    """
    S ∩ X_ACC with h clipped at h_cap, as one polytope over (v, h, v_L).

    `margin` tightens both headway rows; h_cap = inf leaves h unbounded above.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    h_cap = tolerances.h_cap if h_cap is None else h_cap
    p = params
    sets = acc_spec_sets(params)
    S = Polytope([[p.omega_min, -1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]],
                 [-margin, -p.h_min - margin, h_cap])
    return UnionRegion.single(intersect(S, sets.domain))


def acc_invariance_safe_region(params: AccParams = AccParams(), dt: float = 0.1,
                               margin: Optional[float] = None) -> UnionRegion:
    """
    Safe region handed to the invariant-set iteration: no headway cap, and
    the headway rows tightened by the intersample margin at dt.
    """
    margin = acc_intersample_margin(params, dt) if margin is None else margin
    return acc_safe_region(params, h_cap=np.inf, margin=margin)


def acc_unsafe_region(params: AccParams = AccParams(), h_cap: Optional[float] = None,
                      margin: Optional[float] = None) -> UnionRegion:
    """Complement of the safe region inside [v] × [0, h_cap] × [v_L], kept `margin` away from it."""
    h_cap = tolerances.h_cap if h_cap is None else h_cap
    p = params
    domain = Polytope.from_box([p.v_min, 0.0, p.v_L_min], [p.v_max, h_cap, p.v_L_max])
    safe = acc_safe_region(params, h_cap).parts[0]
    return complement_within(safe, domain, margin)


def lk_safe_region(params: LkParams = LkParams()) -> UnionRegion:
    """The X_LK box."""
    lo, hi = params.domain_bounds()
    return UnionRegion.single(Polytope.from_box(lo, hi))


def lk_unsafe_region(params: LkParams = LkParams(), domain_scale: float = 2.0,
                     margin: Optional[float] = None) -> UnionRegion:
    """Complement of X_LK inside the box scaled by `domain_scale`."""
    lo, hi = params.domain_bounds()
    domain = Polytope.from_box(lo * domain_scale, hi * domain_scale)
    return complement_within(lk_safe_region(params).parts[0], domain, margin)


@dataclass_json
@dataclass
class ViolationReport:
    """
    Per-spec verdicts (True = violated) and first violating control step.
    Specs of the other case study stay None.
    """
    phi_acc_1: Optional[bool] = None
    phi_acc_2: Optional[bool] = None
    phi_acc_3: Optional[bool] = None
    phi_acc: Optional[bool] = None
    phi_lk_1: Optional[bool] = None
    phi_lk: Optional[bool] = None
    first_acc_1: Optional[int] = None
    first_acc_2: Optional[int] = None
    first_acc_3: Optional[int] = None
    first_acc: Optional[int] = None
    first_lk_1: Optional[int] = None
    first_lk: Optional[int] = None

    def violated(self, spec: str) -> bool:
        value = getattr(self, spec, None)
        if value is None:
            raise KeyError(f"Report carries no verdict for {spec}")
        return bool(value)

    def first_step(self, spec: str) -> Optional[int]:
        return getattr(self, "first_" + spec[len("phi_"):])

    def verdicts(self) -> Dict[str, bool]:
        return {name: bool(getattr(self, name)) for name in ACC_SPECS + LK_SPECS
                if getattr(self, name) is not None}


def _first(mask: np.ndarray, substeps: int) -> Optional[int]:
    hits = np.nonzero(mask)[0]
    return int(hits[0] // substeps) if hits.size else None


def _earliest(*steps: Optional[int]) -> Optional[int]:
    present = [s for s in steps if s is not None]
    return min(present) if present else None


def monitor_acc(tr: Trajectory, params: AccParams = AccParams(), tol: Optional[float] = None) -> ViolationReport:
    """
    Evaluate the ACC specs on every substep state and every applied input.

    φ¹: v·ω_min <= h; φ²: h >= h_min; φ³: h >= 0; φ: applied input within the
    comfort bounds and state in S ∩ X_ACC.
    """
    tol = tolerances.monitor_tol if tol is None else tol
    p = params
    X = tr.substates
    v, h, v_L = X[:, 0], X[:, 1], X[:, 2]

    time_headway = v * p.omega_min - h > tol
    distance = h < p.h_min - tol
    crash = h < -tol
    out_of_domain = (v < p.v_min - tol) | (v > p.v_max + tol) | (v_L < p.v_L_min - tol) | (v_L > p.v_L_max + tol)
    state_bad = time_headway | distance | out_of_domain

    u = tr.u[:, 0] if tr.n_steps else np.zeros(0)
    input_bad = (u < p.F_wc_min - tol) | (u > p.F_wc_max + tol)
    first_input = int(np.nonzero(input_bad)[0][0]) if np.any(input_bad) else None

    first_1 = _first(time_headway, tr.substeps)
    first_2 = _first(distance, tr.substeps)
    first_3 = _first(crash, tr.substeps)
    first_all = _earliest(_first(state_bad, tr.substeps), first_input)
    return ViolationReport(
        phi_acc_1=first_1 is not None, phi_acc_2=first_2 is not None,
        phi_acc_3=first_3 is not None, phi_acc=first_all is not None,
        first_acc_1=first_1, first_acc_2=first_2, first_acc_3=first_3, first_acc=first_all,
    )


def monitor_lk(tr: Trajectory, params: LkParams = LkParams(), tol: Optional[float] = None) -> ViolationReport:
    """φ_LK¹: |y| <= y_max; φ_LK: state in X_LK; both on every substep state."""
    tol = tolerances.monitor_tol if tol is None else tol
    lo, hi = params.domain_bounds()
    X = tr.substates
    lateral = np.abs(X[:, 0]) > params.y_max + tol
    outside = np.any((X < lo - tol) | (X > hi + tol), axis=1)
    first_1 = _first(lateral, tr.substeps)
    first_all = _first(outside, tr.substeps)
    return ViolationReport(phi_lk_1=first_1 is not None, phi_lk=first_all is not None,
                           first_lk_1=first_1, first_lk=first_all)


def monitor(tr: Trajectory, case_study: str, acc_params: AccParams = AccParams(),
            lk_params: LkParams = LkParams()) -> ViolationReport:
    if case_study == "ACC":
        return monitor_acc(tr, acc_params)
    if case_study == "LK":
        return monitor_lk(tr, lk_params)
    raise ValueError(f"Unknown case study: {case_study}")


def spec_names(case_study: str) -> Tuple[str, ...]:
    return ACC_SPECS if case_study == "ACC" else LK_SPECS

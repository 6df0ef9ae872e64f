"""
Falsification campaigns
Cached synthesis, initial condition sampling, the controller × scheme × location
episode matrix, falsification rates and the command line entry point
"""

import argparse
import csv
import hashlib
import io
import json
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from dataclasses_json import dataclass_json
from pydantic import ValidationError
from tqdm import tqdm

from config import CampaignConfig, PolyfalsifyError, SchemeSpec, configure_logging, grid_shape, tolerances
from controllers import CONTROLLER_TABLE, build_controller
from plant import (
    AccParams,
    AccPlant,
    LkParams,
    LkPlant,
    StepRecord,
    Trajectory,
    acc_invariance_system,
    acc_linear_system,
    lk_linear_system,
    simulate,
)
from polytope import UnionRegion, regions_intersect
from sampling import InitialConditionSet, Provenance, SampleGrid, ScaleMode, ShiftMode, sample_boundary, sample_interior
from set_cache import SetCache, content_hash
from specs import (
    ViolationReport,
    acc_invariance_safe_region,
    acc_safe_region,
    acc_unsafe_region,
    lk_safe_region,
    lk_unsafe_region,
    monitor,
    spec_names,
)
from strategy import (
    DisturbanceScheme,
    DualGameScheme,
    Ellipsoid,
    EllipsoidPlusDualScheme,
    LkBangBangScheme,
    MaxBrakeScheme,
    RandomScheme,
    TrackVdesScheme,
    ZeroScheme,
    lj_ellipsoid,
)
from synthesis import (
    DualWinningSets,
    InvariantResult,
    LinearSystem,
    SupervisorMap,
    dual_winning,
    max_invariant_set,
    supervisor_map,
)

logger = structlog.get_logger(__name__)

VERBS = ("synthesize", "sample", "run", "demo-supervise", "report")


# ---------------------------------------------------------------------------
# Synthesis stage
# ---------------------------------------------------------------------------

@dataclass
class CaseArtifacts:
    """
    Everything a campaign synthesizes once and shares across episodes.

    `sys` is the model the schemes predict with; `inv_sys` is the model
    S_inv and its supervisor are synthesized against.
    """
    case_study: str
    sys: LinearSystem
    dual_sys: LinearSystem
    safe: UnionRegion
    unsafe: UnionRegion
    invariant: InvariantResult
    inv_sys: Optional[LinearSystem] = None
    dual: Optional[DualWinningSets] = None
    ellipsoid: Optional[Ellipsoid] = None
    hashes: Dict[str, str] = field(default_factory=dict)

    @property
    def S_inv(self) -> UnionRegion:
        return self.invariant.S_inv

    @property
    def invariance_system(self) -> LinearSystem:
        return self.inv_sys if self.inv_sys is not None else self.sys


@dataclass(frozen=True)
class CaseModels:
    """Systems and regions of one case study."""
    sys: LinearSystem
    dual_sys: LinearSystem
    inv_sys: LinearSystem
    safe: UnionRegion
    inv_safe: UnionRegion
    unsafe: UnionRegion


def acc_params_for(cfg: CampaignConfig) -> AccParams:
    return AccParams(omega_des=cfg.synthesis.omega_des, h_cap=tolerances.h_cap)


def case_models(cfg: CampaignConfig) -> CaseModels:
    """Prediction, dual-game and invariance systems with the safe, invariance-target and unsafe regions."""
    syn = cfg.synthesis
    if cfg.case_study == "ACC":
        params = acc_params_for(cfg)
        sys_ = acc_linear_system(params, cfg.dt, syn.linearize_v, tolerances.h_cap)
        return CaseModels(
            sys=sys_, dual_sys=sys_, inv_sys=acc_invariance_system(params, cfg.dt),
            safe=acc_safe_region(params),
            inv_safe=acc_invariance_safe_region(params, cfg.dt, syn.intersample_margin),
            unsafe=acc_unsafe_region(params))

    params = LkParams()
    sys_ = lk_linear_system(params, cfg.dt, syn.r_d_bound)
    dual_sys = lk_linear_system(params, cfg.dt, syn.r_d_bound, syn.dual_domain_scale)
    safe = lk_safe_region(params)
    return CaseModels(sys=sys_, dual_sys=dual_sys, inv_sys=sys_, safe=safe, inv_safe=safe,
                      unsafe=lk_unsafe_region(params, syn.dual_domain_scale))


def _needs(cfg: CampaignConfig, *kinds: str) -> bool:
    return any(scheme.kind in kinds for scheme in cfg.schemes)


def _cached(cache: Optional[SetCache], key: Dict, compute: Callable, load: Callable, kind: str):
    if cache is not None:
        data = cache.get(key)
        if data is not None:
            logger.info("✅ Loaded cached artifact", kind=kind)
            return load(data)
    result = compute()
    if cache is not None:
        cache.set(key, result.to_dict(), kind)
    return result


def synthesize(cfg: CampaignConfig, cache: Optional[SetCache] = None) -> CaseArtifacts:
    """
    Compute (or load) the invariant set, and the dual winning sets and
    ellipsoid when a configured scheme uses them.
    """
    models = case_models(cfg)
    syn = cfg.synthesis
    tol = tolerances.as_dict()

    invariant = _cached(
        cache,
        {"artifact": "invariant", "system": models.inv_sys.content_hash(), "safe": models.inv_safe.to_list(),
         "max_iter": syn.max_iter, "tolerances": tol},
        lambda: max_invariant_set(models.inv_safe, models.inv_sys, syn.max_iter),
        InvariantResult.from_dict, "invariant")
    if len(invariant.S_inv) == 0:
        logger.warning("⚠️ Invariant set is empty; no initial conditions can be sampled")
    if not invariant.converged:
        logger.warning("⚠️ Invariant set did not converge; supervision will be refused",
                       iterations=invariant.iterations)

    artifacts = CaseArtifacts(cfg.case_study, models.sys, models.dual_sys, models.safe, models.unsafe,
                              invariant, inv_sys=models.inv_sys)
    artifacts.hashes = {
        "system": models.sys.content_hash(),
        "dual_system": models.dual_sys.content_hash(),
        "invariance_system": models.inv_sys.content_hash(),
        "invariant": content_hash(invariant.to_dict()),
    }
    dual_sys, unsafe, safe = models.dual_sys, models.unsafe, models.safe

    if _needs(cfg, "dual_game", "ellipsoid_plus_dual"):
        artifacts.dual = _cached(
            cache,
            {"artifact": "dual", "system": dual_sys.content_hash(), "unsafe": unsafe.to_list(),
             "n_steps": syn.n_steps, "tolerances": tol},
            lambda: dual_winning(unsafe, dual_sys, syn.n_steps),
            DualWinningSets.from_dict, "dual")
        artifacts.hashes["dual"] = content_hash(artifacts.dual.to_dict())
        if len(invariant.S_inv) and regions_intersect(invariant.S_inv, artifacts.dual.union):
            logger.warning("⚠️ Invariant set and dual winning union overlap")

    if _needs(cfg, "ellipsoid_plus_dual"):
        artifacts.ellipsoid = _cached(
            cache,
            {"artifact": "ellipsoid", "safe": safe.to_list(), "eps": syn.ellipsoid_eps},
            lambda: lj_ellipsoid(safe.parts[0], syn.ellipsoid_eps),
            Ellipsoid.from_dict, "ellipsoid")
        artifacts.hashes["ellipsoid"] = content_hash(artifacts.ellipsoid.to_dict())

    logger.info("✅ Synthesis stage finished", case_study=cfg.case_study,
                invariant_parts=len(invariant.S_inv), iterations=invariant.iterations,
                converged=invariant.converged)
    return artifacts


def write_sets(artifacts: CaseArtifacts, out_dir: Path) -> None:
    """sets/*.json: the synthesized artifacts with their hashes."""
    sets_dir = Path(out_dir) / "sets"
    sets_dir.mkdir(parents=True, exist_ok=True)
    documents = {
        "invariant": artifacts.invariant.to_dict(),
        "safe": {"parts": artifacts.safe.to_list(), "dim": artifacts.safe.dim},
        "unsafe": {"parts": artifacts.unsafe.to_list(), "dim": artifacts.unsafe.dim},
    }
    if artifacts.dual is not None:
        documents["dual"] = artifacts.dual.to_dict()
    if artifacts.ellipsoid is not None:
        documents["ellipsoid"] = artifacts.ellipsoid.to_dict()
    for name, document in documents.items():
        document = dict(document, hashes=artifacts.hashes, tolerances=tolerances.as_dict())
        with open(sets_dir / f"{name}.json", "w", encoding="utf-8") as f:
            json.dump(document, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Sampling stage
# ---------------------------------------------------------------------------

def _restrict_to_close_lead(points: InitialConditionSet, params: AccParams) -> InitialConditionSet:
    """Keep states with the lead car close: h < v_des·ω_des."""
    if len(points) == 0:
        return points
    keep = points.points[:, 1] < params.v_des * params.omega_des
    return InitialConditionSet(points.points[keep], points.provenance, dict(points.params))


def sample_initial_conditions(cfg: CampaignConfig, artifacts: CaseArtifacts) -> Dict[str, InitialConditionSet]:
    """Boundary and interior initial conditions of S_inv, keyed by location."""
    S = artifacts.S_inv
    n = artifacts.sys.n_x
    if len(S) == 0:
        return {loc: InitialConditionSet(np.zeros((0, n)), Provenance(loc)) for loc in cfg.locations}

    samp = cfg.sampling
    params = acc_params_for(cfg)
    hi = None
    if cfg.case_study == "ACC":
        hi = [np.inf, params.v_des * params.omega_des, np.inf]
    grid = SampleGrid.for_region(S, grid_shape(cfg, n), samp.slice_dim, hi=hi)
    boundary = sample_boundary(S, grid)
    if cfg.case_study == "ACC":
        boundary = _restrict_to_close_lead(boundary, params)

    result: Dict[str, InitialConditionSet] = {}
    for location in cfg.locations:
        if location == "boundary":
            result[location] = boundary.subsample(samp.max_samples)
            continue
        if samp.interior_mode == "shift":
            mode = ShiftMode(samp.shift)
        else:
            mode = ScaleMode(samp.scale, samp.scale_center)
        interior = sample_interior(boundary, S, mode)
        if cfg.case_study == "ACC":
            interior = _restrict_to_close_lead(interior, params)
        result[location] = interior.subsample(samp.max_samples)

    logger.info("✅ Initial conditions sampled", **{loc: len(s) for loc, s in result.items()})
    return result


def write_initial_conditions(samples: Dict[str, InitialConditionSet], out_dir: Path,
                             names: Sequence[str]) -> None:
    """initial_conditions.csv holding every location, in location order."""
    path = Path(out_dir) / "initial_conditions.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(names) + ["provenance"])
        for location, points in samples.items():
            for point in points:
                writer.writerow([repr(float(v)) for v in point] + [location])


# ---------------------------------------------------------------------------
# Episode stage
# ---------------------------------------------------------------------------

def make_scheme(spec: SchemeSpec, index: int, cfg: CampaignConfig, artifacts: CaseArtifacts) -> DisturbanceScheme:
    """Instantiate the disturbance scheme named by `spec`."""
    D = artifacts.sys.D
    if spec.kind == "zero":
        return ZeroScheme(D)
    if spec.kind == "dual_game":
        return DualGameScheme(artifacts.dual_sys, artifacts.dual)
    if spec.kind == "ellipsoid_plus_dual":
        return EllipsoidPlusDualScheme(artifacts.sys, artifacts.ellipsoid, artifacts.dual)
    if spec.kind == "max_brake":
        return MaxBrakeScheme(D, cfg.dt, acc_params_for(cfg))
    if spec.kind == "track_vdes":
        return TrackVdesScheme(D, spec.k_lead, acc_params_for(cfg))
    if spec.kind == "lk_bang_bang":
        predictor = lk_linear_system(LkParams(), spec.tau or cfg.dt, cfg.synthesis.r_d_bound)
        return LkBangBangScheme(predictor)
    return RandomScheme(D, cfg.seed, index)


@dataclass(frozen=True)
class EpisodeTask:
    controller: str
    scheme_index: int
    location: str
    sample: int
    x0: Tuple[float, ...]


@dataclass_json
@dataclass
class EpisodeResult:
    """Verdicts of one episode; `report` is None when the episode could not run."""
    controller: str
    scheme: str
    location: str
    sample: int
    x0: List[float]
    report: Optional[ViolationReport] = None
    steps: int = 0
    overrides: int = 0
    supervision_failures: List[int] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str, str, int]:
        return (self.controller, self.scheme, self.location, self.sample)


class EpisodeContext:
    """Per-process controllers and schemes, built on first use."""

    def __init__(self, cfg: CampaignConfig, artifacts: CaseArtifacts):
        self.cfg = cfg
        self.artifacts = artifacts
        self.acc_params = acc_params_for(cfg)
        self.lk_params = LkParams()
        self.plant = AccPlant(self.acc_params) if cfg.case_study == "ACC" else LkPlant(self.lk_params)
        self._controllers = {}
        self._schemes = {}

    def controller(self, name: str):
        if name not in self._controllers:
            syn = self.cfg.synthesis
            self._controllers[name] = build_controller(
                name, self.cfg.dt, self.acc_params, self.lk_params, syn.linearize_v, syn.pole_domain)
        return self._controllers[name]

    def scheme(self, index: int) -> DisturbanceScheme:
        if index not in self._schemes:
            self._schemes[index] = make_scheme(self.cfg.schemes[index], index, self.cfg, self.artifacts)
        return self._schemes[index]

    def simulate(self, controller: str, scheme_index: int, x0, sample: int,
                 supervisor: Optional[SupervisorMap] = None) -> Trajectory:
        cfg = self.cfg
        return simulate(x0, self.plant, self.controller(controller), self.scheme(scheme_index),
                        supervisor, cfg.horizon, cfg.dt, cfg.substeps, sample)

    def run(self, task: EpisodeTask) -> Tuple[EpisodeResult, Optional[Trajectory]]:
        scheme_name = self.cfg.schemes[task.scheme_index].name
        result = EpisodeResult(task.controller, scheme_name, task.location, task.sample, list(task.x0))
        try:
            tr = self.simulate(task.controller, task.scheme_index, np.array(task.x0), task.sample)
        except Exception as e:
            logger.error(f"❌ Episode failed: {e}", controller=task.controller, scheme=scheme_name,
                         sample=task.sample)
            result.error = str(e)
            return result, None

        result.report = monitor(tr, self.cfg.case_study, self.acc_params, self.lk_params)
        result.steps = tr.n_steps
        result.overrides = tr.overrides
        result.supervision_failures = list(tr.supervision_failures)
        result.error = tr.failure
        keep = self.cfg.output.persist_trajectories == "full"
        return result, (tr if keep else None)


_CONTEXT: Optional[EpisodeContext] = None


def _init_worker(cfg: CampaignConfig, artifacts: CaseArtifacts, log_level: str) -> None:
    global _CONTEXT
    configure_logging(log_level)
    _CONTEXT = EpisodeContext(cfg, artifacts)


def _run_task(task: EpisodeTask) -> Tuple[EpisodeResult, Optional[Trajectory]]:
    return _CONTEXT.run(task)


def build_tasks(cfg: CampaignConfig, samples: Dict[str, InitialConditionSet]) -> List[EpisodeTask]:
    """Every (controller, scheme, location, x0) cell; sample numbers are global across locations."""
    numbered = []
    offset = 0
    for location, points in samples.items():
        for i, x0 in enumerate(points):
            numbered.append((location, offset + i, tuple(float(v) for v in x0)))
        offset += len(points)

    return [EpisodeTask(controller, scheme_index, location, sample, x0)
            for controller in cfg.controllers
            for scheme_index in range(len(cfg.schemes))
            for location, sample, x0 in numbered]


def execute(cfg: CampaignConfig, artifacts: CaseArtifacts, tasks: List[EpisodeTask],
            quiet: bool = False, log_level: str = "WARNING") -> List[Tuple[EpisodeResult, Optional[Trajectory]]]:
    """Run episodes serially or on a process pool; results keep task order."""
    global _CONTEXT
    progress = dict(total=len(tasks), disable=quiet, desc="episodes", unit="ep")
    if cfg.jobs == 1:
        _CONTEXT = EpisodeContext(cfg, artifacts)
        return [_run_task(task) for task in tqdm(tasks, **progress)]

    chunksize = max(1, len(tasks) // (cfg.jobs * 8))
    with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=_init_worker,
                             initargs=(cfg, artifacts, log_level)) as executor:
        return list(tqdm(executor.map(_run_task, tasks, chunksize=chunksize), **progress))


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------

def falsification_rate(reports: Sequence[ViolationReport], spec: str) -> float:
    """Fraction of reports violating `spec`."""
    if not reports:
        raise ValueError("Falsification rate of an empty sample set is undefined")
    return sum(report.violated(spec) for report in reports) / len(reports)


@dataclass(frozen=True)
class RateRow:
    scheme: str
    controller: str
    location: str
    spec: str
    violations: int
    samples: int
    error: str = ""

    @property
    def rate(self) -> Optional[float]:
        return self.violations / self.samples if self.samples else None


RATE_COLUMNS = ("scheme", "controller", "location", "spec", "violations", "samples", "rate", "error")


def _controller_order(name: str) -> Tuple[int, str]:
    names = list(CONTROLLER_TABLE)
    return (names.index(name) if name in names else len(names), name)


class RateTable:
    """Falsification rates per (scheme, controller, location, spec), backed by counts."""

    def __init__(self, rows: Iterable[RateRow]):
        self.rows = sorted(rows, key=lambda r: (r.scheme, r.controller, r.location, r.spec))

    @classmethod
    def from_results(cls, cfg: CampaignConfig, results: Sequence[EpisodeResult]) -> 'RateTable':
        grouped: Dict[Tuple[str, str, str], List[EpisodeResult]] = defaultdict(list)
        for result in results:
            grouped[(result.scheme, result.controller, result.location)].append(result)

        rows = []
        for scheme in cfg.schemes:
            for controller in cfg.controllers:
                for location in cfg.locations:
                    cell = grouped.get((scheme.name, controller, location), [])
                    reports = [r.report for r in cell if r.report is not None]
                    errors = [r.error for r in cell if r.error]
                    error = f"{len(errors)} failed: {errors[0]}" if errors else ""
                    for spec in spec_names(cfg.case_study):
                        violations = sum(report.violated(spec) for report in reports)
                        rows.append(RateRow(scheme.name, controller, location, spec,
                                            violations, len(reports), error))
        return cls(rows)

    def cell(self, scheme: str, controller: str, location: str, spec: str) -> RateRow:
        for row in self.rows:
            if (row.scheme, row.controller, row.location, row.spec) == (scheme, controller, location, spec):
                return row
        raise KeyError(f"No rate cell for {scheme}/{controller}/{location}/{spec}")

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(RATE_COLUMNS)
        for row in self.rows:
            rate = "" if row.rate is None else f"{row.rate:.6f}"
            writer.writerow([row.scheme, row.controller, row.location, row.spec,
                             row.violations, row.samples, rate, row.error])
        return buffer.getvalue()

    def to_csv(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path: Path) -> 'RateTable':
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            rows = [RateRow(r["scheme"], r["controller"], r["location"], r["spec"],
                            int(r["violations"]), int(r["samples"]), r["error"]) for r in reader]
        return cls(rows)

    def render(self) -> str:
        """One table per scheme: rows are controllers, columns are spec/location."""
        lines = []
        for scheme in sorted({r.scheme for r in self.rows}):
            rows = [r for r in self.rows if r.scheme == scheme]
            columns = sorted({(r.spec, r.location) for r in rows})
            controllers = sorted({r.controller for r in rows}, key=_controller_order)
            lines.append("=" * 80)
            lines.append(f"Falsification rates | scheme: {scheme}")
            lines.append("=" * 80)
            lines.append(f"{'controller':<12}" + "".join(f"{spec + '/' + loc[:3]:>16}" for spec, loc in columns))
            for controller in controllers:
                cells = []
                for spec, loc in columns:
                    row = next(r for r in rows if (r.controller, r.spec, r.location) == (controller, spec, loc))
                    cells.append(f"{'-' if row.rate is None else f'{row.rate:.2f}':>16}")
                lines.append(f"{controller:<12}" + "".join(cells))
            counts = {(r.controller, r.location): r.samples for r in rows}
            lines.append("samples: " + ", ".join(f"{c}/{l}={n}" for (c, l), n in sorted(counts.items())))
            lines.append("")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_trajectories(path: Path, results: Sequence[Tuple[EpisodeResult, Optional[Trajectory]]]) -> None:
    """One "episode" line per episode; "step" lines follow when trajectories were kept."""
    with open(path, "w", encoding="utf-8") as f:
        for result, tr in results:
            f.write(json.dumps(dict(type="episode", **result.to_dict()), sort_keys=True) + "\n")
            if tr is not None:
                tr.write_jsonl(f, type="step", controller=result.controller, scheme=result.scheme,
                               location=result.location, sample=result.sample)


def write_manifest(path: Path, cfg: CampaignConfig, artifacts: CaseArtifacts,
                   samples: Dict[str, InitialConditionSet], outputs: Dict[str, Path]) -> Dict:
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "tolerances": tolerances.as_dict(),
        "sets": artifacts.hashes,
        "invariant": {"iterations": artifacts.invariant.iterations,
                      "converged": artifacts.invariant.converged,
                      "parts": len(artifacts.S_inv)},
        "samples": {loc: {"count": len(s), "params": s.params} for loc, s in samples.items()},
        "outputs": {name: git_blob_hash(Path(p).read_bytes()) for name, p in outputs.items()},
    }
    manifest["content_hash"] = content_hash(manifest)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


@dataclass
class CampaignOutcome:
    table: RateTable
    artifacts: CaseArtifacts
    samples: Dict[str, InitialConditionSet]
    results: List[EpisodeResult]


def _state_names(cfg: CampaignConfig) -> Tuple[str, ...]:
    return AccPlant.state_names if cfg.case_study == "ACC" else LkPlant.state_names


def _open_cache(cfg: CampaignConfig, cache: Optional[SetCache]) -> Optional[SetCache]:
    if cache is not None:
        return cache
    return SetCache(cache_dir=cfg.cache_dir) if cfg.cache_dir else None


def run_campaign(cfg: CampaignConfig, cache: Optional[SetCache] = None, quiet: bool = False) -> CampaignOutcome:
    """
    Synthesize, sample, simulate every cell of the experiment matrix and
    write rates.csv, trajectories.jsonl, manifest.json and sets/*.json.

    Args:
        cfg: Validated campaign configuration
        cache: Optional artifact cache (defaults to cfg.cache_dir)
        quiet: Disable the progress bar

    Returns:
        CampaignOutcome with the rate table
    """
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = synthesize(cfg, _open_cache(cfg, cache))
    write_sets(artifacts, out)

    samples = sample_initial_conditions(cfg, artifacts)
    write_initial_conditions(samples, out, _state_names(cfg))

    tasks = build_tasks(cfg, samples)
    logger.info("🚀 Running episodes", episodes=len(tasks), jobs=cfg.jobs)
    outcomes = execute(cfg, artifacts, tasks, quiet)
    results = [result for result, _ in outcomes]

    table = RateTable.from_results(cfg, results)
    table.to_csv(out / "rates.csv")
    write_trajectories(out / "trajectories.jsonl", outcomes)
    write_manifest(out / "manifest.json", cfg, artifacts, samples,
                   {"rates.csv": out / "rates.csv", "trajectories.jsonl": out / "trajectories.jsonl"})

    failed = sum(1 for r in results if r.error)
    if failed:
        logger.warning("⚠️ Some episodes recorded failures", failed=failed)
    logger.info("✅ Campaign finished", episodes=len(results), output=str(out))
    return CampaignOutcome(table, artifacts, samples, results)


# ---------------------------------------------------------------------------
# Supervised demonstration
# ---------------------------------------------------------------------------

@dataclass
class DemoResult:
    controller: str
    scheme: str
    x0: np.ndarray
    unsupervised: Trajectory
    supervised: Trajectory
    unsupervised_report: ViolationReport
    supervised_report: ViolationReport


def _main_spec(case_study: str) -> str:
    return "phi_acc" if case_study == "ACC" else "phi_lk"


def write_demo_plot(path: Path, demo: DemoResult) -> None:
    """time vs every state, unsupervised and supervised side by side."""
    names = demo.unsupervised.state_names
    a, b = demo.unsupervised.states, demo.supervised.states
    rows = max(a.shape[0], b.shape[0])
    dt = demo.unsupervised.dt
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["time"] + [f"{n}_unsupervised" for n in names] + [f"{n}_supervised" for n in names])
        for k in range(rows):
            left = [repr(float(v)) for v in a[k]] if k < a.shape[0] else [""] * len(names)
            right = [repr(float(v)) for v in b[k]] if k < b.shape[0] else [""] * len(names)
            writer.writerow([f"{k * dt:.6g}"] + left + right)


def supervised_demo(cfg: CampaignConfig, artifacts: Optional[CaseArtifacts] = None,
                    cache: Optional[SetCache] = None) -> Optional[DemoResult]:
    """
    Find a falsifying (x0, scheme, controller) triple with x0 in S_inv and
    re-run it through the supervisor.

    Returns:
        DemoResult, or None when no configured triple falsifies
    """
    artifacts = artifacts or synthesize(cfg, _open_cache(cfg, cache))
    if len(artifacts.S_inv) == 0:
        raise PolyfalsifyError("Supervised demo needs a non-empty invariant set")
    supervisor = supervisor_map(artifacts.invariant, artifacts.invariance_system)
    samples = sample_initial_conditions(cfg, artifacts)
    candidates = [x0 for points in samples.values() for x0 in points if artifacts.S_inv.contains(x0)]
    spec = _main_spec(cfg.case_study)
    context = EpisodeContext(cfg, artifacts)

    for controller in cfg.controllers:
        for scheme_index, scheme in enumerate(cfg.schemes):
            for sample, x0 in enumerate(candidates):
                plain = context.simulate(controller, scheme_index, x0, sample)
                plain_report = monitor(plain, cfg.case_study, context.acc_params, context.lk_params)
                if not plain_report.violated(spec):
                    continue
                guarded = context.simulate(controller, scheme_index, x0, sample, supervisor)
                guarded_report = monitor(guarded, cfg.case_study, context.acc_params, context.lk_params)
                demo = DemoResult(controller, scheme.name, np.asarray(x0), plain, guarded,
                                  plain_report, guarded_report)
                _write_demo(cfg.output_path(), demo)
                logger.info("✅ Supervised demo recorded", controller=controller, scheme=scheme.name,
                            overrides=guarded.overrides,
                            supervised_violation=guarded_report.violated(spec),
                            supervision_failures=len(guarded.supervision_failures))
                return demo

    logger.warning("⚠️ No falsifying triple found for the supervised demo")
    return None


def _write_demo(out: Path, demo: DemoResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"controller": demo.controller, "scheme": demo.scheme}
    demo.unsupervised.write_jsonl(out / "demo_unsupervised.jsonl", **meta)
    demo.supervised.write_jsonl(out / "demo_supervised.jsonl", **meta)
    write_demo_plot(out / "demo_plot.csv", demo)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

_STEP_FIELDS = tuple(f.name for f in fields(StepRecord))


def remonitor(out_dir: Path) -> Tuple[int, int]:
    """
    Re-monitor persisted step records and compare against the stored verdicts.

    Returns:
        (episodes re-monitored, disagreements)
    """
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json", "r", encoding="utf-8") as f:
        config = CampaignConfig.model_validate(json.load(f)["config"])
    verdicts: Dict[Tuple, Dict] = {}
    steps: Dict[Tuple, List[StepRecord]] = defaultdict(list)
    with open(out_dir / "trajectories.jsonl", "r", encoding="utf-8") as f:
        for line in f:
            data = json.loads(line)
            key = (data["controller"], data["scheme"], data["location"], data["sample"])
            if data["type"] == "episode":
                verdicts[key] = data.get("report")
            else:
                steps[key].append(StepRecord.from_dict({k: data[k] for k in _STEP_FIELDS if k in data}))

    checked, disagreements = 0, 0
    names = _state_names(config)
    for key, records in steps.items():
        stored = verdicts.get(key)
        if stored is None:
            continue
        tr = Trajectory.from_records(records, config.dt, config.substeps, names)
        fresh = monitor(tr, config.case_study, acc_params_for(config), LkParams())
        checked += 1
        if fresh.verdicts() != ViolationReport.from_dict(stored).verdicts():
            disagreements += 1
            logger.error("❌ Re-monitored verdict differs", episode=key)
    return checked, disagreements


def report(out_dir: Path) -> str:
    """Render rates.csv and, when step records were kept, re-check them."""
    out_dir = Path(out_dir)
    table = RateTable.from_csv(out_dir / "rates.csv")
    text = table.render()
    if (out_dir / "trajectories.jsonl").exists() and (out_dir / "manifest.json").exists():
        checked, disagreements = remonitor(out_dir)
        if checked:
            status = "✅ verdicts reproduced" if disagreements == 0 else f"❌ {disagreements} verdicts differ"
            text += f"\nRe-monitored {checked} persisted trajectories: {status}\n"
    return text


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="campaign",
        description="Invariant-set based falsification campaigns for the ACC and LK case studies",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("verb", choices=VERBS, help="Campaign stage to run")
    parser.add_argument("--config", help="Campaign config (JSON)")
    parser.add_argument("--out", help="Output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="Seed for random schemes (overrides the config)")
    parser.add_argument("--jobs", type=int, help="Worker processes (overrides the config)")
    parser.add_argument("--cache", help="Artifact cache directory (overrides the config)")
    parser.add_argument("--quiet", action="store_true", help="No progress bar, warnings only")
    return parser


def _load_config(args) -> CampaignConfig:
    if not args.config:
        raise PolyfalsifyError(f"--config is required for '{args.verb}'")
    cfg = CampaignConfig.from_file(args.config)
    return cfg.with_overrides(seed=args.seed, out=args.out, jobs=args.jobs, cache=args.cache)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    if args.quiet:
        configure_logging("WARNING")

    try:
        if args.verb == "report":
            out_dir = Path(args.out) if args.out else _load_config(args).output_path()
            print(report(out_dir))
            return 0

        cfg = _load_config(args)
        out = cfg.output_path()
        if args.verb == "synthesize":
            artifacts = synthesize(cfg, _open_cache(cfg, None))
            write_sets(artifacts, out)
            print(f"✅ Sets written to {out / 'sets'}")
        elif args.verb == "sample":
            artifacts = synthesize(cfg, _open_cache(cfg, None))
            samples = sample_initial_conditions(cfg, artifacts)
            out.mkdir(parents=True, exist_ok=True)
            write_initial_conditions(samples, out, _state_names(cfg))
            print(f"✅ {sum(len(s) for s in samples.values())} initial conditions written to {out}")
        elif args.verb == "run":
            outcome = run_campaign(cfg, quiet=args.quiet)
            print(outcome.table.render())
        else:
            demo = supervised_demo(cfg)
            if demo is None:
                print("⚠️ No falsifying triple found")
                return 1
            print(f"✅ Demo written to {out} ({demo.controller}, {demo.scheme}, "
                  f"{demo.supervised.overrides} overrides)")
        return 0
    except (ValidationError, PolyfalsifyError, ValueError, OSError) as e:
        logger.error(f"❌ {args.verb} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

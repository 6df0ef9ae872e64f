"""Configuration management for the falsification toolkit."""

import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

# Load environment variables
load_dotenv()


class PolyfalsifyError(Exception):
    """Base class for all toolkit errors."""


def _env_float(name: str, default: float) -> float:
    """Read a float environment variable, falling back to a default."""
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"Environment variable {name} must be a number, got {raw!r}")


def configure_logging(level: Optional[str] = None) -> None:
    """Configure structlog console output.

    Args:
        level: Log level name; defaults to POLYFALSIFY_LOG_LEVEL or INFO
    """
    level_name = (level or os.getenv("POLYFALSIFY_LOG_LEVEL", "INFO")).upper()
    numeric = getattr(logging, level_name, None)
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level: {level_name}")

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical tolerances shared by the geometry and synthesis layers."""
    tol_feas: float = 1e-7
    tol_facet: float = 1e-6
    tol_dedup: float = 1e-8
    tol_opt: float = 1e-8
    monitor_tol: float = 1e-9
    unsafe_margin: float = 1e-5
    h_cap: float = 200.0

    @classmethod
    def from_env(cls) -> 'ToleranceConfig':
        """Create tolerances from environment variables."""
        config = cls(
            tol_feas=_env_float('POLYFALSIFY_TOL_FEAS', cls.tol_feas),
            tol_facet=_env_float('POLYFALSIFY_TOL_FACET', cls.tol_facet),
            tol_dedup=_env_float('POLYFALSIFY_TOL_DEDUP', cls.tol_dedup),
            tol_opt=_env_float('POLYFALSIFY_TOL_OPT', cls.tol_opt),
            monitor_tol=_env_float('POLYFALSIFY_MONITOR_TOL', cls.monitor_tol),
            unsafe_margin=_env_float('POLYFALSIFY_UNSAFE_MARGIN', cls.unsafe_margin),
            h_cap=_env_float('POLYFALSIFY_H_CAP', cls.h_cap),
        )
        for name in ("tol_feas", "tol_facet", "tol_dedup", "tol_opt", "h_cap"):
            if getattr(config, name) <= 0:
                raise ValueError(f"Tolerance {name} must be positive")
        return config

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SolverSettings:
    """OSQP settings for every QP in the toolkit."""
    eps_abs: float = 1e-9
    eps_rel: float = 1e-9
    max_iter: int = 20000
    polish: bool = True

    @classmethod
    def from_env(cls) -> 'SolverSettings':
        """Create solver settings from environment variables."""
        max_iter = os.getenv('POLYFALSIFY_QP_MAX_ITER')
        return cls(
            eps_abs=_env_float('POLYFALSIFY_QP_EPS_ABS', cls.eps_abs),
            eps_rel=_env_float('POLYFALSIFY_QP_EPS_REL', cls.eps_rel),
            max_iter=int(max_iter) if max_iter else cls.max_iter,
        )


# ---------------------------------------------------------------------------
# Campaign configuration schema (see docs/campaign-config.md)
# ---------------------------------------------------------------------------

SchemeKind = Literal[
    "zero", "dual_game", "ellipsoid_plus_dual", "max_brake",
    "track_vdes", "lk_bang_bang", "random",
]


_SCHEME_CASES = {"max_brake": ("ACC",), "track_vdes": ("ACC",), "lk_bang_bang": ("LK",)}


class SchemeSpec(BaseModel):
    """One disturbance scheme entry of a campaign."""
    kind: SchemeKind
    label: Optional[str] = None
    k_lead: float = Field(default=1.0, gt=0)
    tau: Optional[float] = Field(default=None, gt=0)

    @property
    def name(self) -> str:
        return self.label or self.kind


class SamplingConfig(BaseModel):
    """Boundary grid and interior sample construction."""
    grid_counts: List[int] = Field(default_factory=lambda: [20, 20])
    slice_dim: Optional[int] = None
    interior_mode: Literal["shift", "scale"] = "shift"
    shift: List[float] = Field(default_factory=lambda: [0.0, 5.0, 0.0])
    scale: float = Field(default=0.8, gt=0, lt=1)
    scale_center: Optional[List[float]] = None
    max_samples: Optional[int] = Field(default=None, gt=0)

    @field_validator("grid_counts")
    @classmethod
    def _counts_positive(cls, counts: List[int]) -> List[int]:
        if not counts or any(c < 1 for c in counts):
            raise ValueError("grid_counts must be a non-empty list of positive integers")
        return counts


class SynthesisConfig(BaseModel):
    """Fixed-point and dual-game parameters."""
    max_iter: int = Field(default=400, ge=0)
    n_steps: int = Field(default=50, ge=0)
    ellipsoid_eps: float = Field(default=1e-3, gt=0)
    dual_domain_scale: float = Field(default=2.0, gt=1)
    linearize_v: float = 20.0
    intersample_margin: Optional[float] = Field(default=None, ge=0)
    omega_des: float = Field(default=2.0, gt=0)
    r_d_bound: float = Field(default=0.087, gt=0)
    pole_domain: Literal["discrete", "continuous"] = "discrete"


class OutputConfig(BaseModel):
    """What a campaign writes to disk."""
    directory: str = "out"
    persist_trajectories: Literal["verdicts", "full"] = "verdicts"


class CampaignConfig(BaseModel):
    """Declarative experiment matrix for one case study."""
    case_study: Literal["ACC", "LK"]
    controllers: List[str]
    schemes: List[SchemeSpec]
    locations: List[Literal["interior", "boundary"]] = Field(
        default_factory=lambda: ["interior", "boundary"])
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    horizon: int = Field(default=300, gt=0)
    dt: float = Field(default=0.1, gt=0)
    substeps: int = Field(default=10, gt=0)
    seed: int = Field(default=0, ge=0)
    jobs: int = Field(default=1, ge=1)
    cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _names_resolvable(self) -> 'CampaignConfig':
        # Imported lazily: controllers imports this module.
        from controllers import CONTROLLER_TABLE

        for name in self.controllers:
            if name not in CONTROLLER_TABLE:
                raise ValueError(f"Unknown controller variant: {name}")
            if not name.endswith(f"_{self.case_study}#" + name.split("#")[-1]):
                raise ValueError(f"Controller {name} does not belong to case study {self.case_study}")
        if not self.schemes:
            raise ValueError("At least one disturbance scheme is required")
        for scheme in self.schemes:
            if self.case_study not in _SCHEME_CASES.get(scheme.kind, ("ACC", "LK")):
                raise ValueError(f"Scheme {scheme.kind} does not apply to case study {self.case_study}")
        labels = [scheme.name for scheme in self.schemes]
        if len(set(labels)) != len(labels):
            raise ValueError("Scheme labels must be unique")
        return self

    @classmethod
    def from_file(cls, path: str) -> 'CampaignConfig':
        """Load and validate a campaign config from a JSON file."""
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        return cls.model_validate(data)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       jobs: Optional[int] = None, cache: Optional[str] = None) -> 'CampaignConfig':
        """Apply CLI flag overrides and return a new config."""
        update = {}
        if seed is not None:
            update["seed"] = seed
        if jobs is not None:
            update["jobs"] = jobs
        if cache is not None:
            update["cache_dir"] = cache
        config = self.model_copy(update=update)
        if out is not None:
            config = config.model_copy(update={"output": config.output.model_copy(update={"directory": out})})
        return config

    def output_path(self) -> Path:
        return Path(self.output.directory)


def grid_shape(cfg: CampaignConfig, dim: int) -> Tuple[int, ...]:
    """Grid counts for a state of dimension `dim`, broadcasting a single count."""
    counts = cfg.sampling.grid_counts
    if len(counts) == 1:
        return tuple(counts * (dim - 1))
    if len(counts) != dim - 1:
        raise ValueError(f"grid_counts needs {dim - 1} entries for a {dim}-D state, got {len(counts)}")
    return tuple(counts)


# Global config instances
configure_logging()
tolerances = ToleranceConfig.from_env()
solver_settings = SolverSettings.from_env()

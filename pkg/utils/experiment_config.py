"""
Experiment configuration
Line-based settings file with [section] headers and key = value lines,
validated section by section with pydantic models.
"""
import hashlib
import os
from typing import Literal

import pydantic
from pydantic import BaseModel, ConfigDict, Field

import config
from utils.errors import StorageError, ValidationError
from utils.geometry import GeometrySpec
from utils.grid import RegularGrid
from utils.logger_setup import setup_logger
from utils.normal_operator import CutoffSpec, NormalOpConfig, WeightSpec
from utils.phantoms import build_phantom

logger = setup_logger()

Point = tuple[float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometrySection(_Section):
    metric: str = config.METRIC
    metric_eps: float = config.METRIC_EPS
    center: Point = config.DOMAIN_CENTER
    radius_M: float = config.RADIUS_M
    radius_Mprime: float = config.RADIUS_MPRIME
    foliation: str = "radial"
    foliation_center: Point = config.FOLIATION_CENTER
    offset: float = config.LAYER_OFFSET
    trace_step: float = Field(config.TRACE_STEP, gt=0)
    certificate_samples: int = Field(config.CERTIFICATE_SAMPLES, ge=1000)
    certificate_epsilon: float = Field(config.CERTIFICATE_EPSILON, gt=0)


class PhantomSection(_Section):
    kind: str = config.PHANTOM_KIND
    center: Point = config.PHANTOM_CENTER
    width: float = Field(config.PHANTOM_WIDTH, gt=0)
    amplitude: float = config.PHANTOM_AMPLITUDE
    radius: float = Field(config.PHANTOM_RADIUS, gt=0)
    separation: float = Field(config.PHANTOM_SEPARATION, ge=0)


class NormalOpSection(_Section):
    h: float = config.H
    variant: str = config.WEIGHT_VARIANT
    cutoff_lambda: float = config.CUTOFF_LAMBDA
    cutoff_profile: str = config.CUTOFF_PROFILE
    cutoff_shift: float = config.CUTOFF_SHIFT
    alpha_matched: bool = config.ALPHA_MATCHED
    n_lambda: int = config.N_LAMBDA
    n_omega: int = config.N_OMEGA
    t_step: float = config.OPERATOR_T_STEP
    damping_check: bool = True
    damping_tolerance: float = config.DAMPING_TOLERANCE


class SolverSection(_Section):
    grid_n: int = Field(config.GRID_N, ge=5)
    tol: float = Field(config.SOLVER_TOL, gt=0)
    max_iter: int = Field(config.SOLVER_MAX_ITER, ge=1)
    restart: int = Field(config.SOLVER_RESTART, ge=1)
    balance: float = Field(config.SOLVER_BALANCE, ge=0, le=1)
    basis: Literal["cubic", "trilinear"] = config.SOLVER_BASIS


class SweepSection(_Section):
    h_values: tuple[float, ...] = config.H_VALUES
    symbol_radii: tuple[float, ...] = config.SYMBOL_RADII
    symbol_directions: int = Field(config.SYMBOL_DIRECTIONS, ge=1)
    probe_xi: float = config.PROBE_XI
    probe_eta: tuple[float, float] = config.PROBE_ETA
    ellipticity_margin: float = Field(config.ELLIPTICITY_MARGIN, gt=0)
    stability_phantoms: int = Field(config.STABILITY_PHANTOMS, ge=2)
    stability_seed: int = config.STABILITY_SEED


class OutputSection(_Section):
    root: str = config.OUTPUT_ROOT
    input: str = ""


SECTIONS = {
    "geometry": GeometrySection,
    "phantom": PhantomSection,
    "normal_op": NormalOpSection,
    "solver": SolverSection,
    "sweep": SweepSection,
    "output": OutputSection,
}


def _coerce(text):
    """Comma lists become float tuples and true/false become booleans"""
    value = text.strip()
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    if "," in value:
        try:
            return tuple(float(item) for item in value.split(",") if item.strip())
        except ValueError:
            raise ValidationError(f"Cannot read '{value}' as a list of numbers")
    return value


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    geometry: GeometrySection = GeometrySection()
    phantom: PhantomSection = PhantomSection()
    normal_op: NormalOpSection = NormalOpSection()
    solver: SolverSection = SolverSection()
    sweep: SweepSection = SweepSection()
    output: OutputSection = OutputSection()

    @classmethod
    def from_values(cls, values):
        """Build from {section: {key: raw value}}; pydantic errors become ValidationError"""
        unknown = sorted(set(values) - set(SECTIONS))
        if unknown:
            raise ValidationError(f"Unknown config section(s): {', '.join(unknown)}")
        try:
            return cls(**{name: SECTIONS[name](**keys) for name, keys in values.items()})
        except pydantic.ValidationError as e:
            raise ValidationError(f"Invalid configuration: {e}") from e

    @classmethod
    def parse(cls, text, overrides=()):
        """
        Parse the settings text, then apply section.key=value overrides

        Args:
            text: Config file contents
            overrides: Iterable of "section.key=value" strings

        Returns:
            ExperimentConfig
        """
        values = {}
        section = None
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                values.setdefault(section, {})
                continue
            if "=" not in line:
                raise ValidationError(f"Line {number}: expected key = value, got '{raw.strip()}'")
            if section is None:
                raise ValidationError(f"Line {number}: key outside of any [section]")
            key, value = line.split("=", 1)
            values[section][key.strip()] = _coerce(value)

        for override in overrides:
            if "=" not in override or "." not in override.split("=", 1)[0]:
                raise ValidationError(f"Override '{override}' is not section.key=value")
            path, value = override.split("=", 1)
            name, key = path.strip().split(".", 1)
            values.setdefault(name, {})[key.strip()] = _coerce(value)
        return cls.from_values(values)

    @classmethod
    def load(cls, path=None, overrides=()):
        text = ""
        if path:
            if not os.path.exists(path):
                raise StorageError(f"Config file not found: {path}")
            try:
                with open(path, "r", encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise StorageError(f"Cannot read config {path}: {e}") from e
            logger.info(f"Loaded config from {path}")
        return cls.parse(text, overrides)

    def to_text(self):
        """Resolved config, reparseable by parse()"""
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in getattr(self, name).model_dump().items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self, length=12):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:length]

    # ------------------------------------------------------------- builders

    def build_geometry(self):
        g = self.geometry
        return GeometrySpec(
            metric_id=g.metric,
            metric_eps=g.metric_eps,
            center=g.center,
            radius_M=g.radius_M,
            radius_Mprime=g.radius_Mprime,
            foliation_id=g.foliation,
            foliation_center=g.foliation_center,
            offset=g.offset,
        )

    def build_phantom(self, geometry=None):
        p = self.phantom
        return build_phantom(
            p.kind,
            p.center,
            p.width,
            p.amplitude,
            p.radius,
            p.separation,
            geometry=geometry or self.build_geometry(),
        )

    def build_op_config(self, workers=1):
        n = self.normal_op
        cutoff = CutoffSpec(
            Lambda=n.cutoff_lambda,
            profile=n.cutoff_profile,
            shift=n.cutoff_shift,
            alpha_matched=n.alpha_matched,
        )
        return NormalOpConfig(
            h=n.h,
            cutoff=cutoff,
            weight=WeightSpec(n.variant),
            n_lambda=n.n_lambda,
            n_omega=n.n_omega,
            t_step=n.t_step,
            damping_check=n.damping_check,
            damping_tolerance=n.damping_tolerance,
            workers=workers,
        )

    def build_grid(self, geometry=None):
        return RegularGrid.covering(geometry or self.build_geometry(), self.solver.grid_n)


def resolve_workers(flag=None):
    """--workers flag, then FOLXRAY_WORKERS, then the default"""
    if flag is not None:
        workers = flag
    elif os.environ.get(config.WORKERS_ENV):
        try:
            workers = int(os.environ[config.WORKERS_ENV])
        except ValueError:
            raise ValidationError(
                f"{config.WORKERS_ENV} must be an integer, got '{os.environ[config.WORKERS_ENV]}'"
            )
    else:
        workers = config.DEFAULT_WORKERS
    if workers < 1:
        raise ValidationError(f"Worker count must be at least 1, got {workers}")
    return workers

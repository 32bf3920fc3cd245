# model_core.py - Shared domain types, configuration schema and errors
import json
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.integrate import trapezoid

logger = logging.getLogger(__name__)

# Group velocity (cell lengths per μs) reached at retrieve_coupling = 1
REFERENCE_GROUP_VELOCITY = 1.0
MIN_SPATIAL_POINTS = 64


# ---------- errors ----------

class SimulationError(Exception):
    """Base class for every error raised by the simulator"""


class ConfigError(SimulationError, ValueError):
    """Configuration violates one or more bounds"""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {p}" for p in self.problems))


class GrowthOverflowError(SimulationError):
    pass


class GridResolutionError(SimulationError):
    pass


class RetrievalError(SimulationError):
    pass


class SolverError(SimulationError):
    """Retrieval PDE solver failed (step size or blow-up)"""

    def __init__(self, message, suggested_dt=None):
        self.suggested_dt = suggested_dt
        if suggested_dt is not None:
            message = f"{message} (suggested dt <= {suggested_dt:.3e} us)"
        super().__init__(message)


class DetectionError(SimulationError):
    pass


class InsufficientDataError(SimulationError):
    pass


class DeconvolutionError(SimulationError):
    pass


class OracleError(SimulationError):
    pass


class CalibrationError(SimulationError):
    """Targets cannot be met; `best` holds the closest StatsSummary reached, if any"""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


# ---------- configuration ----------

CouplingSpec = Union[float, tuple[tuple[float, float], ...]]


class ExperimentConfig(BaseModel):
    """Every physical and detection parameter of one protocol run.

    Times are in μs, rates in μs⁻¹, space is normalized to the cell length.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    optical_depth: float = Field(20.0, gt=0)
    single_atom_rate: float = Field(0.0115, ge=0)
    write_duration: float = Field(1.6, ge=0)
    mode_count: int = Field(4, ge=1)
    decoherence_rate: float = Field(1.0 / 3.0, ge=0)
    delay: float = Field(0.0, ge=0)
    retrieve_coupling: CouplingSpec = 0.13
    cell_length: float = 1.0
    stokes_efficiency: float = Field(0.45, ge=0, le=1)
    antistokes_efficiency: float = Field(0.37, ge=0, le=1)
    stokes_background: float = Field(0.26, ge=0)
    antistokes_background: float = Field(0.16, ge=0)
    dead_time: float = Field(0.0, ge=0)
    rng_seed: int = Field(20050101, ge=0, lt=2**64)
    excited_state_decay: float = Field(18.0, gt=0)
    spatial_points: int = Field(256, ge=MIN_SPATIAL_POINTS)
    retrieve_duration: float = Field(20.0, gt=0)
    retrieval_model: Literal["finite_depth", "ideal"] = "finite_depth"
    afterpulsing: bool = False

    @field_validator("cell_length")
    @classmethod
    def _unit_cell(cls, value):
        if value != 1.0:
            raise ValueError("space is normalized; cell_length must be 1")
        return value

    @field_validator("retrieve_coupling")
    @classmethod
    def _coupling(cls, value):
        if isinstance(value, tuple):
            if not value:
                raise ValueError("piecewise coupling needs at least one step")
            starts = [s for s, _ in value]
            if starts[0] != 0.0:
                raise ValueError("first coupling step must start at t=0")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError("coupling step start times must increase")
            for s, k in value:
                if not (math.isfinite(s) and math.isfinite(k)) or k < 0:
                    raise ValueError("coupling multipliers must be finite and >= 0")
            if all(k == 0 for _, k in value):
                raise ValueError("coupling is zero everywhere")
            return value
        if value <= 0:
            raise ValueError("coupling must be > 0")
        return value

    def coupling_steps(self):
        """Coupling as a tuple of (t_start, multiplier) steps"""
        if isinstance(self.retrieve_coupling, tuple):
            return self.retrieve_coupling
        return ((0.0, float(self.retrieve_coupling)),)

    def to_json(self):
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


class ValidatedConfig(ExperimentConfig):
    """ExperimentConfig with invariants checked and derived rates attached"""

    xi: float
    reference_group_velocity: float

    def experiment_config(self):
        return ExperimentConfig(**self.model_dump(exclude={"xi", "reference_group_velocity"}))

    def replace(self, **changes):
        """Copy with some experiment fields changed, re-validated"""
        data = self.experiment_config().model_dump()
        data.update(changes)
        return validate(data)


def _format_errors(exc: ValidationError):
    problems = []
    for err in exc.errors():
        name = ".".join(str(part) for part in err["loc"]) or "config"
        problems.append(f"{name}: {err['msg']}")
    return problems


def validate(config) -> ValidatedConfig:
    """
    Check every invariant of a configuration and precompute derived quantities.

    Args:
        config: ExperimentConfig, ValidatedConfig or a plain dict of fields

    Returns:
        ValidatedConfig with xi (collective rate) and reference group velocity

    Raises:
        ConfigError listing every violated field
    """
    if isinstance(config, ValidatedConfig):
        config = config.experiment_config()
    try:
        if isinstance(config, ExperimentConfig):
            base = config
        else:
            base = ExperimentConfig.model_validate(dict(config))
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    data = base.model_dump()
    data["xi"] = base.optical_depth * base.single_atom_rate
    data["reference_group_velocity"] = REFERENCE_GROUP_VELOCITY
    return ValidatedConfig.model_validate(data)


def load_config(path) -> ValidatedConfig:
    """Read a flat JSON config file; unknown keys are an error"""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a JSON object"])
    return validate(data)


# ---------- sampled profiles ----------

@dataclass(frozen=True)
class PulseProfile:
    """Photon flux (photons/μs) on a uniform grid; bin j covers [t0 + j dt, t0 + (j+1) dt)"""

    t0: float
    dt: float
    flux: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("PulseProfile.dt must be > 0")
        flux = np.asarray(self.flux, dtype=float)
        if np.any(flux < 0):
            raise ValueError("PulseProfile.flux must be nonnegative")
        object.__setattr__(self, "flux", flux)

    @property
    def total(self):
        return float(np.sum(self.flux) * self.dt)

    @property
    def duration(self):
        return self.dt * len(self.flux)

    def times(self):
        """Bin centers"""
        return self.t0 + (np.arange(len(self.flux)) + 0.5) * self.dt

    def fwhm(self):
        """Full width at half maximum, with linear interpolation between bin centers"""
        flux = self.flux
        if flux.size == 0 or flux.max() <= 0:
            return 0.0
        half = 0.5 * flux.max()
        above = np.nonzero(flux >= half)[0]
        first, last = int(above[0]), int(above[-1])
        t = self.times()
        if first == 0:
            left = self.t0
        else:
            left = np.interp(half, [flux[first - 1], flux[first]], [t[first - 1], t[first]])
        if last == len(flux) - 1:
            right = self.t0 + self.duration
        else:
            right = np.interp(half, [flux[last + 1], flux[last]], [t[last + 1], t[last]])
        return float(right - left)

    def time_to_fraction(self, fraction):
        """Time (from t0) by which `fraction` of the pulse photons have arrived"""
        cumulative = np.concatenate([[0.0], np.cumsum(self.flux) * self.dt])
        if cumulative[-1] <= 0:
            return 0.0
        edges = np.arange(len(cumulative)) * self.dt
        return float(np.interp(fraction * cumulative[-1], cumulative, edges))


@dataclass(frozen=True)
class SpinWaveProfile:
    """Flipped spins per unit length on a uniform grid over the cell z in [0, 1]"""

    z: np.ndarray
    density: np.ndarray
    total: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        density = np.asarray(self.density, dtype=float)
        if z.shape != density.shape or z.ndim != 1:
            raise ValueError("z and density must be 1-D arrays of equal length")
        if np.any(density < 0):
            raise ValueError("spin density must be nonnegative")
        integral = trapezoid(density, z)
        if abs(integral - self.total) > 1e-6 * max(abs(integral), 1e-300):
            raise ValueError("SpinWaveProfile.total disagrees with the trapezoidal integral")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "density", density)

    @classmethod
    def from_density(cls, z, density):
        density = np.asarray(density, dtype=float)
        return cls(z=np.asarray(z, dtype=float), density=density, total=float(trapezoid(density, z)))

    @classmethod
    def uniform(cls, total, points=256):
        z = np.linspace(0.0, 1.0, points)
        return cls.from_density(z, np.full(points, float(total)))

    def scaled(self, factor):
        return SpinWaveProfile(z=self.z, density=self.density * factor, total=self.total * factor)


# ---------- counts and summaries ----------

COUNT_FIELDS = ("true_stokes", "true_spin", "retrieved", "s1", "s2", "as1", "as2")


@dataclass(frozen=True)
class CountRecord:
    """One trial's latent photon numbers and detector counts"""

    true_stokes: int
    true_spin: int
    retrieved: int
    s1: int
    s2: int
    as1: int
    as2: int

    @property
    def stokes(self):
        return self.s1 + self.s2

    @property
    def antistokes(self):
        return self.as1 + self.as2


class Estimate(BaseModel):
    """An estimator value with its jackknife standard error"""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    value: float
    stderr: float
    trials: int = 0
    low_statistics: bool = False


class StatsSummary(BaseModel):
    """Every estimator reported for one batch (or one exact distribution)"""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    mean_s: float
    mean_as: float
    mean_s_stderr: float = 0.0
    mean_as_stderr: float = 0.0
    psn_meas: float
    psn_meas_stderr: float = 0.0
    psn_th: float
    v_norm: float = Field(ge=0)
    v_stderr: float
    g2_by_ns: dict[int, Estimate] = {}
    mean_as_by_ns: dict[int, Estimate] = {}
    q_by_ns: dict[int, Estimate] = {}
    # d<n_AS | n_S>/d n_S by weighted least squares
    mean_as_slope: Optional[Estimate] = None
    # anti-Stokes number and Q at n_S = 2 with loss and background removed
    corrected_mean_as: Optional[Estimate] = None
    corrected_q: Optional[Estimate] = None
    zeta: Optional[float] = None
    trials: Optional[int] = None

    @model_validator(mode="after")
    def _psn_consistent(self):
        if self.psn_th != self.mean_s + self.mean_as:
            raise ValueError("psn_th must equal mean_s + mean_as")
        return self

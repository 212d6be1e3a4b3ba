"""Pydantic models for vessel geometry, rheology, boundary conditions and filter settings."""

from __future__ import annotations

import math
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Immutable model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class ScenarioKind(str, Enum):
    """Which inlet parameter the twin experiment tries to recover."""
    CONSTANT = "constant"
    TIME_DEPENDENT = "time_dependent"
    TIME_SPACE_DEPENDENT = "time_space_dependent"


class InletKind(str, Enum):
    """Shape of the prescribed inlet velocity."""
    CONSTANT = "constant"
    TIME_SERIES = "time_series"
    PARABOLIC = "parabolic"


class RheologyKind(str, Enum):
    """Viscosity law."""
    NEWTONIAN = "newtonian"
    CASSON = "casson"


class PoissonMethod(str, Enum):
    """Pressure Poisson solver backend."""
    DIRECT = "direct"
    SOR = "sor"


class VesselShape(StrictModel):
    """Axis-aligned trunk with a centred flow divider running to the outlet edge."""
    total_length: float = Field(default=0.08, gt=0, description="Domain length L along x (m)")
    total_height: float = Field(default=0.016, gt=0, description="Domain height H along y (m)")
    trunk_length: float = Field(default=0.03, gt=0, description="Length of the undivided trunk (m)")
    splitter_length: float = Field(default=0.05, ge=0, description="Length of the divider block (m)")
    splitter_thickness: float = Field(default=0.004, ge=0, description="Thickness of the divider block (m)")

    @model_validator(mode="after")
    def _check_shape(self) -> "VesselShape":
        if self.splitter_thickness >= self.total_height:
            raise ValueError("splitter_thickness must be smaller than total_height")
        if self.trunk_length + self.splitter_length > self.total_length * (1 + 1e-12):
            raise ValueError("trunk_length + splitter_length exceeds total_length")
        return self

    @property
    def has_splitter(self) -> bool:
        return self.splitter_length > 0 and self.splitter_thickness > 0

    @property
    def splitter_x_range(self) -> tuple[float, float]:
        return self.trunk_length, self.trunk_length + self.splitter_length

    @property
    def splitter_y_range(self) -> tuple[float, float]:
        half = 0.5 * self.splitter_thickness
        mid = 0.5 * self.total_height
        return mid - half, mid + half

    @property
    def analytic_area(self) -> float:
        area = self.total_length * self.total_height
        if self.has_splitter:
            area -= self.splitter_length * self.splitter_thickness
        return area

    @property
    def perimeter(self) -> float:
        extra = 2.0 * self.splitter_length if self.has_splitter else 0.0
        return 2.0 * (self.total_length + self.total_height) + extra


class GridResolution(StrictModel):
    """Cell counts of a uniform Cartesian grid."""
    nx: int = Field(ge=2, description="Cells along x")
    ny: int = Field(ge=2, description="Cells along y")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny


class FluidModel(StrictModel):
    """Blood rheology: constant viscosity or Casson shear thinning."""
    kind: RheologyKind = Field(default=RheologyKind.NEWTONIAN, description="Viscosity law")
    density: float = Field(default=1060.0, gt=0, description="Blood density rho (kg/m^3)")
    mu: float = Field(default=0.0035, gt=0, description="Newtonian dynamic viscosity (Pa.s)")
    tau0: float = Field(default=0.005, gt=0, description="Casson yield stress (Pa)")
    mu_inf: float = Field(default=0.0035, gt=0, description="Casson high-shear viscosity (Pa.s)")
    gamma_min: float = Field(default=1e-3, gt=0, description="Shear-rate floor for the Casson law (1/s)")
    mu_max: float = Field(default=0.035, gt=0, description="Viscosity cap applied inside the explicit solver (Pa.s)")


class CardiacWaveform(StrictModel):
    """Gaussian systolic bump on a diastolic plateau, periodic in time."""
    period: float = Field(default=1.0, gt=0, description="Cardiac period T (s)")
    base: float = Field(default=0.05, gt=0, description="Diastolic plateau (m/s)")
    amplitude: float = Field(default=0.25, ge=0, description="Systolic bump height (m/s)")
    width: float = Field(default=0.09, gt=0, description="Bump width in units of t/T")
    peak_phase: float = Field(default=0.24, ge=0, lt=1, description="Peak systole phase t/T")

    def at(self, t):
        """Evaluate the waveform at time(s) t."""
        phase = np.mod(np.asarray(t, dtype=float) / self.period, 1.0)
        value = self.base + self.amplitude * np.exp(-(((phase - self.peak_phase) / self.width) ** 2))
        return float(value) if np.ndim(value) == 0 else value


class InletSpec(StrictModel):
    """Prescribed inlet velocity; the unknown input of the twin experiment."""
    kind: InletKind = Field(default=InletKind.CONSTANT, description="Inlet parameterization")
    value: Optional[float] = Field(default=None, description="Constant amplitude (m/s)")
    samples: Optional[list[tuple[float, float]]] = Field(
        default=None, description="(t, amplitude) pairs, linearly interpolated"
    )
    waveform: Optional[CardiacWaveform] = Field(default=None, description="Analytic amplitude in time")
    half_height: Optional[float] = Field(
        default=None, gt=0, description="Channel half-height R of the parabolic profile (m); defaults to H/2"
    )

    @model_validator(mode="after")
    def _check_kind(self) -> "InletSpec":
        sources = sum(x is not None for x in (self.value, self.samples, self.waveform))
        if sources != 1:
            raise ValueError("exactly one of value, samples or waveform must be given")
        if self.kind == InletKind.CONSTANT:
            if self.value is None:
                raise ValueError("constant inlet requires value")
            if not math.isfinite(self.value) or self.value < 0:
                raise ValueError("constant inlet value must be finite and >= 0")
        if self.kind == InletKind.TIME_SERIES and self.value is not None:
            raise ValueError("time_series inlet requires samples or waveform")
        if self.samples is not None:
            times = [t for t, _ in self.samples]
            if len(times) < 1 or any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("inlet sample times must be strictly increasing")
            if not all(math.isfinite(v) for _, v in self.samples):
                raise ValueError("inlet samples must be finite")
        return self

    def amplitude(self, t: float) -> float:
        """Uniform velocity or V_max at time t."""
        if self.waveform is not None:
            return self.waveform.at(t)
        if self.samples is not None:
            times, values = zip(*self.samples)
            return float(np.interp(t, times, values))
        return float(self.value)

    def profile(self, y: np.ndarray, t: float, height: float) -> np.ndarray:
        """Velocity at inlet face centres y for a channel of the given height."""
        amp = self.amplitude(t)
        y = np.asarray(y, dtype=float)
        if self.kind != InletKind.PARABOLIC:
            return np.full(y.shape, amp)
        half = self.half_height or 0.5 * height
        r = y - 0.5 * height
        return amp * np.clip(1.0 - (r / half) ** 2, 0.0, None)

    def with_amplitude(self, amplitude: float) -> "InletSpec":
        """Same profile shape frozen at a given amplitude (no validation: members may go negative)."""
        kind = InletKind.PARABOLIC if self.kind == InletKind.PARABOLIC else InletKind.CONSTANT
        return self.model_copy(update={"kind": kind, "value": float(amplitude), "samples": None, "waveform": None})


class OutletSpec(StrictModel):
    """Reference pressure applied to both outlets."""
    value: Optional[float] = Field(default=0.0, description="Constant outlet pressure (Pa)")
    samples: Optional[list[tuple[float, float]]] = Field(default=None, description="(t, Pa) pairs")

    @model_validator(mode="after")
    def _check(self) -> "OutletSpec":
        if self.samples is not None:
            if not all(math.isfinite(p) for _, p in self.samples):
                raise ValueError("outlet pressures must be finite")
            times = [t for t, _ in self.samples]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("outlet sample times must be strictly increasing")
        elif self.value is None or not math.isfinite(self.value):
            raise ValueError("outlet pressure must be finite")
        return self

    def pressure(self, t: float) -> float:
        if self.samples is not None:
            times, values = zip(*self.samples)
            return float(np.interp(t, times, values))
        return float(self.value)


class PriorSpec(StrictModel):
    """Gaussian priors of the initial state and the inlet parameter."""
    state_mean: float = Field(default=0.01, description="T0, applied to every state entry")
    state_variance: float = Field(default=1e-10, ge=0, description="sigma_T")
    param_mean: float = Field(default=0.015, description="Prior parameter mean (m/s)")
    param_variance: float = Field(default=4e-6, ge=0, description="kappa")


class NoiseSpec(StrictModel):
    """Diagonal process (Q) and measurement (R) noise variances."""
    process_variance: float = Field(default=1e-8, ge=0, description="Q_k diagonal entry")
    measurement_variance: float = Field(default=1e-10, ge=0, description="R_k diagonal entry")


class UpdateConfig(StrictModel):
    """Measurement-update settings."""
    beta_iterations: int = Field(default=1, ge=1, description="Update iterations per observation")
    jitter: float = Field(default=1e-12, ge=0, description="Variance added to the diagonal of P^y")
    constraint_enabled: bool = Field(default=True, description="Clamp parameters around the stabilization mean")
    constraint_band: tuple[float, float] = Field(default=(0.8, 1.2), description="Lower/upper multipliers")

    @field_validator("constraint_band")
    @classmethod
    def _check_band(cls, band: tuple[float, float]) -> tuple[float, float]:
        lower, upper = band
        if not (0 < lower <= 1 <= upper):
            raise ValueError("constraint_band must satisfy 0 < lower <= 1 <= upper")
        return band


class Hyperparameters(StrictModel):
    """Filter and timing settings of one scenario."""
    n_members: int = Field(default=80, ge=2, description="Ensemble size S_n")
    dt: float = Field(default=0.01, gt=0, description="Filter time step (s)")
    t_final: float = Field(default=1.0, gt=0, description="Simulated time (s)")
    observation_span: int = Field(default=2, ge=1, description="Steps between measurement updates")
    prior: PriorSpec = Field(default_factory=PriorSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    update: UpdateConfig = Field(default_factory=UpdateConfig)

    @model_validator(mode="after")
    def _check_steps(self) -> "Hyperparameters":
        ratio = self.t_final / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("t_final / dt must be an integer step count")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


class Scenario(StrictModel):
    """One twin experiment: the true inlet plus filter hyperparameters."""
    kind: ScenarioKind
    true_inlet: InletSpec
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    outlet: OutletSpec = Field(default_factory=OutletSpec)

    @property
    def dt(self) -> float:
        return self.hyperparameters.dt

    @property
    def t_final(self) -> float:
        return self.hyperparameters.t_final

    @property
    def observation_span(self) -> int:
        return self.hyperparameters.observation_span

    @property
    def n_steps(self) -> int:
        return self.hyperparameters.n_steps


class SensorConfig(StrictModel):
    """Sensor placement request."""
    fraction: float = Field(default=0.05, gt=0, lt=1, description="Share of fluid cells observed")
    count: Optional[int] = Field(default=27, ge=1, description="Explicit sensor count override")
    near_divider_quota: float = Field(default=0.2, ge=0, le=1, description="Share placed near the divider")
    near_divider_radius: int = Field(default=5, ge=1, description="Near-divider radius in cells")


class Seeds(StrictModel):
    """Random seeds split by role."""
    truth: int = Field(default=0, ge=0)
    noise: int = Field(default=1, ge=0)
    ensemble: int = Field(default=2, ge=0)


class RunConfig(StrictModel):
    """Everything one CLI run needs."""
    scenario: ScenarioKind = Field(default=ScenarioKind.CONSTANT)
    vessel: VesselShape = Field(default_factory=VesselShape)
    coarse: GridResolution = Field(default_factory=lambda: GridResolution(nx=72, ny=8))
    fine: GridResolution = Field(default_factory=lambda: GridResolution(nx=288, ny=32))
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    true_inlet: Optional[InletSpec] = Field(default=None, description="Override of the scenario's true inlet")
    outlet: OutletSpec = Field(default_factory=OutletSpec)
    forward_fluid: FluidModel = Field(default_factory=FluidModel)
    truth_fluid: FluidModel = Field(default_factory=lambda: FluidModel(kind=RheologyKind.CASSON))
    sensors: SensorConfig = Field(default_factory=SensorConfig)
    seeds: Seeds = Field(default_factory=Seeds)
    output_dir: str = Field(default="runs/default")
    threads: int = Field(default=1, ge=1)
    poisson: PoissonMethod = Field(default=PoissonMethod.DIRECT)
    export_ensembles: bool = Field(default=False)
    export_ensemble_states: bool = Field(default=False, description="Add the flow-state columns to the ensemble CSVs")
    export_fields: bool = Field(default=True)

    @model_validator(mode="after")
    def _check_resolutions(self) -> "RunConfig":
        if self.fine.nx < self.coarse.nx or self.fine.ny < self.coarse.ny or self.fine.n_cells <= self.coarse.n_cells:
            raise ValueError("fine resolution must refine the coarse resolution")
        if self.fine.nx % self.coarse.nx or self.fine.ny % self.coarse.ny:
            raise ValueError("fine resolution must be an integer refinement of the coarse resolution")
        return self

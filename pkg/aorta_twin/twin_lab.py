"""Twin experiments: fine-mesh Casson truth, noisy sensors, coarse-mesh assimilation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import logfire
import numpy as np

from .assimilation_manager import AssimilationManager, StepListener
from .ensisf import EnsembleLayout, JointEnsemble, ObservationOperator, confidence_bounds, init_ensemble
from .flow_solver import (
    FlowState,
    SubstepListener,
    advance,
    cell_velocities,
    initial_state,
    time_averaged_wss,
    wall_shear_stress,
)
from .errors import TruthMismatchError
from .geometry import Mesh, SensorSet, nearest_fluid_cell, restrict_to_coarse, stabilization_cells
from .metrics import ErrorReport, confidence_band, error_report, mean_relative_error, sensor_rmse
from .models import (
    CardiacWaveform,
    FluidModel,
    InletKind,
    InletSpec,
    OutletSpec,
    PoissonMethod,
    RheologyKind,
    RunConfig,
    Scenario,
    ScenarioKind,
)
from .random_streams import Stream, keyed_normal

logger = logging.getLogger(__name__)

PROBE_POINT = (0.035147, 0.007069)
KEY_PHASES = (0.24, 0.4, 0.6, 0.74, 0.96)
PEAK_SYSTOLE = 0.24
CONSTANT_TRUE_VALUE = 0.02


def cardiac_waveform(t, T: float = 1.0, waveform: CardiacWaveform | None = None):
    """Inlet velocity (m/s) of the periodic systolic pulse at time(s) t."""
    shape = waveform or CardiacWaveform()
    return shape.model_copy(update={"period": T}).at(t)


def parabolic_inlet(vmax: float, r, R_half: float):
    """Fully developed profile vmax * (1 - (r / R_half)^2)."""
    r = np.asarray(r, dtype=float)
    if np.any(np.abs(r) > R_half * (1 + 1e-12)):
        raise ValueError(f"|r| must not exceed the half-height {R_half}")
    value = vmax * (1.0 - (r / R_half) ** 2)
    return float(value) if np.ndim(value) == 0 else value


def default_true_inlet(kind: ScenarioKind) -> InletSpec:
    if kind == ScenarioKind.CONSTANT:
        return InletSpec(kind=InletKind.CONSTANT, value=CONSTANT_TRUE_VALUE)
    if kind == ScenarioKind.TIME_DEPENDENT:
        return InletSpec(kind=InletKind.TIME_SERIES, waveform=CardiacWaveform())
    return InletSpec(kind=InletKind.PARABOLIC, waveform=CardiacWaveform())


def build_scenario(config: RunConfig) -> Scenario:
    return Scenario(
        kind=config.scenario,
        true_inlet=config.true_inlet or default_true_inlet(config.scenario),
        hyperparameters=config.hyperparameters,
        outlet=config.outlet,
    )


def probe_cell(mesh: Mesh) -> int:
    """Fluid cell nearest the fixed probe point."""
    return nearest_fluid_cell(mesh, *PROBE_POINT)


def cycle_period(scenario: Scenario) -> float:
    waveform = scenario.true_inlet.waveform
    return waveform.period if waveform is not None else scenario.t_final


def key_phase_steps(scenario: Scenario) -> dict[int, float]:
    """Step index -> cardiac phase for the snapshot phases inside the run."""
    period = cycle_period(scenario)
    steps = {}
    for phase in KEY_PHASES:
        k = int(round(phase * period / scenario.dt))
        if k <= scenario.n_steps:
            steps[k] = phase
    return steps


def constraint_scale(inlet: InletSpec, mesh: Mesh) -> float:
    """Parameter units per unit of mean inlet velocity (V_max / mean for the parabolic profile)."""
    if inlet.kind != InletKind.PARABOLIC:
        return 1.0
    unit = inlet.with_amplitude(1.0).profile(mesh.face_y[mesh.u_inlet[0]], 0.0, mesh.height)
    return float(1.0 / np.mean(unit))


def _interleave(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.empty(2 * len(u))
    out[0::2] = u
    out[1::2] = v
    return out


@dataclass
class TruthRecord:
    """Noiseless fine-mesh truth sampled on the coarse sensors at every step."""
    times: np.ndarray
    sensor_values: np.ndarray
    stabilization_values: np.ndarray
    true_parameter: np.ndarray
    probe_values: np.ndarray
    sensors: SensorSet
    probe_cell: int
    snapshots: dict[float, FlowState] = field(default_factory=dict)
    wss_peak_mean: float = float("nan")
    wss_time_mean: float = float("nan")
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


@dataclass
class Observations:
    """Noisy sensor and stabilization measurements per step."""
    times: np.ndarray
    values: np.ndarray
    stabilization: np.ndarray
    seed: int = 0


@dataclass
class AssimilationRecord:
    """Per-step filter summaries of one assimilation run (rows k = 0 ... N)."""
    times: np.ndarray
    true_parameter: np.ndarray
    param_mean: np.ndarray
    param_lo: np.ndarray
    param_hi: np.ndarray
    observed: np.ndarray
    probe_true: np.ndarray
    probe_mean: np.ndarray
    probe_lo: np.ndarray
    probe_hi: np.ndarray
    predicted_sensors: np.ndarray
    param_members: np.ndarray
    mre: float
    report: ErrorReport
    sensor_rmse: float
    snapshots: dict[float, FlowState] = field(default_factory=dict)
    inlet_profiles: list[tuple[float, float, float, float, float, float]] = field(default_factory=list)
    ensemble_snapshots: dict[float, np.ndarray] = field(default_factory=dict)
    wss_recon_peak_mean: float = float("nan")
    wss_recon_time_mean: float = float("nan")
    observation_span: int = 1


@dataclass
class OpenLoopRecord:
    """Forward model run at the prior parameter mean without any update."""
    predicted_sensors: np.ndarray
    sensor_rmse: float


def _sample_truth(
    state: FlowState, fine_mesh: Mesh, coarse_mesh: Mesh, sensors: SensorSet, probe: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uc, vc = cell_velocities(state, fine_mesh)
    p = fine_mesh.from_grid(state.p)
    sensor_cells = sensors.sensor_cells
    u_s = restrict_to_coarse(uc, fine_mesh, coarse_mesh, sensor_cells)
    v_s = restrict_to_coarse(vc, fine_mesh, coarse_mesh, sensor_cells)
    stab_cells = sensors.stabilization_cells
    stab = np.column_stack([
        restrict_to_coarse(uc, fine_mesh, coarse_mesh, stab_cells),
        restrict_to_coarse(vc, fine_mesh, coarse_mesh, stab_cells),
    ])
    probe_vals = np.array([
        restrict_to_coarse(field_, fine_mesh, coarse_mesh, [probe])[0] for field_ in (uc, vc, p)
    ])
    return _interleave(u_s, v_s), stab, probe_vals


@logfire.instrument("generate_truth", extract_args=False)
def generate_truth(
    scenario: Scenario,
    fine_mesh: Mesh,
    sensors: SensorSet,
    seed: int,
    coarse_mesh: Mesh,
    fluid: FluidModel | None = None,
    poisson: PoissonMethod = PoissonMethod.DIRECT,
    listener: SubstepListener | None = None,
) -> TruthRecord:
    """Step the fine-mesh solver from rest over [0, T] and sample the coarse sensors.

    Args:
        scenario: Twin experiment with the true inlet
        fine_mesh: High-resolution mesh of the vessel
        sensors: Sensor and stabilization cells on the coarse mesh
        seed: Stored with the record (the truth run itself is deterministic)
        coarse_mesh: Mesh the sensors refer to
        fluid: Truth rheology (Casson by default)
        poisson: Pressure solver backend
        listener: Called after every solver sub-step

    Returns:
        The TruthRecord
    """
    fluid = fluid or FluidModel(kind=RheologyKind.CASSON)
    if fine_mesh.n_fluid <= coarse_mesh.n_fluid:
        logger.warning("Truth mesh is not finer than the forward-model mesh")
    n_steps, dt = scenario.n_steps, scenario.dt
    inlet, outlet = scenario.true_inlet, scenario.outlet
    probe = probe_cell(coarse_mesh)
    snapshot_steps = key_phase_steps(scenario)

    logger.info("=" * 50)
    logger.info(
        f"Generating truth: {scenario.kind.value}, {fine_mesh.nx}x{fine_mesh.ny} mesh, "
        f"{fluid.kind.value} rheology, {n_steps} steps of {dt} s"
    )

    state = initial_state(fine_mesh, inlet, 0.0)
    times = np.arange(n_steps + 1) * dt
    sensor_values, stab_values, probe_values, wss_samples = [], [], [], []
    snapshots: dict[float, FlowState] = {}
    wss_peak = float("nan")
    for k in range(n_steps + 1):
        if k > 0:
            state = advance(state, dt, fine_mesh, fluid, inlet, outlet, stages=2, poisson=poisson, listener=listener)
        s, stab, pr = _sample_truth(state, fine_mesh, coarse_mesh, sensors, probe)
        sensor_values.append(s)
        stab_values.append(stab)
        probe_values.append(pr)
        if k > 0:
            wss_samples.append(wall_shear_stress(state, fine_mesh, fluid))
        if k in snapshot_steps:
            snapshots[snapshot_steps[k]] = state
            if snapshot_steps[k] == PEAK_SYSTOLE:
                wss_peak = float(np.mean(np.abs(wall_shear_stress(state, fine_mesh, fluid))))
        if k % 10 == 0:
            logger.debug(f"Truth step {k}/{n_steps}: max speed {state.max_speed():.4f} m/s")

    wss_time = float(np.mean(np.abs(time_averaged_wss(wss_samples)))) if wss_samples else float("nan")
    logger.info(f"Truth generated: {len(snapshots)} snapshots, peak-systole mean |WSS| {wss_peak:.4g} Pa")
    return TruthRecord(
        times=times,
        sensor_values=np.array(sensor_values),
        stabilization_values=np.array(stab_values),
        true_parameter=np.array([inlet.amplitude(t) for t in times]),
        probe_values=np.array(probe_values),
        sensors=sensors,
        probe_cell=probe,
        snapshots=snapshots,
        wss_peak_mean=wss_peak,
        wss_time_mean=wss_time,
        seed=seed,
    )


def check_truth_mesh(truth: TruthRecord, coarse_mesh: Mesh) -> None:
    """Raise TruthMismatchError unless the truth sensor layout was selected on this coarse mesh."""
    sensors = truth.sensors
    if sensors.stabilization_cells != stabilization_cells(coarse_mesh):
        raise TruthMismatchError(
            f"truth has {len(sensors.stabilization_cells)} stabilization cells, "
            f"the coarse mesh has {len(stabilization_cells(coarse_mesh))}"
        )
    if max(sensors.sensor_cells, default=-1) >= coarse_mesh.n_fluid or truth.probe_cell != probe_cell(coarse_mesh):
        raise TruthMismatchError(f"truth sensor cells do not fit a coarse mesh of {coarse_mesh.n_fluid} fluid cells")


def make_observations(truth: TruthRecord, noise, seed: int) -> Observations:
    """Add N(0, R) noise to the truth sensor and stabilization values, keyed per step."""
    variance = noise.measurement_variance
    values = np.array([
        row + keyed_normal(seed, Stream.OBSERVATION, row.shape, variance, step=k)
        for k, row in enumerate(truth.sensor_values)
    ])
    stabilization = np.array([
        row + keyed_normal(seed, Stream.OBSERVATION, row.shape, variance, step=k, beta=1)
        for k, row in enumerate(truth.stabilization_values)
    ])
    return Observations(times=truth.times.copy(), values=values, stabilization=stabilization, seed=seed)


class FlowForwardModel:
    """Coarse-mesh solver wrapped as forward(params, state, t, dt) for the filter."""

    def __init__(
        self,
        mesh: Mesh,
        layout: EnsembleLayout,
        fluid: FluidModel,
        inlet_template: InletSpec,
        outlet: OutletSpec,
        poisson: PoissonMethod = PoissonMethod.DIRECT,
    ):
        self.mesh = mesh
        self.layout = layout
        self.fluid = fluid
        self.inlet_template = inlet_template
        self.outlet = outlet
        self.poisson = poisson

    def __call__(self, params: np.ndarray, state: np.ndarray, t: float, dt: float) -> np.ndarray:
        flow = self.layout.unpack_state(state, t)
        inlet = self.inlet_template.with_amplitude(float(params[0]))
        flow = advance(flow, dt, self.mesh, self.fluid, inlet, self.outlet, poisson=self.poisson)
        return self.layout.pack_state(flow)


def _inlet_profile_rows(
    phase: float, t: float, params: np.ndarray, inlet: InletSpec, mesh: Mesh
) -> list[tuple[float, float, float, float, float, float]]:
    """Reconstructed inlet profile (mean and band over members) next to the true one."""
    y = mesh.face_y[mesh.u_inlet[0]]
    profiles = np.array([inlet.with_amplitude(p).profile(y, t, mesh.height) for p in params])
    mean, lo, hi = confidence_bounds(profiles)
    truth = inlet.profile(y, t, mesh.height)
    return [(phase, float(y[i]), float(truth[i]), float(mean[i]), float(lo[i]), float(hi[i])) for i in range(len(y))]


@logfire.instrument("run_assimilation", extract_args=False)
def run_assimilation(
    scenario: Scenario,
    coarse_mesh: Mesh,
    observations: Observations,
    truth: TruthRecord,
    seed: int,
    fluid: FluidModel | None = None,
    poisson: PoissonMethod = PoissonMethod.DIRECT,
    n_jobs: int = 1,
    keep_ensembles: bool = False,
    listeners: Iterable[StepListener] = (),
) -> AssimilationRecord:
    """Run the coarse-mesh filter against the observations and score it against the truth.

    Args:
        scenario: Twin experiment (true inlet gives the forward-model profile shape)
        coarse_mesh: Forward-model mesh
        observations: Noisy measurements from make_observations
        truth: Truth record the observations came from
        seed: Ensemble seed
        fluid: Forward-model rheology (Newtonian by default)
        poisson: Pressure solver backend
        n_jobs: Forecast worker threads
        keep_ensembles: Keep member arrays at the key phases for export
        listeners: Extra per-step listeners

    Returns:
        The AssimilationRecord
    """
    fluid = fluid or FluidModel()
    hyper = scenario.hyperparameters
    n_steps, span = scenario.n_steps, scenario.observation_span
    if truth.n_steps != n_steps or observations.values.shape[0] != n_steps + 1:
        raise TruthMismatchError(f"truth has {truth.n_steps} steps, scenario expects {n_steps}")
    check_truth_mesh(truth, coarse_mesh)

    layout = EnsembleLayout.for_mesh(coarse_mesh)
    H = ObservationOperator.from_sensors(layout, truth.sensors.sensor_cells)
    H_probe = ObservationOperator.from_sensors(layout, [truth.probe_cell])
    forward = FlowForwardModel(coarse_mesh, layout, fluid, scenario.true_inlet, scenario.outlet, poisson)
    scale = constraint_scale(scenario.true_inlet, coarse_mesh)
    snapshot_steps = key_phase_steps(scenario)

    logger.info("=" * 50)
    logger.info(
        f"Assimilating {scenario.kind.value}: {hyper.n_members} members, span {span}, "
        f"{coarse_mesh.n_fluid} coarse cells, {truth.sensors.n_sensors} sensors"
    )
    prior = init_ensemble(hyper.prior, hyper.n_members, layout, seed)
    manager = AssimilationManager(prior, forward, H, hyper, seed, constraint_scale=scale, n_jobs=n_jobs)
    for listener in listeners:
        manager.add_listener(listener)

    param_members, probe_members, sensor_means, observed = [], [], [], []
    snapshots: dict[float, FlowState] = {}
    ensemble_snapshots: dict[float, np.ndarray] = {}
    profile_rows: list[tuple[float, float, float, float, float, float]] = []
    wss_samples: list[np.ndarray] = []
    wss_peak = float("nan")

    def record(k: int, ensemble: JointEnsemble, was_observed: bool) -> None:
        nonlocal wss_peak
        members = ensemble.members
        param_members.append(ensemble.params[:, 0].copy())
        probe_members.append(H_probe.apply(members)[:, 0])
        mean = members.mean(axis=0)
        sensor_means.append(H.apply(mean[None, :])[0])
        observed.append(was_observed)
        if k > 0:
            mean_state = layout.unpack_state(mean[layout.state], ensemble.t)
            wss_samples.append(wall_shear_stress(mean_state, coarse_mesh, fluid))
        if k in snapshot_steps:
            phase = snapshot_steps[k]
            mean_state = layout.unpack_state(mean[layout.state], ensemble.t)
            snapshots[phase] = mean_state
            profile_rows.extend(
                _inlet_profile_rows(phase, ensemble.t, ensemble.params[:, 0], scenario.true_inlet, coarse_mesh)
            )
            if keep_ensembles:
                ensemble_snapshots[phase] = members.copy()
            if phase == PEAK_SYSTOLE:
                wss_peak = float(np.mean(np.abs(wall_shear_stress(mean_state, coarse_mesh, fluid))))

    record(0, prior, False)
    for k in range(1, n_steps + 1):
        result = manager.process_step(k, observations.values[k], observations.stabilization[k])
        record(result.step, result.ensemble, result.observed)

    params = np.array(param_members)
    mean = params.mean(axis=1)
    lo, hi = confidence_band(params)
    probes = np.array(probe_members)
    probe_mean = probes.mean(axis=1)
    probe_lo, probe_hi = confidence_band(probes)
    predicted = np.array(sensor_means)

    true_param = truth.true_parameter
    report = error_report(true_param[1:], mean[1:], lo[1:], hi[1:])
    mre = mean_relative_error(true_param[1:], mean[1:])
    rmse = sensor_rmse(predicted[1:], truth.sensor_values[1:])
    logger.info(f"Assimilation finished: MRE {mre:.4f}%, coverage {report.coverage:.3f}, sensor RMSE {rmse:.4e}")

    return AssimilationRecord(
        times=truth.times.copy(),
        true_parameter=true_param.copy(),
        param_mean=mean,
        param_lo=lo,
        param_hi=hi,
        observed=np.array(observed, dtype=bool),
        probe_true=truth.probe_values[:, 0].copy(),
        probe_mean=probe_mean,
        probe_lo=probe_lo,
        probe_hi=probe_hi,
        predicted_sensors=predicted,
        param_members=params,
        mre=mre,
        report=report,
        sensor_rmse=rmse,
        snapshots=snapshots,
        inlet_profiles=profile_rows,
        ensemble_snapshots=ensemble_snapshots,
        wss_recon_peak_mean=wss_peak,
        wss_recon_time_mean=float(np.mean(np.abs(time_averaged_wss(wss_samples)))) if wss_samples else float("nan"),
        observation_span=span,
    )


@logfire.instrument("run_open_loop", extract_args=False)
def run_open_loop(
    scenario: Scenario,
    coarse_mesh: Mesh,
    truth: TruthRecord,
    fluid: FluidModel | None = None,
    poisson: PoissonMethod = PoissonMethod.DIRECT,
) -> OpenLoopRecord:
    """Forward model at the prior means, no noise and no updates, scored on the truth sensors."""
    fluid = fluid or FluidModel()
    check_truth_mesh(truth, coarse_mesh)
    hyper = scenario.hyperparameters
    layout = EnsembleLayout.for_mesh(coarse_mesh)
    H = ObservationOperator.from_sensors(layout, truth.sensors.sensor_cells)
    forward = FlowForwardModel(coarse_mesh, layout, fluid, scenario.true_inlet, scenario.outlet, poisson)

    params = np.array([hyper.prior.param_mean])
    state = np.full(layout.n_state, hyper.prior.state_mean)
    predicted = [H.apply(np.concatenate([params, state])[None, :])[0]]
    for k in range(1, scenario.n_steps + 1):
        state = forward(params, state, (k - 1) * scenario.dt, scenario.dt)
        predicted.append(H.apply(np.concatenate([params, state])[None, :])[0])
    predicted = np.array(predicted)
    rmse = sensor_rmse(predicted[1:], truth.sensor_values[1:])
    logger.info(f"Open-loop sensor RMSE {rmse:.4e}")
    return OpenLoopRecord(predicted_sensors=predicted, sensor_rmse=rmse)

import numpy as np
import pytest

from aorta_twin import twin_lab
from aorta_twin.ensisf import stabilization_mean
from aorta_twin.errors import TruthMismatchError
from aorta_twin.flow_solver import wall_shear_stress
from aorta_twin.geometry import SensorSet, select_sensors
from aorta_twin.models import (
    CardiacWaveform,
    Hyperparameters,
    InletKind,
    InletSpec,
    NoiseSpec,
    PriorSpec,
    RunConfig,
    Scenario,
    ScenarioKind,
)
from aorta_twin.twin_lab import (
    KEY_PHASES,
    TruthRecord,
    build_scenario,
    cardiac_waveform,
    check_truth_mesh,
    constraint_scale,
    default_true_inlet,
    generate_truth,
    key_phase_steps,
    make_observations,
    parabolic_inlet,
    run_assimilation,
    run_open_loop,
)


def test_cardiac_waveform_is_periodic_with_systolic_peak() -> None:
    shape = CardiacWaveform()
    t = np.linspace(0.0, 1.0, 101)
    values = cardiac_waveform(t)

    assert cardiac_waveform(0.24) == pytest.approx(shape.base + shape.amplitude)
    assert t[np.argmax(values)] == pytest.approx(0.24)
    assert cardiac_waveform(1.37) == pytest.approx(cardiac_waveform(0.37))
    assert np.all(values >= shape.base)
    assert cardiac_waveform(0.5, T=2.0) == pytest.approx(cardiac_waveform(0.25))


def test_parabolic_inlet() -> None:
    assert parabolic_inlet(0.3, 0.0, 0.008) == pytest.approx(0.3)
    assert parabolic_inlet(0.3, 0.008, 0.008) == pytest.approx(0.0)
    assert parabolic_inlet(0.3, 0.004, 0.008) == pytest.approx(0.225)
    np.testing.assert_allclose(parabolic_inlet(1.0, np.array([-0.5, 0.5]), 1.0), [0.75, 0.75])
    with pytest.raises(ValueError):
        parabolic_inlet(0.3, 0.009, 0.008)


def test_default_true_inlets_per_scenario() -> None:
    assert default_true_inlet(ScenarioKind.CONSTANT).amplitude(0.3) == pytest.approx(0.02)
    assert default_true_inlet(ScenarioKind.TIME_DEPENDENT).kind == InletKind.TIME_SERIES
    assert default_true_inlet(ScenarioKind.TIME_SPACE_DEPENDENT).kind == InletKind.PARABOLIC

    scenario = build_scenario(RunConfig(scenario=ScenarioKind.TIME_DEPENDENT))
    assert scenario.true_inlet.amplitude(0.24) == pytest.approx(0.3)


def test_key_phase_steps_over_one_cycle() -> None:
    scenario = Scenario(kind=ScenarioKind.TIME_DEPENDENT, true_inlet=default_true_inlet(ScenarioKind.TIME_DEPENDENT))
    steps = key_phase_steps(scenario)
    assert steps == {24: 0.24, 40: 0.4, 60: 0.6, 74: 0.74, 96: 0.96}
    assert sorted(steps.values()) == list(KEY_PHASES)


def test_constraint_scale(coarse_mesh) -> None:
    assert constraint_scale(InletSpec(value=0.02), coarse_mesh) == 1.0
    scale = constraint_scale(InletSpec(kind=InletKind.PARABOLIC, value=0.3), coarse_mesh)
    assert 1.4 < scale < 1.6


def _synthetic_truth(n_steps: int = 4) -> TruthRecord:
    times = np.arange(n_steps + 1) * 0.01
    return TruthRecord(
        times=times,
        sensor_values=np.tile([0.02, 0.0, 0.03, 0.001], (n_steps + 1, 1)),
        stabilization_values=np.tile([[0.02, 0.0]] * 3, (n_steps + 1, 1, 1)),
        true_parameter=np.full(n_steps + 1, 0.02),
        probe_values=np.zeros((n_steps + 1, 3)),
        sensors=SensorSet((5, 9), (0, 1, 2)),
        probe_cell=7,
    )


def test_make_observations_adds_keyed_noise() -> None:
    truth = _synthetic_truth()
    noise = NoiseSpec(measurement_variance=1e-6)

    first = make_observations(truth, noise, seed=1)
    again = make_observations(truth, noise, seed=1)
    other = make_observations(truth, noise, seed=2)

    np.testing.assert_array_equal(first.values, again.values)
    assert not np.allclose(first.values, other.values)
    assert first.values.shape == truth.sensor_values.shape
    assert first.stabilization.shape == truth.stabilization_values.shape
    assert np.max(np.abs(first.values - truth.sensor_values)) < 0.01

    exact = make_observations(truth, NoiseSpec(measurement_variance=0.0), seed=1)
    np.testing.assert_array_equal(exact.values, truth.sensor_values)


@pytest.fixture(scope="module")
def tiny_twin(small_mesh, small_fine_mesh):
    scenario = Scenario(
        kind=ScenarioKind.CONSTANT,
        true_inlet=InletSpec(value=0.02),
        hyperparameters=Hyperparameters(n_members=6, dt=0.01, t_final=0.06, observation_span=2),
    )
    sensors = select_sensors(small_mesh, 0.05, seed=0, count=6)
    truth = generate_truth(scenario, small_fine_mesh, sensors, 0, small_mesh)
    observations = make_observations(truth, scenario.hyperparameters.noise, seed=1)
    return scenario, truth, observations


def test_truth_record_shapes(tiny_twin, small_mesh) -> None:
    scenario, truth, _ = tiny_twin

    assert truth.n_steps == 6
    assert truth.sensor_values.shape == (7, 12)
    assert truth.stabilization_values.shape == (7, small_mesh.ny, 2)
    assert truth.probe_values.shape == (7, 3)
    np.testing.assert_allclose(truth.true_parameter, 0.02)
    assert set(truth.snapshots) <= set(KEY_PHASES)
    assert truth.snapshots
    assert np.all(np.isfinite(truth.sensor_values))
    assert truth.wss_time_mean > 0


def test_assimilation_record_and_constraint(tiny_twin, small_mesh) -> None:
    scenario, truth, observations = tiny_twin
    record = run_assimilation(scenario, small_mesh, observations, truth, seed=2, keep_ensembles=True)

    assert record.param_mean.shape == (7,)
    assert record.param_members.shape == (7, 6)
    assert record.observed.tolist() == [False, False, True, False, True, False, True]
    assert np.all(record.param_lo <= record.param_mean + 1e-15)
    assert np.all(record.param_mean <= record.param_hi + 1e-15)
    assert record.param_mean[0] == pytest.approx(0.015, abs=0.01)
    assert np.isfinite(record.mre)
    assert record.report.n_steps == 6
    assert record.predicted_sensors.shape == (7, 12)
    assert set(record.snapshots) == set(truth.snapshots)
    assert set(record.ensemble_snapshots) == set(truth.snapshots)
    assert record.inlet_profiles

    for k in np.flatnonzero(record.observed):
        v_bar = stabilization_mean(observations.stabilization[k])
        assert 0.8 * v_bar - 1e-12 <= record.param_mean[k] <= 1.2 * v_bar + 1e-12


def test_assimilation_is_reproducible(tiny_twin, small_mesh) -> None:
    scenario, truth, observations = tiny_twin
    a = run_assimilation(scenario, small_mesh, observations, truth, seed=2)
    b = run_assimilation(scenario, small_mesh, observations, truth, seed=2, n_jobs=2)
    np.testing.assert_array_equal(a.param_members, b.param_members)


def test_open_loop_runs_at_prior_mean(tiny_twin, small_mesh) -> None:
    scenario, truth, _ = tiny_twin
    open_loop = run_open_loop(scenario, small_mesh, truth)
    assert open_loop.predicted_sensors.shape == (7, 12)
    assert np.isfinite(open_loop.sensor_rmse)


def test_assimilation_rejects_mismatched_truth(tiny_twin, small_mesh) -> None:
    scenario, truth, observations = tiny_twin
    longer = scenario.model_copy(
        update={"hyperparameters": scenario.hyperparameters.model_copy(update={"t_final": 0.1})}
    )
    with pytest.raises(TruthMismatchError):
        run_assimilation(longer, small_mesh, observations, truth, seed=2)


def test_assimilation_rejects_truth_from_another_mesh(tiny_twin, small_fine_mesh) -> None:
    scenario, truth, observations = tiny_twin
    with pytest.raises(TruthMismatchError):
        check_truth_mesh(truth, small_fine_mesh)
    with pytest.raises(TruthMismatchError):
        run_assimilation(scenario, small_fine_mesh, observations, truth, seed=2)
    with pytest.raises(TruthMismatchError):
        run_open_loop(scenario, small_fine_mesh, truth)


def test_record_errors_abort_the_run(tiny_twin, small_mesh, monkeypatch) -> None:
    scenario, truth, observations = tiny_twin
    calls = 0

    def failing_wss(*args, **kwargs):
        nonlocal calls
        calls += 1
        if calls == 2:
            raise FloatingPointError("wall shear overflow")
        return wall_shear_stress(*args, **kwargs)

    monkeypatch.setattr(twin_lab, "wall_shear_stress", failing_wss)
    with pytest.raises(FloatingPointError):
        run_assimilation(scenario, small_mesh, observations, truth, seed=2)


def test_band_narrows_at_observation_steps(tiny_twin, small_mesh) -> None:
    scenario, truth, observations = tiny_twin
    record = run_assimilation(scenario, small_mesh, observations, truth, seed=2)
    width = record.param_hi - record.param_lo

    first = int(np.flatnonzero(record.observed)[0])
    assert width[first - 1] == pytest.approx(width[0])
    assert width[first] < width[first - 1]
    assert width[-1] < width[0]


def test_assimilation_beats_open_loop(tiny_twin, small_mesh) -> None:
    scenario, truth, observations = tiny_twin
    record = run_assimilation(scenario, small_mesh, observations, truth, seed=2)
    open_loop = run_open_loop(scenario, small_mesh, truth)
    assert open_loop.sensor_rmse > record.sensor_rmse


def test_perfect_prior_is_a_fixed_point(tiny_twin, small_mesh) -> None:
    scenario, truth, _ = tiny_twin
    exact = NoiseSpec(process_variance=0.0, measurement_variance=0.0)
    hyper = scenario.hyperparameters.model_copy(
        update={
            "noise": exact,
            "prior": PriorSpec(state_variance=0.0, param_mean=0.02, param_variance=0.0),
        }
    )
    perfect = scenario.model_copy(update={"hyperparameters": hyper})
    observations = make_observations(truth, exact, seed=1)

    record = run_assimilation(perfect, small_mesh, observations, truth, seed=2)

    np.testing.assert_array_equal(record.param_members, 0.02)
    assert record.mre == pytest.approx(0.0, abs=1e-12)


def test_observation_noise_variance_matches_r() -> None:
    n_steps, n_values, variance = 100, 54, 1e-8
    truth = _synthetic_truth(n_steps)
    truth.sensor_values = np.tile(np.linspace(0.0, 0.05, n_values), (n_steps + 1, 1))

    observations = make_observations(truth, NoiseSpec(measurement_variance=variance), seed=3)
    residual = observations.values[1:] - truth.sensor_values[1:]

    assert np.var(residual) == pytest.approx(variance, rel=0.1)
    assert abs(np.mean(residual)) < 3 * np.sqrt(variance / residual.size)

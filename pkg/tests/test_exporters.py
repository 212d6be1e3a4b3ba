import math

import numpy as np
import pytest

from aorta_twin.exporters import (
    format_value,
    metrics_lines,
    phase_label,
    read_metrics,
    write_ensemble_csv,
    write_field_vtk,
    write_metrics,
    write_probe_csv,
    write_sensors_csv,
    write_vtk,
)
from aorta_twin.flow_solver import FlowState, zero_state
from aorta_twin.geometry import SensorSet, build_vessel_mesh
from aorta_twin.metrics import ErrorReport
from aorta_twin.models import FluidModel
from aorta_twin.run_store import RunStore
from aorta_twin.twin_lab import TruthRecord


def test_format_value() -> None:
    assert format_value(0.1) == "1.0000000000000001e-01"
    assert float(format_value(1 / 3)) == 1 / 3
    assert format_value(True) == "1"
    assert format_value(np.int64(7)) == "7"
    assert format_value("sensor") == "sensor"
    assert phase_label(0.4) == "0.40"


def test_vtk_of_two_by_two_channel(tmp_path, channel_shape) -> None:
    mesh = build_vessel_mesh(channel_shape, 2, 2)
    path = write_vtk(tmp_path / "mesh.vtk", mesh, {"p": np.arange(4.0)})
    lines = path.read_text().splitlines()

    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert lines[4] == "POINTS 9 double"
    assert "CELLS 4 20" in lines
    assert "CELL_TYPES 4" in lines
    assert "CELL_DATA 4" in lines
    start = lines.index("SCALARS p double 1") + 2
    assert [float(x) for x in lines[start:start + 4]] == [0.0, 1.0, 2.0, 3.0]
    assert "SCALARS flag double 1" in lines


def test_field_vtk_carries_solution_arrays(tmp_path, small_mesh) -> None:
    path = write_field_vtk(
        tmp_path / "field.vtk", zero_state(small_mesh), small_mesh, FluidModel(), {"umag": np.ones(small_mesh.n_fluid)}
    )
    text = path.read_text()
    for name in ("flag", "u", "v", "p", "wss", "umag"):
        assert f"SCALARS {name} double 1" in text


def test_probe_and_sensor_csv_headers(tmp_path, small_mesh) -> None:
    probe = write_probe_csv(tmp_path / "probe.csv", np.array([0.0, 0.01]), 3, np.ones((2, 3)))
    assert probe.read_text().splitlines()[0] == "t,cell_index,u,v,p"
    assert probe.read_text().splitlines()[2].split(",")[1] == "3"

    sensors = write_sensors_csv(tmp_path / "sensors.csv", small_mesh, SensorSet((4, 10), (0, 1)))
    rows = sensors.read_text().splitlines()
    assert rows[0] == "cell_index,x,y,kind"
    assert [r.split(",")[-1] for r in rows[1:]] == ["sensor", "sensor", "stabilization", "stabilization"]


def test_ensemble_csv(tmp_path) -> None:
    members = np.array([[0.1, 1.0, 2.0], [0.2, 3.0, 4.0]])
    rows = write_ensemble_csv(tmp_path / "e.csv", members).read_text().splitlines()
    assert rows[0] == "member,param"
    assert len(rows) == 3

    full = write_ensemble_csv(tmp_path / "f.csv", members, include_state=True).read_text().splitlines()
    assert full[0] == "member,param,x_0,x_1"
    assert [float(v) for v in full[2].split(",")[1:]] == [0.2, 3.0, 4.0]

    two = write_ensemble_csv(tmp_path / "g.csv", members, n_params=2, include_state=True).read_text().splitlines()
    assert two[0] == "member,param_0,param_1,x_0"


def test_metrics_round_trip(tmp_path) -> None:
    report = ErrorReport(mean_relative_error=0.5, per_step_errors=[0.5], coverage=1.0, n_steps=1, n_excluded=0)
    lines = metrics_lines(report, {"wss_recon_mean_pa": float("nan"), "observation_span": 2})

    assert lines[0].startswith("mre_percent=")
    assert "wss_recon_mean_pa=nan" in lines
    assert "observation_span=2" in lines

    values = read_metrics(write_metrics(tmp_path / "metrics.txt", report, {"span_s": 0.02}))
    assert float(values["mre_percent"]) == 0.5
    assert float(values["span_s"]) == 0.02
    assert values["n_steps"] == "1"


def test_run_store_round_trip_of_truth(tmp_path, small_mesh) -> None:
    state = zero_state(small_mesh, t=0.24)
    state.u[3, 2] = 0.5
    truth = TruthRecord(
        times=np.array([0.0, 0.01]),
        sensor_values=np.arange(8.0).reshape(2, 4),
        stabilization_values=np.ones((2, small_mesh.ny, 2)),
        true_parameter=np.array([0.02, 0.02]),
        probe_values=np.zeros((2, 3)),
        sensors=SensorSet((5, 9), tuple(range(small_mesh.ny))),
        probe_cell=12,
        snapshots={0.24: state},
        wss_peak_mean=float("nan"),
        wss_time_mean=0.3,
        seed=4,
    )
    store = RunStore(tmp_path / "run")
    assert store.load_truth() is None

    store.save_truth(truth, "constant")
    loaded = store.load_truth()

    assert store.has_truth()
    assert store.truth_scenario() == "constant"
    assert loaded.sensors == truth.sensors
    assert loaded.probe_cell == 12
    assert loaded.seed == 4
    assert math.isnan(loaded.wss_peak_mean)
    assert loaded.wss_time_mean == pytest.approx(0.3)
    np.testing.assert_array_equal(loaded.sensor_values, truth.sensor_values)
    assert set(loaded.snapshots) == {0.24}
    np.testing.assert_array_equal(loaded.snapshots[0.24].u, state.u)
    assert loaded.snapshots[0.24].t == pytest.approx(0.24)


def test_run_store_writes_truth_artifacts(tmp_path, small_mesh, small_fine_mesh) -> None:
    fine_state = FlowState(
        np.full(small_fine_mesh.u_shape, 0.01),
        np.zeros(small_fine_mesh.v_shape),
        np.zeros((small_fine_mesh.nx, small_fine_mesh.ny)),
        0.24,
    )
    truth = TruthRecord(
        times=np.array([0.0]),
        sensor_values=np.zeros((1, 4)),
        stabilization_values=np.zeros((1, small_mesh.ny, 2)),
        true_parameter=np.array([0.02]),
        probe_values=np.zeros((1, 3)),
        sensors=SensorSet((5, 9), tuple(range(small_mesh.ny))),
        probe_cell=12,
        snapshots={0.24: fine_state},
    )
    store = RunStore(tmp_path)
    store.write_truth_artifacts(truth, small_mesh, small_fine_mesh, FluidModel())

    for name in ("sensors.csv", "truth_sensors.csv", "truth_probe.csv", "truth_0.24.vtk", "mesh_coarse.vtk"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "truth_sensors.csv").read_text().splitlines()[0] == "t,u_5,v_5,u_9,v_9"

    store.write_recon_vtk({0.24: zero_state(small_mesh, 0.24)}, truth.snapshots, small_mesh, small_fine_mesh, FluidModel())
    text = (tmp_path / "recon_0.24.vtk").read_text()
    assert "SCALARS umag_truth double 1" in text
    assert "SCALARS umag_abs_diff double 1" in text

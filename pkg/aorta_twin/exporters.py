"""Plot-ready outputs: legacy-VTK ASCII grids, CSV tables and metrics.txt."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .flow_solver import FlowState, cell_velocities, wss_per_cell
from .geometry import Mesh, SensorSet
from .metrics import ErrorReport
from .models import FluidModel

logger = logging.getLogger(__name__)

VTK_QUAD = 9


def format_value(value: Any) -> str:
    """17 significant digits for floats, plain text for everything else."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.16e}"
    return str(value)


def phase_label(phase: float) -> str:
    return f"{phase:.2f}"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    logger.debug(f"Wrote {path}")
    return path


def write_vtk(
    path: str | Path,
    mesh: Mesh,
    cell_data: Mapping[str, np.ndarray],
    title: str = "aorta-twin field",
) -> Path:
    """Write every grid cell as a quad of an unstructured grid.

    Args:
        path: Output .vtk file
        mesh: Mesh whose cells are written
        cell_data: name -> per-fluid-cell values (solid cells are written as 0)
        title: Header line

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nxp, nyp = mesh.nx + 1, mesh.ny + 1
    xs = np.arange(nxp) * mesh.dx
    ys = np.arange(nyp) * mesh.dy

    def node(i: int, j: int) -> int:
        return i * nyp + j

    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {nxp * nyp} double")
    lines.extend(f"{format_value(xs[i])} {format_value(ys[j])} 0" for i in range(nxp) for j in range(nyp))

    cells = [(i, j) for i in range(mesh.nx) for j in range(mesh.ny)]
    lines.append(f"CELLS {len(cells)} {5 * len(cells)}")
    lines.extend(
        f"4 {node(i, j)} {node(i + 1, j)} {node(i + 1, j + 1)} {node(i, j + 1)}" for i, j in cells
    )
    lines.append(f"CELL_TYPES {len(cells)}")
    lines.extend(str(VTK_QUAD) for _ in cells)

    lines.append(f"CELL_DATA {len(cells)}")
    arrays = {"flag": mesh.cell_flags.astype(float)}
    arrays.update({name: mesh.to_grid(np.asarray(values, dtype=float)) for name, values in cell_data.items()})
    for name, grid in arrays.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(format_value(grid[i, j]) for i, j in cells)

    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {path} ({len(cells)} cells, arrays {list(arrays)})")
    return path


def field_arrays(state: FlowState, mesh: Mesh, fluid: FluidModel) -> dict[str, np.ndarray]:
    """Cell-centred u, v, p and the adjacent wall shear stress magnitude."""
    u, v = cell_velocities(state, mesh)
    return {"u": u, "v": v, "p": mesh.from_grid(state.p), "wss": wss_per_cell(state, mesh, fluid)}


def write_field_vtk(
    path: str | Path,
    state: FlowState,
    mesh: Mesh,
    fluid: FluidModel,
    extra: Mapping[str, np.ndarray] | None = None,
) -> Path:
    arrays = field_arrays(state, mesh, fluid)
    if extra:
        arrays.update(extra)
    return write_vtk(path, mesh, arrays, title=f"aorta-twin field t={state.t:.6f}")


def write_sensors_csv(path: str | Path, mesh: Mesh, sensors: SensorSet) -> Path:
    rows = [(c, *mesh.cell_centers[c], "sensor") for c in sensors.sensor_cells]
    rows += [(c, *mesh.cell_centers[c], "stabilization") for c in sensors.stabilization_cells]
    return write_csv(path, ["cell_index", "x", "y", "kind"], rows)


def sensor_header(sensors: SensorSet) -> list[str]:
    header = ["t"]
    for cell in sensors.sensor_cells:
        header += [f"u_{cell}", f"v_{cell}"]
    return header


def write_sensor_table(path: str | Path, times: np.ndarray, values: np.ndarray, sensors: SensorSet) -> Path:
    return write_csv(path, sensor_header(sensors), ([t, *row] for t, row in zip(times, values)))


def write_probe_csv(path: str | Path, times: np.ndarray, cell: int, probe_values: np.ndarray) -> Path:
    """Probe history with columns t, cell_index, u, v, p."""
    return write_csv(
        path, ["t", "cell_index", "u", "v", "p"], ([t, cell, *row] for t, row in zip(times, probe_values))
    )


def write_parameter_trajectory(path: str | Path, record) -> Path:
    rows = zip(record.times, record.true_parameter, record.param_mean, record.param_lo, record.param_hi, record.observed)
    return write_csv(path, ["t", "true", "mean", "lo", "hi", "observed"], rows)


def write_state_probe(path: str | Path, record) -> Path:
    rows = zip(record.times, record.probe_true, record.probe_mean, record.probe_lo, record.probe_hi)
    return write_csv(path, ["t", "true_u", "mean_u", "lo", "hi"], rows)


def write_inlet_profiles(path: str | Path, rows: Sequence[Sequence[float]]) -> Path:
    return write_csv(path, ["phase", "y", "true", "mean", "lo", "hi"], rows)


def write_ensemble_csv(path: str | Path, members: np.ndarray, n_params: int = 1, include_state: bool = False) -> Path:
    """One row per member: member, param[, state entries]."""
    n_state = members.shape[1] - n_params if include_state else 0
    header = ["member"] + (["param"] if n_params == 1 else [f"param_{k}" for k in range(n_params)])
    header += [f"x_{k}" for k in range(n_state)]
    width = n_params + n_state
    return write_csv(path, header, ([i, *members[i, :width]] for i in range(members.shape[0])))


def metrics_lines(report: ErrorReport, extra: Mapping[str, Any] | None = None) -> list[str]:
    values: dict[str, Any] = {
        "mre_percent": report.mean_relative_error,
        "coverage": report.coverage,
        "n_steps": report.n_steps,
        "n_excluded": report.n_excluded,
    }
    values.update(extra or {})
    lines = []
    for key, value in values.items():
        if isinstance(value, float) and math.isnan(value):
            value = "nan"
        lines.append(f"{key}={format_value(value)}")
    return lines


def write_metrics(path: str | Path, report: ErrorReport, extra: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(metrics_lines(report, extra)) + "\n", encoding="utf-8")
    return path


def read_metrics(path: str | Path) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values

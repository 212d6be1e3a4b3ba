"""Run-directory persistence of truth and reconstruction artifacts.

Usage - reload the truth of an earlier `truth` run:

    from aorta_twin.run_store import RunStore

    store = RunStore("runs/default")
    truth = store.load_truth()
    if truth:
        print(f"{truth.n_steps} steps, {truth.sensors.n_sensors} sensors")
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from . import exporters
from .flow_solver import FlowState, cell_velocities
from .geometry import Mesh, SensorSet, restrict_to_coarse
from .models import FluidModel, ScenarioKind
from .twin_lab import AssimilationRecord, Observations, TruthRecord

logger = logging.getLogger(__name__)

TRUTH_ARRAYS = "truth.npz"
TRUTH_META = "truth.json"
RECON_ARRAYS = "reconstruction.npz"


class TruthMetadata(BaseModel):
    """Scalar side data of a TruthRecord."""
    scenario: ScenarioKind
    seed: int
    sensor_cells: list[int]
    stabilization_cells: list[int]
    probe_cell: int
    snapshot_phases: list[float] = Field(default_factory=list)
    wss_peak_mean: Optional[float] = None
    wss_time_mean: Optional[float] = None
    fingerprint: Optional[str] = Field(default=None, description="Digest of the settings the truth was generated with")


def _finite_or_none(value: float) -> float | None:
    return None if value is None or math.isnan(value) else float(value)


def _snapshot_arrays(prefix: str, snapshots: dict[float, FlowState]) -> dict[str, np.ndarray]:
    arrays = {}
    for phase, state in snapshots.items():
        key = f"{prefix}_{exporters.phase_label(phase)}"
        arrays[f"{key}_u"] = state.u
        arrays[f"{key}_v"] = state.v
        arrays[f"{key}_p"] = state.p
        arrays[f"{key}_t"] = np.array(state.t)
    return arrays


def _load_snapshots(data, prefix: str, phases: list[float]) -> dict[float, FlowState]:
    snapshots = {}
    for phase in phases:
        key = f"{prefix}_{exporters.phase_label(phase)}"
        if f"{key}_u" in data:
            snapshots[phase] = FlowState(data[f"{key}_u"], data[f"{key}_v"], data[f"{key}_p"], float(data[f"{key}_t"]))
    return snapshots


class RunStore:
    """Reads and writes the files of one run directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def has_truth(self) -> bool:
        return self.path(TRUTH_ARRAYS).exists() and self.path(TRUTH_META).exists()

    def save_truth(self, truth: TruthRecord, scenario: ScenarioKind, fingerprint: str | None = None) -> None:
        """Persist a TruthRecord (arrays in npz, side data as JSON)."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        meta = TruthMetadata(
            scenario=scenario,
            seed=truth.seed,
            sensor_cells=list(truth.sensors.sensor_cells),
            stabilization_cells=list(truth.sensors.stabilization_cells),
            probe_cell=truth.probe_cell,
            snapshot_phases=sorted(truth.snapshots),
            wss_peak_mean=_finite_or_none(truth.wss_peak_mean),
            wss_time_mean=_finite_or_none(truth.wss_time_mean),
            fingerprint=fingerprint,
        )
        np.savez_compressed(
            self.path(TRUTH_ARRAYS),
            times=truth.times,
            sensor_values=truth.sensor_values,
            stabilization_values=truth.stabilization_values,
            true_parameter=truth.true_parameter,
            probe_values=truth.probe_values,
            **_snapshot_arrays("truth", truth.snapshots),
        )
        self.path(TRUTH_META).write_text(meta.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Saved truth record to {self.run_dir}")

    def load_truth(self) -> TruthRecord | None:
        """Load the stored TruthRecord.

        Returns:
            The truth record if found, None otherwise.
        """
        if not self.has_truth():
            logger.debug(f"No truth record in {self.run_dir}")
            return None
        meta = TruthMetadata.model_validate_json(self.path(TRUTH_META).read_text(encoding="utf-8"))
        with np.load(self.path(TRUTH_ARRAYS)) as data:
            truth = TruthRecord(
                times=data["times"],
                sensor_values=data["sensor_values"],
                stabilization_values=data["stabilization_values"],
                true_parameter=data["true_parameter"],
                probe_values=data["probe_values"],
                sensors=SensorSet(tuple(meta.sensor_cells), tuple(meta.stabilization_cells)),
                probe_cell=meta.probe_cell,
                snapshots=_load_snapshots(data, "truth", meta.snapshot_phases),
                wss_peak_mean=float("nan") if meta.wss_peak_mean is None else meta.wss_peak_mean,
                wss_time_mean=float("nan") if meta.wss_time_mean is None else meta.wss_time_mean,
                seed=meta.seed,
            )
        logger.debug(f"Loaded truth record from {self.run_dir}")
        return truth

    def truth_metadata(self) -> TruthMetadata | None:
        if not self.path(TRUTH_META).exists():
            return None
        return TruthMetadata.model_validate_json(self.path(TRUTH_META).read_text(encoding="utf-8"))

    def truth_scenario(self) -> ScenarioKind | None:
        meta = self.truth_metadata()
        return None if meta is None else meta.scenario

    def save_reconstruction(self, record: AssimilationRecord) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            self.path(RECON_ARRAYS),
            phases=np.array(sorted(record.snapshots)),
            **_snapshot_arrays("recon", record.snapshots),
        )

    def load_reconstruction_snapshots(self) -> dict[float, FlowState]:
        if not self.path(RECON_ARRAYS).exists():
            return {}
        with np.load(self.path(RECON_ARRAYS)) as data:
            return _load_snapshots(data, "recon", [float(p) for p in data["phases"]])

    def write_truth_artifacts(
        self,
        truth: TruthRecord,
        coarse_mesh: Mesh,
        fine_mesh: Mesh,
        fluid: FluidModel,
        export_fields: bool = True,
    ) -> None:
        exporters.write_sensors_csv(self.path("sensors.csv"), coarse_mesh, truth.sensors)
        exporters.write_sensor_table(self.path("truth_sensors.csv"), truth.times, truth.sensor_values, truth.sensors)
        exporters.write_probe_csv(self.path("truth_probe.csv"), truth.times, truth.probe_cell, truth.probe_values)
        if export_fields:
            self.write_truth_vtk(truth.snapshots, fine_mesh, fluid)
            exporters.write_vtk(self.path("mesh_coarse.vtk"), coarse_mesh, {}, title="aorta-twin coarse mesh")
            exporters.write_vtk(self.path("mesh_fine.vtk"), fine_mesh, {}, title="aorta-twin fine mesh")

    def write_truth_vtk(self, snapshots: dict[float, FlowState], fine_mesh: Mesh, fluid: FluidModel) -> None:
        for phase, state in snapshots.items():
            exporters.write_field_vtk(self.path(f"truth_{exporters.phase_label(phase)}.vtk"), state, fine_mesh, fluid)

    def write_observations(self, observations: Observations, sensors: SensorSet) -> None:
        exporters.write_sensor_table(self.path("observations.csv"), observations.times, observations.values, sensors)

    def write_recon_vtk(
        self,
        snapshots: dict[float, FlowState],
        truth_snapshots: dict[float, FlowState],
        coarse_mesh: Mesh,
        fine_mesh: Mesh,
        fluid: FluidModel,
    ) -> None:
        """Reconstruction fields with the restricted truth speed and the absolute difference."""
        for phase, state in snapshots.items():
            u, v = cell_velocities(state, coarse_mesh)
            extra = {"umag": np.hypot(u, v)}
            truth_state = truth_snapshots.get(phase)
            if truth_state is not None:
                tu, tv = cell_velocities(truth_state, fine_mesh)
                umag_truth = restrict_to_coarse(np.hypot(tu, tv), fine_mesh, coarse_mesh)
                extra["umag_truth"] = umag_truth
                extra["umag_abs_diff"] = np.abs(extra["umag"] - umag_truth)
            exporters.write_field_vtk(
                self.path(f"recon_{exporters.phase_label(phase)}.vtk"), state, coarse_mesh, fluid, extra
            )

    def write_assimilation_artifacts(
        self,
        record: AssimilationRecord,
        truth: TruthRecord,
        coarse_mesh: Mesh,
        fine_mesh: Mesh,
        forward_fluid: FluidModel,
        metrics_extra: dict,
        export_fields: bool = True,
        export_ensembles: bool = False,
        include_state: bool = False,
    ) -> None:
        exporters.write_parameter_trajectory(self.path("parameter_trajectory.csv"), record)
        exporters.write_state_probe(self.path("state_probe.csv"), record)
        exporters.write_inlet_profiles(self.path("inlet_profiles.csv"), record.inlet_profiles)
        exporters.write_metrics(self.path("metrics.txt"), record.report, metrics_extra)
        if export_ensembles:
            for phase, members in record.ensemble_snapshots.items():
                exporters.write_ensemble_csv(
                    self.path(f"ensemble_{exporters.phase_label(phase)}.csv"), members, include_state=include_state
                )
        if export_fields:
            self.write_recon_vtk(record.snapshots, truth.snapshots, coarse_mesh, fine_mesh, forward_fluid)
        self.save_reconstruction(record)
        logger.info(f"Wrote assimilation artifacts to {self.run_dir}")


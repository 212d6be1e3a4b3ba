"""Aorta Twin - ensemble Kalman inference of arterial inlet conditions."""

from .assimilation_manager import AssimilationManager, StepResult
from .flow_solver import FlowState, advance, step
from .geometry import Mesh, SensorSet, build_vessel_mesh, select_sensors
from .models import FluidModel, Hyperparameters, InletSpec, RunConfig, Scenario, ScenarioKind
from .twin_lab import generate_truth, make_observations, run_assimilation, run_open_loop

__all__ = [
    "AssimilationManager",
    "StepResult",
    "FlowState",
    "advance",
    "step",
    "Mesh",
    "SensorSet",
    "build_vessel_mesh",
    "select_sensors",
    "FluidModel",
    "Hyperparameters",
    "InletSpec",
    "RunConfig",
    "Scenario",
    "ScenarioKind",
    "generate_truth",
    "make_observations",
    "run_assimilation",
    "run_open_loop",
]

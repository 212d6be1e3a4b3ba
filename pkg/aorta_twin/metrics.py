"""Error and uncertainty summaries of assimilation runs."""

from __future__ import annotations

import logging

import numpy as np
from pydantic import BaseModel, Field

from .errors import EmptyTrajectoryError

logger = logging.getLogger(__name__)

ZERO_TRUTH_THRESHOLD = 1e-12
BAND_Z = 1.96


class ErrorReport(BaseModel):
    """Relative-error and band-coverage summary of one parameter trajectory."""
    mean_relative_error: float = Field(ge=0, description="MRE in percent")
    per_step_errors: list[float] = Field(description="Relative error per step in percent (NaN where excluded)")
    coverage: float = Field(ge=0, le=1, description="Share of steps with truth inside the band")
    n_steps: int = Field(ge=0)
    n_excluded: int = Field(ge=0, description="Steps skipped because the truth is zero")


def _pair(true_traj, pred_traj) -> tuple[np.ndarray, np.ndarray]:
    true = np.asarray(true_traj, dtype=float).ravel()
    pred = np.asarray(pred_traj, dtype=float).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"trajectory lengths differ: {true.size} vs {pred.size}")
    if true.size == 0:
        raise EmptyTrajectoryError("trajectory is empty")
    return true, pred


def relative_errors(true_traj, pred_traj) -> np.ndarray:
    """|true - pred| / |true| in percent per step, NaN where |true| is below the zero threshold."""
    true, pred = _pair(true_traj, pred_traj)
    valid = np.abs(true) >= ZERO_TRUTH_THRESHOLD
    errors = np.full(true.shape, np.nan)
    errors[valid] = np.abs(true[valid] - pred[valid]) / np.abs(true[valid]) * 100.0
    return errors


def mean_relative_error(true_traj, pred_traj) -> float:
    """Average relative error over the trajectory in percent."""
    errors = relative_errors(true_traj, pred_traj)
    valid = ~np.isnan(errors)
    n_excluded = int(errors.size - valid.sum())
    if n_excluded:
        logger.warning(f"Excluded {n_excluded} step(s) with zero truth from the relative error")
    if not valid.any():
        raise EmptyTrajectoryError("every step has zero truth")
    return float(np.mean(errors[valid]))


def confidence_band(members, z: float = BAND_Z) -> tuple[np.ndarray, np.ndarray]:
    """mean -/+ z * sd per step, sd with 1/S_n normalization.

    Args:
        members: (S_n,) for one step or (steps, S_n)
    """
    values = np.asarray(members, dtype=float)
    if values.shape[-1] < 2:
        raise ValueError("confidence band needs at least 2 members")
    mean = values.mean(axis=-1)
    sd = values.std(axis=-1)
    return mean - z * sd, mean + z * sd


def band_coverage(true_traj, lo, hi) -> float:
    true = np.asarray(true_traj, dtype=float).ravel()
    if true.size == 0:
        raise EmptyTrajectoryError("trajectory is empty")
    inside = (np.asarray(lo).ravel() <= true) & (true <= np.asarray(hi).ravel())
    return float(np.mean(inside))


def error_report(true_traj, mean_traj, lo, hi) -> ErrorReport:
    errors = relative_errors(true_traj, mean_traj)
    n_excluded = int(np.isnan(errors).sum())
    return ErrorReport(
        mean_relative_error=mean_relative_error(true_traj, mean_traj),
        per_step_errors=errors.tolist(),
        coverage=band_coverage(true_traj, lo, hi),
        n_steps=int(errors.size),
        n_excluded=n_excluded,
    )


def sensor_rmse(pred, truth) -> float:
    """Root-mean-square sensor misfit over all steps and entries."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EmptyTrajectoryError("no sensor values")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))

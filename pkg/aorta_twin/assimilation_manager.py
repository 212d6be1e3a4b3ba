"""Per-step coordination of forecast, measurement update and constraint."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ensisf import (
    ForwardModel,
    JointEnsemble,
    ObservationOperator,
    constrain_parameters,
    forecast,
    measurement_update,
)
from .errors import AortaTwinError, AssimilationError
from .logging_config import log_assimilation_step
from .metrics import confidence_band
from .models import Hyperparameters

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepResult:
    """Ensemble after one filter step."""
    step: int
    t: float
    observed: bool
    ensemble: JointEnsemble
    gain: np.ndarray | None = None


StepListener = Callable[[StepResult], None]


class AssimilationManager:
    """Owns the joint ensemble and advances it one filter step at a time."""

    def __init__(
        self,
        ensemble: JointEnsemble,
        forward: ForwardModel,
        observation: ObservationOperator,
        hyperparameters: Hyperparameters,
        seed: int,
        constraint_scale: float = 1.0,
        n_jobs: int = 1,
        batched: bool = False,
    ):
        """Initialize the manager.

        Args:
            ensemble: Prior ensemble at t = 0
            forward: Forward model passed to forecast
            observation: Measurement operator
            hyperparameters: Step size, span, noise and update settings
            seed: Ensemble seed for process and measurement draws
            constraint_scale: Converts the stabilization mean into parameter units
            n_jobs: Forecast worker threads
            batched: Forward model evaluates all members at once
        """
        self._ensemble = ensemble
        self._forward = forward
        self._observation = observation
        self._hyper = hyperparameters
        self._seed = seed
        self._constraint_scale = constraint_scale
        self._n_jobs = n_jobs
        self._batched = batched
        self._listeners: list[StepListener] = []
        logger.info(
            f"AssimilationManager initialized: {ensemble.n_members} members, "
            f"span {hyperparameters.observation_span}, {hyperparameters.update.beta_iterations} beta iteration(s)"
        )

    @property
    def ensemble(self) -> JointEnsemble:
        return self._ensemble

    def add_listener(self, callback: StepListener) -> None:
        """Add a listener called with every StepResult."""
        self._listeners.append(callback)

    def remove_listener(self, callback: StepListener) -> None:
        self._listeners.remove(callback)

    def is_observation_step(self, step: int) -> bool:
        span = self._hyper.observation_span
        return step >= span and step % span == 0

    def process_step(
        self,
        step: int,
        y_obs: np.ndarray | None = None,
        stabilization: np.ndarray | None = None,
    ) -> StepResult:
        """Forecast to step k and, at observation steps, update and constrain.

        Args:
            step: Index k >= 1 of the step being produced
            y_obs: Observation vector at step k (used only at observation steps)
            stabilization: Stabilization measurements at step k (None disables the constraint)

        Returns:
            The resulting StepResult
        """
        update_cfg = self._hyper.update
        observed = self.is_observation_step(step)
        gain = None
        try:
            ensemble = forecast(
                self._ensemble,
                self._forward,
                self._hyper.dt,
                self._hyper.noise,
                self._seed,
                step=step,
                n_jobs=self._n_jobs,
                batched=self._batched,
            )
            if observed:
                if y_obs is None:
                    raise AssimilationError(step, "observation step without an observation vector")
                ensemble, gain = measurement_update(
                    ensemble, self._observation, y_obs, self._hyper.noise, update_cfg, self._seed, step
                )
                if update_cfg.constraint_enabled and stabilization is not None:
                    ensemble = constrain_parameters(
                        ensemble, stabilization, update_cfg.constraint_band, self._constraint_scale
                    )
        except AssimilationError:
            raise
        except (AortaTwinError, ValueError, np.linalg.LinAlgError) as e:
            raise AssimilationError(step, str(e)) from e

        self._ensemble = ensemble
        result = StepResult(step=step, t=ensemble.t, observed=observed, ensemble=ensemble, gain=gain)

        params = ensemble.params[:, 0]
        lo, hi = confidence_band(params)
        log_assimilation_step(logger, step, ensemble.t, float(params.mean()), (float(lo), float(hi)), observed)

        for listener in self._listeners:
            try:
                listener(result)
            except Exception as e:
                logger.error(f"Listener error: {e}")
        return result

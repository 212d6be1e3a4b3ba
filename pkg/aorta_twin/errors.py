"""Exception hierarchy for the twin-experiment toolkit."""

from __future__ import annotations


class AortaTwinError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(AortaTwinError, ValueError):
    """Vessel shape or mesh invariants do not hold."""


class ResolutionTooCoarseError(GeometryError):
    """The splitter does not cover a single cell row at the requested resolution."""


class SensorSelectionError(GeometryError):
    """Sensor placement request cannot be satisfied."""


class InterpolationError(AortaTwinError, ValueError):
    """Fine-to-coarse restriction failed (e.g. empty coarse cell)."""


class SolverError(AortaTwinError, RuntimeError):
    """Flow solver failure."""


class CFLViolationError(SolverError):
    """Time step exceeds the advective or diffusive stability bound."""


class PoissonConvergenceError(SolverError):
    """Pressure Poisson iteration hit its cap before reaching tolerance."""


class ForecastError(AortaTwinError, RuntimeError):
    """Forward model failed for one ensemble member."""

    def __init__(self, member: int, message: str):
        super().__init__(f"member {member}: {message}")
        self.member = member


class GainFactorizationError(AortaTwinError, RuntimeError):
    """Regularized innovation covariance is not positive definite."""


class ConstraintError(AortaTwinError, ValueError):
    """Parameter stabilization cannot be applied."""


class AssimilationError(AortaTwinError, RuntimeError):
    """A twin-experiment run aborted at a given step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class EmptyTrajectoryError(AortaTwinError, ValueError):
    """Metric requested on an empty (or fully excluded) trajectory."""


class ConfigError(AortaTwinError, ValueError):
    """Run configuration could not be parsed or validated."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        context = []
        if key:
            context.append(f"key '{key}'")
        if line is not None:
            context.append(f"line {line}")
        prefix = f"[{', '.join(context)}] " if context else ""
        super().__init__(f"{prefix}{message}")
        self.key = key
        self.line = line


class TruthMismatchError(AortaTwinError, ValueError):
    """A truth record does not belong to the scenario or mesh it is used with."""

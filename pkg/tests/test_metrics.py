import math

import numpy as np
import pytest

from aorta_twin.errors import EmptyTrajectoryError
from aorta_twin.metrics import (
    band_coverage,
    confidence_band,
    error_report,
    mean_relative_error,
    relative_errors,
    sensor_rmse,
)


def test_mean_relative_error_in_percent() -> None:
    assert mean_relative_error([1.0, 2.0], [1.1, 1.8]) == pytest.approx(10.0)
    assert mean_relative_error([0.02] * 5, [0.02] * 5) == 0.0


def test_zero_truth_steps_are_excluded(caplog) -> None:
    errors = relative_errors([0.0, 1.0], [5.0, 1.5])
    assert math.isnan(errors[0])
    assert errors[1] == pytest.approx(50.0)

    with caplog.at_level("WARNING"):
        assert mean_relative_error([0.0, 1.0], [5.0, 1.5]) == pytest.approx(50.0)
    assert "Excluded 1 step" in caplog.text


@pytest.mark.parametrize("true, pred", [([], []), ([0.0, 0.0], [1.0, 2.0])])
def test_mean_relative_error_needs_usable_steps(true, pred) -> None:
    with pytest.raises(EmptyTrajectoryError):
        mean_relative_error(true, pred)


def test_mismatched_trajectories_are_rejected() -> None:
    with pytest.raises(ValueError):
        mean_relative_error([1.0, 2.0], [1.0])


def test_confidence_band_per_step() -> None:
    lo, hi = confidence_band(np.array([[1.0, 3.0], [2.0, 2.0]]))
    np.testing.assert_allclose(lo, [2.0 - 1.96, 2.0])
    np.testing.assert_allclose(hi, [2.0 + 1.96, 2.0])
    with pytest.raises(ValueError):
        confidence_band(np.array([1.0]))


def test_band_coverage_and_report() -> None:
    true = np.array([1.0, 2.0, 0.0, 4.0])
    mean = np.array([1.0, 2.2, 0.1, 4.0])
    lo = mean - 0.15
    hi = mean + 0.15

    assert band_coverage(true, lo, hi) == pytest.approx(0.75)
    report = error_report(true, mean, lo, hi)
    assert report.n_steps == 4
    assert report.n_excluded == 1
    assert report.coverage == pytest.approx(0.75)
    assert report.mean_relative_error == pytest.approx(10.0 / 3.0)
    assert math.isnan(report.per_step_errors[2])


def test_sensor_rmse() -> None:
    assert sensor_rmse(np.zeros((2, 2)), np.full((2, 2), 3.0)) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        sensor_rmse(np.zeros(3), np.zeros(4))

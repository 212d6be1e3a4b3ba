import json

import pytest

from aorta_twin.config import (
    SCENARIO_DEFAULTS,
    config_from_dict,
    default_hyperparameters,
    parse_config,
    save_config,
    truth_fingerprint,
)
from aorta_twin.errors import ConfigError
from aorta_twin.models import PoissonMethod, ScenarioKind


def _write(tmp_path, text: str):
    path = tmp_path / "config.json"
    path.write_text(text, encoding="utf-8")
    return path


def test_empty_file_yields_constant_defaults(tmp_path) -> None:
    config = parse_config(_write(tmp_path, ""))

    assert config.scenario == ScenarioKind.CONSTANT
    hyper = config.hyperparameters
    assert hyper.n_members == 80
    assert hyper.dt == 0.01
    assert hyper.n_steps == 100
    assert hyper.observation_span == 2
    assert hyper.prior.param_mean == 0.015
    assert hyper.prior.param_variance == 4e-6
    assert hyper.noise.process_variance == 1e-8
    assert hyper.noise.measurement_variance == 1e-10
    assert (config.coarse.nx, config.coarse.ny) == (72, 8)
    assert (config.fine.nx, config.fine.ny) == (288, 32)
    assert config.sensors.count == 27


def test_time_dependent_defaults() -> None:
    config = config_from_dict({"scenario": "time_dependent"})
    expected = SCENARIO_DEFAULTS[ScenarioKind.TIME_DEPENDENT]

    assert config.hyperparameters.prior.param_mean == expected["prior"]["param_mean"]
    assert config.hyperparameters.noise.process_variance == 1e-4
    assert config.hyperparameters == default_hyperparameters(ScenarioKind.TIME_DEPENDENT)


def test_partial_overrides_keep_scenario_defaults() -> None:
    config = config_from_dict(
        {"scenario": "time_space_dependent", "hyperparameters": {"observation_span": 4, "prior": {"param_mean": 0.2}}}
    )
    hyper = config.hyperparameters
    assert hyper.observation_span == 4
    assert hyper.prior.param_mean == 0.2
    assert hyper.prior.param_variance == 4e-4
    assert hyper.noise.measurement_variance == 1e-8


def test_zero_span_is_a_config_error(tmp_path) -> None:
    path = _write(tmp_path, '{\n  "hyperparameters": {\n    "observation_span": 0\n  }\n}\n')
    with pytest.raises(ConfigError) as excinfo:
        parse_config(path)
    assert excinfo.value.key == "hyperparameters.observation_span"
    assert excinfo.value.line == 3


def test_unknown_key_is_rejected_with_location(tmp_path) -> None:
    path = _write(tmp_path, '{\n  "scenario": "constant",\n  "bogus": 1\n}\n')
    with pytest.raises(ConfigError) as excinfo:
        parse_config(path)
    assert excinfo.value.key == "bogus"
    assert excinfo.value.line == 3
    assert "bogus" in str(excinfo.value)


def test_unknown_scenario_is_rejected() -> None:
    with pytest.raises(ConfigError) as excinfo:
        config_from_dict({"scenario": "pulsatile"})
    assert excinfo.value.key == "scenario"


def test_invalid_json_reports_line(tmp_path) -> None:
    with pytest.raises(ConfigError) as excinfo:
        parse_config(_write(tmp_path, '{\n  "scenario": \n}'))
    assert excinfo.value.line == 3
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, "[1, 2]"))


def test_fine_grid_must_refine_coarse_grid() -> None:
    with pytest.raises(ConfigError):
        config_from_dict({"fine": {"nx": 100, "ny": 40}})


def test_saved_config_parses_back_identically(tmp_path) -> None:
    config = config_from_dict(
        {
            "scenario": "time_dependent",
            "seeds": {"truth": 4},
            "poisson": "sor",
            "hyperparameters": {"n_members": 20},
            "true_inlet": {"kind": "time_series", "samples": [[0.0, 0.1], [1.0, 0.2]]},
        }
    )
    path = save_config(config, tmp_path / "out" / "config.json")

    assert parse_config(path) == config
    assert json.loads(path.read_text())["poisson"] == "sor"
    assert config.poisson == PoissonMethod.SOR


def test_truth_fingerprint_tracks_truth_settings_only() -> None:
    base = config_from_dict({})
    reference = truth_fingerprint(base)

    assert truth_fingerprint(config_from_dict({"threads": 4, "seeds": {"noise": 9, "ensemble": 9}})) == reference
    assert truth_fingerprint(config_from_dict({"hyperparameters": {"n_members": 10, "observation_span": 5}})) == reference
    assert truth_fingerprint(config_from_dict({"coarse": {"nx": 36, "ny": 8}, "fine": {"nx": 288, "ny": 32}})) != reference
    assert truth_fingerprint(config_from_dict({"seeds": {"truth": 5}})) != reference
    assert truth_fingerprint(config_from_dict({"hyperparameters": {"t_final": 0.5}})) != reference

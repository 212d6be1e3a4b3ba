import json

import pytest

from aorta_twin import main
from aorta_twin.config import config_from_dict, truth_fingerprint
from aorta_twin.errors import TruthMismatchError
from aorta_twin.exporters import read_metrics
from aorta_twin.main import cli, metrics_files, summary_table

TINY_CONFIG = {
    "coarse": {"nx": 16, "ny": 8},
    "fine": {"nx": 32, "ny": 16},
    "hyperparameters": {"n_members": 4, "t_final": 0.04},
    "sensors": {"count": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG, indent=2), encoding="utf-8")
    return path


def _run(*argv, tmp_path) -> int:
    return cli([*argv, "--log-dir", str(tmp_path / "logs")])


def test_assimilate_span_sweep_then_report_and_export(tmp_path, tiny_config, capsys) -> None:
    out = tmp_path / "run"
    assert _run("assimilate", "--config", str(tiny_config), "--out", str(out), "--span", "2", "4", tmp_path=tmp_path) == 0

    assert (out / "truth.npz").exists()
    assert (out / "truth_sensors.csv").exists()
    for span in (2, 4):
        run_dir = out / f"span_{span}"
        for name in ("metrics.txt", "parameter_trajectory.csv", "state_probe.csv", "observations.csv", "config.json"):
            assert (run_dir / name).exists()
        metrics = read_metrics(run_dir / "metrics.txt")
        assert int(metrics["observation_span"]) == span
        assert float(metrics["span_s"]) == pytest.approx(0.01 * span)
    header = (out / "span_2" / "parameter_trajectory.csv").read_text().splitlines()[0]
    assert header == "t,true,mean,lo,hi,observed"

    capsys.readouterr()
    assert _run("report", "--out", str(out), tmp_path=tmp_path) == 0
    printed = capsys.readouterr().out
    assert "span (s)" in printed
    table = printed.split("span (s)")[1].splitlines()
    assert [row.split()[0] for row in table[1:3]] == ["0.02", "0.04"]

    (out / "truth_0.24.vtk").unlink()
    assert _run("export-vtk", "--out", str(out), tmp_path=tmp_path) == 0
    assert (out / "truth_0.24.vtk").exists()
    assert (out / "span_4" / "recon_0.24.vtk").exists()


def test_truth_then_assimilate_with_seed_overrides(tmp_path, tiny_config) -> None:
    out = tmp_path / "run"
    assert _run("truth", "--config", str(tiny_config), "--out", str(out), "--seed-truth", "3", tmp_path=tmp_path) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["seeds"]["truth"] == 3
    assert saved["hyperparameters"]["n_members"] == 4

    assert _run(
        "assimilate", "--config", str(tiny_config), "--out", str(out), "--seed-truth", "3", "--threads", "2",
        tmp_path=tmp_path,
    ) == 0
    assert (out / "metrics.txt").exists()
    assert json.loads((out / "config.json").read_text())["threads"] == 2


def test_missing_inputs_exit_with_status_one(tmp_path, capsys) -> None:
    assert _run("truth", "--config", str(tmp_path / "absent.json"), tmp_path=tmp_path) == 1
    assert _run("report", "--out", str(tmp_path / "empty"), tmp_path=tmp_path) == 1
    assert _run("export-vtk", "--out", str(tmp_path / "empty"), tmp_path=tmp_path) == 1
    assert "error:" in capsys.readouterr().err


def test_config_errors_exit_with_status_two(tmp_path, capsys) -> None:
    bad = tmp_path / "bad.json"
    bad.write_text('{"hyperparameters": {"observation_span": 0}}', encoding="utf-8")
    assert _run("truth", "--config", str(bad), "--out", str(tmp_path / "run"), tmp_path=tmp_path) == 2
    assert "observation_span" in capsys.readouterr().err

    assert _run("assimilate", "--scenario", "time", "--sweep", "--out", str(tmp_path / "run"), tmp_path=tmp_path) == 2


def test_summary_table_sorts_by_span(tmp_path) -> None:
    for span, mre in ((5, "0.9"), (2, "0.4")):
        run_dir = tmp_path / f"span_{span}"
        run_dir.mkdir()
        (run_dir / "metrics.txt").write_text(f"mre_percent={mre}\nspan_s={span / 100}\n", encoding="utf-8")

    rows = [read_metrics(p) for p in metrics_files(tmp_path)]
    lines = summary_table(rows).splitlines()
    assert lines[1].split() == ["0.02", "0.400"]
    assert lines[2].split() == ["0.05", "0.900"]


def test_repeated_assimilation_writes_identical_csv(tmp_path, tiny_config) -> None:
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert _run("assimilate", "--config", str(tiny_config), "--out", str(out), tmp_path=tmp_path) == 0
        outputs.append({
            csv: (out / csv).read_bytes() for csv in ("parameter_trajectory.csv", "state_probe.csv", "observations.csv")
        })
    assert outputs[0] == outputs[1]


def test_truth_rejects_fine_grid_below_coarse(tmp_path, capsys) -> None:
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY_CONFIG, "fine": {"nx": 8, "ny": 4}}), encoding="utf-8")
    assert _run("truth", "--config", str(bad), "--out", str(tmp_path / "run"), tmp_path=tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_assimilate_regenerates_truth_from_other_resolution(tmp_path, tiny_config) -> None:
    out = tmp_path / "run"
    assert _run("truth", "--config", str(tiny_config), "--out", str(out), tmp_path=tmp_path) == 0
    stale = json.loads((out / "truth.json").read_text())
    assert len(stale["stabilization_cells"]) == 8

    finer = tmp_path / "finer.json"
    finer_config = {**TINY_CONFIG, "coarse": {"nx": 32, "ny": 16}, "fine": {"nx": 64, "ny": 32}}
    finer.write_text(json.dumps(finer_config), encoding="utf-8")
    assert _run("assimilate", "--config", str(finer), "--out", str(out), tmp_path=tmp_path) == 0

    fresh = json.loads((out / "truth.json").read_text())
    assert len(fresh["stabilization_cells"]) == 16
    assert fresh["fingerprint"] == truth_fingerprint(config_from_dict({**finer_config, "output_dir": str(out)}))
    assert fresh["fingerprint"] != stale["fingerprint"]


def test_truth_mismatch_exits_with_status_two(tmp_path, tiny_config, monkeypatch, capsys) -> None:
    def mismatched(*args, **kwargs):
        raise TruthMismatchError("truth has 4 steps, scenario expects 10")

    monkeypatch.setattr(main, "run_assimilation", mismatched)
    assert _run("assimilate", "--config", str(tiny_config), "--out", str(tmp_path / "run"), tmp_path=tmp_path) == 2
    assert "scenario expects 10" in capsys.readouterr().err


def test_ensemble_export_with_state_columns(tmp_path) -> None:
    config = tmp_path / "ensembles.json"
    config.write_text(json.dumps({**TINY_CONFIG, "export_ensembles": True, "export_ensemble_states": True}))
    out = tmp_path / "run"
    assert _run("assimilate", "--config", str(config), "--out", str(out), tmp_path=tmp_path) == 0

    rows = (out / "ensemble_0.24.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header[:3] == ["member", "param", "x_0"]
    assert len(rows) == 1 + TINY_CONFIG["hyperparameters"]["n_members"]
    assert all(len(row.split(",")) == len(header) for row in rows[1:])

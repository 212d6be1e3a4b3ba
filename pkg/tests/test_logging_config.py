import json
import logging
from datetime import datetime

from aorta_twin.logging_config import log_assimilation_step, log_file_name, setup_logging
from aorta_twin.main import cli


def test_log_file_name_uses_run_name_and_timestamp() -> None:
    now = datetime(2024, 3, 5, 14, 7, 9)
    assert log_file_name("assimilate", now) == "assimilate_2024-03-05_14-07-09.log"
    assert log_file_name("runs/sweep", now) == "runs-sweep_2024-03-05_14-07-09.log"
    assert log_file_name("  ", now) == "run_2024-03-05_14-07-09.log"


def test_repeated_setup_replaces_only_its_own_handlers(tmp_path) -> None:
    root = logging.getLogger()
    foreign = logging.NullHandler()
    root.addHandler(foreign)

    first = setup_logging(tmp_path, run_name="truth")
    second = setup_logging(tmp_path, run_name="report", console_level=logging.WARNING)

    assert first.name.startswith("truth_") and second.name.startswith("report_")
    assert foreign in root.handlers
    owned = [h for h in root.handlers if getattr(h, "_aorta_twin", False)]
    assert len(owned) == 2
    assert {h.level for h in owned} == {logging.DEBUG, logging.WARNING}


def test_debug_lines_reach_the_file(tmp_path) -> None:
    log_file = setup_logging(tmp_path, run_name="assimilate")
    log_assimilation_step(logging.getLogger("aorta_twin.test"), 3, 0.03, 0.021, (0.019, 0.023), True)
    for handler in logging.getLogger().handlers:
        handler.flush()

    line = next(line for line in log_file.read_text().splitlines() if "Assimilation step:" in line)
    entry = json.loads(line.split("Assimilation step: ", 1)[1])
    assert entry == {"step": 3, "t": 0.03, "parameter_mean": 0.021, "band": [0.019, 0.023], "observed": True}


def test_cli_names_the_log_after_the_command(tmp_path) -> None:
    cli(["report", "--out", str(tmp_path / "empty"), "--log-dir", str(tmp_path / "logs")])
    names = [p.name for p in (tmp_path / "logs").iterdir()]
    assert len(names) == 1 and names[0].startswith("report_")

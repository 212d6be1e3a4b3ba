"""Per-run log files and compact JSON log lines for the twin experiments."""

import json
import logging
from datetime import datetime
from pathlib import Path

FILE_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
CONSOLE_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
QUIET_LOGGERS = ("urllib3", "opentelemetry", "logfire", "joblib")


def log_file_name(run_name: str, now: datetime | None = None) -> str:
    """`<run_name>_<YYYY-mm-dd_HH-MM-SS>.log`, with path separators in the name replaced."""
    stamp = (now or datetime.now()).strftime("%Y-%m-%d_%H-%M-%S")
    safe = run_name.replace("/", "-").replace("\\", "-").strip() or "run"
    return f"{safe}_{stamp}.log"


def setup_logging(
    log_dir: str | Path = "logs", run_name: str = "aorta-twin", console_level: int = logging.INFO
) -> Path:
    """Send DEBUG and above to a per-run file and `console_level` and above to the console.

    Handlers installed by an earlier call are replaced, any others are kept.

    Args:
        log_dir: Directory for the log file
        run_name: Prefix of the file name, normally the CLI subcommand
        console_level: Threshold of the console handler

    Returns:
        Path to the log file
    """
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    log_file = log_path / log_file_name(run_name)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    for handler in [h for h in root_logger.handlers if getattr(h, "_aorta_twin", False)]:
        root_logger.removeHandler(handler)
        handler.close()

    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_level)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt="%H:%M:%S"))

    for handler in (file_handler, console_handler):
        handler._aorta_twin = True
        root_logger.addHandler(handler)

    for noisy in QUIET_LOGGERS:
        logging.getLogger(noisy).setLevel(logging.WARNING)

    logging.getLogger(__name__).info(f"Run '{run_name}' logging to {log_file}")
    return log_file


def log_assimilation_step(
    logger: logging.Logger,
    step: int,
    t: float,
    parameter_mean: float,
    band: tuple[float, float],
    observed: bool,
) -> None:
    """Log one filter step as a compact JSON line at DEBUG."""
    entry = {
        "step": step,
        "t": round(t, 10),
        "parameter_mean": parameter_mean,
        "band": [band[0], band[1]],
        "observed": observed,
    }
    logger.debug(f"Assimilation step: {json.dumps(entry)}")


def log_run_summary(logger: logging.Logger, report: object) -> None:
    """Log a run's error report.

    Args:
        logger: Logger instance to use
        report: ErrorReport (or any pydantic model / mapping)
    """
    if hasattr(report, "model_dump"):
        summary = report.model_dump(exclude={"per_step_errors"})
    else:
        summary = report
    logger.info(f"Run summary:\n{json.dumps(summary, indent=2, default=str)}")

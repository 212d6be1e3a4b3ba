"""Command-line entry point for the aorta-twin experiments."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import logfire
from pydantic import ValidationError

from .config import CONSTANT_SPAN_SWEEP, LOG_DIR, config_from_dict, read_config_data, save_config, truth_fingerprint
from .errors import AortaTwinError
from .exporters import read_metrics
from .geometry import Mesh, build_vessel_mesh, select_sensors
from .logging_config import log_run_summary, setup_logging
from .models import RunConfig, ScenarioKind
from .run_store import RunStore
from .twin_lab import (
    TruthRecord,
    build_scenario,
    generate_truth,
    make_observations,
    run_assimilation,
    run_open_loop,
)

logger = logging.getLogger(__name__)

SCENARIO_CHOICES = {
    "constant": ScenarioKind.CONSTANT,
    "time": ScenarioKind.TIME_DEPENDENT,
    "timespace": ScenarioKind.TIME_SPACE_DEPENDENT,
}
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.txt"


class MissingInputError(Exception):
    """A file the subcommand needs is not there."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aorta-twin", description="Ensemble Kalman twin experiments on a 2-D aorta")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON run configuration (empty or absent: defaults)")
        p.add_argument("--out", type=Path, help="Run directory")
        p.add_argument("--log-dir", default=LOG_DIR, help="Directory for the timestamped log file")

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed-truth", type=int)
        p.add_argument("--seed-noise", type=int)
        p.add_argument("--seed-ensemble", type=int)
        p.add_argument("--threads", type=int, help="Forecast worker cap")
        p.add_argument("--scenario", choices=sorted(SCENARIO_CHOICES))

    truth = sub.add_parser("truth", help="Generate the fine-mesh truth and sensor samples")
    common(truth)
    run_flags(truth)

    assimilate = sub.add_parser("assimilate", help="Run the filter against noisy truth observations")
    common(assimilate)
    run_flags(assimilate)
    spans = assimilate.add_mutually_exclusive_group()
    spans.add_argument("--span", type=int, nargs="+", help="Observation span(s) in steps")
    spans.add_argument("--sweep", action="store_true", help=f"Constant-scenario span sweep {CONSTANT_SPAN_SWEEP}")

    report = sub.add_parser("report", help="Print metrics and the span / MRE table")
    common(report)

    export = sub.add_parser("export-vtk", help="Re-emit field snapshots from stored runs")
    common(export)
    return parser


def load_run_config(args: argparse.Namespace, span: int | None = None) -> RunConfig:
    """Config file (if any) with the command-line overrides applied before validation."""
    data: dict[str, Any] = {}
    text = ""
    if args.config is not None:
        if not args.config.exists():
            raise MissingInputError(f"config file not found: {args.config}")
        data, text = read_config_data(args.config)

    if getattr(args, "scenario", None):
        data["scenario"] = SCENARIO_CHOICES[args.scenario].value
    seeds = {
        name: value
        for name, value in (
            ("truth", getattr(args, "seed_truth", None)),
            ("noise", getattr(args, "seed_noise", None)),
            ("ensemble", getattr(args, "seed_ensemble", None)),
        )
        if value is not None
    }
    if seeds:
        data["seeds"] = {**data.get("seeds", {}), **seeds}
    if getattr(args, "threads", None) is not None:
        data["threads"] = args.threads
    if args.out is not None:
        data["output_dir"] = str(args.out)
    if span is not None:
        data["hyperparameters"] = {**data.get("hyperparameters", {}), "observation_span": span}
    return config_from_dict(data, text)


def build_meshes(config: RunConfig) -> tuple[Mesh, Mesh]:
    coarse = build_vessel_mesh(config.vessel, config.coarse.nx, config.coarse.ny)
    fine = build_vessel_mesh(config.vessel, config.fine.nx, config.fine.ny)
    logger.info(f"Meshes: coarse {coarse.n_fluid} fluid cells, fine {fine.n_fluid} fluid cells")
    return coarse, fine


def produce_truth(config: RunConfig, coarse: Mesh, fine: Mesh, store: RunStore) -> TruthRecord:
    sensors = select_sensors(
        coarse,
        config.sensors.fraction,
        config.seeds.truth,
        count=config.sensors.count,
        near_divider_quota=config.sensors.near_divider_quota,
        near_divider_radius=config.sensors.near_divider_radius,
    )
    scenario = build_scenario(config)
    truth = generate_truth(
        scenario, fine, sensors, config.seeds.truth, coarse, fluid=config.truth_fluid, poisson=config.poisson
    )
    store.save_truth(truth, config.scenario, fingerprint=truth_fingerprint(config))
    store.write_truth_artifacts(truth, coarse, fine, config.truth_fluid, export_fields=config.export_fields)
    return truth


def cmd_truth(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    store = RunStore(config.output_dir)
    with logfire.span("truth {scenario}", scenario=config.scenario.value):
        coarse, fine = build_meshes(config)
        truth = produce_truth(config, coarse, fine, store)
    save_config(config, store.path(CONFIG_FILE))
    print(f"Truth: {truth.n_steps} steps, {truth.sensors.n_sensors} sensors -> {store.run_dir}")
    return 0


def _reusable_truth(store: RunStore, config: RunConfig) -> TruthRecord | None:
    """Stored truth if it was generated with the same truth settings, else None."""
    meta = store.truth_metadata()
    if meta is None:
        return None
    if meta.fingerprint != truth_fingerprint(config):
        logger.warning(f"Stored truth in {store.run_dir} was generated with other settings, regenerating")
        return None
    return store.load_truth()


def cmd_assimilate(args: argparse.Namespace) -> int:
    if args.sweep:
        spans: list[int | None] = list(CONSTANT_SPAN_SWEEP)
    else:
        spans = list(args.span) if args.span else [None]
    base = load_run_config(args, spans[0])
    if args.sweep and base.scenario != ScenarioKind.CONSTANT:
        raise AortaTwinError("--sweep applies to the constant scenario only")

    root = RunStore(base.output_dir)
    coarse, fine = build_meshes(base)
    truth = _reusable_truth(root, base)
    if truth is None:
        logger.info("No usable truth record, generating one")
        truth = produce_truth(base, coarse, fine, root)
        save_config(base, root.path(CONFIG_FILE))

    scenario = build_scenario(base)
    observations = make_observations(truth, scenario.hyperparameters.noise, base.seeds.noise)
    open_loop = run_open_loop(scenario, coarse, truth, fluid=base.forward_fluid, poisson=base.poisson)

    for span in spans:
        config = base if span is None or span == spans[0] else load_run_config(args, span)
        store = root if len(spans) == 1 else RunStore(root.run_dir / f"span_{config.hyperparameters.observation_span}")
        scenario = build_scenario(config)
        with logfire.span("assimilate span={span}", span=scenario.observation_span):
            record = run_assimilation(
                scenario,
                coarse,
                observations,
                truth,
                config.seeds.ensemble,
                fluid=config.forward_fluid,
                poisson=config.poisson,
                n_jobs=config.threads,
                keep_ensembles=config.export_ensembles,
            )
        extra = {
            "sensor_rmse": record.sensor_rmse,
            "open_loop_sensor_rmse": open_loop.sensor_rmse,
            "wss_truth_mean_pa": truth.wss_peak_mean,
            "wss_recon_mean_pa": record.wss_recon_peak_mean,
            "wss_truth_time_mean_pa": truth.wss_time_mean,
            "wss_recon_time_mean_pa": record.wss_recon_time_mean,
            "observation_span": scenario.observation_span,
            "span_s": scenario.observation_span * scenario.dt,
        }
        store.write_observations(observations, truth.sensors)
        store.write_assimilation_artifacts(
            record,
            truth,
            coarse,
            fine,
            config.forward_fluid,
            extra,
            export_fields=config.export_fields,
            export_ensembles=config.export_ensembles,
            include_state=config.export_ensemble_states,
        )
        save_config(config, store.path(CONFIG_FILE))
        log_run_summary(logger, record.report)
        print(f"span {scenario.observation_span * scenario.dt:.2f} s: MRE {record.mre:.3f}% -> {store.run_dir}")
    return 0


def metrics_files(out: Path) -> list[Path]:
    """metrics.txt in the run directory and its immediate sub-directories."""
    found = []
    if (out / METRICS_FILE).exists():
        found.append(out / METRICS_FILE)
    if out.is_dir():
        found.extend(sorted(p / METRICS_FILE for p in out.iterdir() if (p / METRICS_FILE).exists()))
    return found


def summary_table(rows: Sequence[dict[str, str]]) -> str:
    """Fixed-width span / MRE table, sorted by span."""

    def span_key(row: dict[str, str]) -> float:
        try:
            return float(row.get("span_s", "nan"))
        except ValueError:
            return float("inf")

    lines = [f"{'span (s)':>10}  {'MRE (%)':>10}"]
    for row in sorted(rows, key=span_key):
        span = span_key(row)
        try:
            mre = f"{float(row.get('mre_percent', 'nan')):10.3f}"
        except ValueError:
            mre = f"{'nan':>10}"
        lines.append(f"{span:10.2f}  {mre}")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    out = args.out or Path(load_run_config(args).output_dir)
    files = metrics_files(out)
    if not files:
        raise MissingInputError(f"no {METRICS_FILE} under {out}")
    rows = []
    for path in files:
        print(f"== {path}")
        print(path.read_text(encoding="utf-8").rstrip())
        rows.append(read_metrics(path))
    print()
    print(summary_table(rows))
    return 0


def cmd_export_vtk(args: argparse.Namespace) -> int:
    out = args.out
    if args.config is None and out is not None and (out / CONFIG_FILE).exists():
        args.config = out / CONFIG_FILE
    config = load_run_config(args)
    root = RunStore(config.output_dir)
    truth = root.load_truth()
    if truth is None:
        raise MissingInputError(f"no truth record under {root.run_dir}")

    coarse, fine = build_meshes(config)
    root.write_truth_vtk(truth.snapshots, fine, config.truth_fluid)
    written = len(truth.snapshots)
    run_dirs = [root.run_dir] + sorted(p for p in root.run_dir.iterdir() if p.is_dir())
    for run_dir in run_dirs:
        store = RunStore(run_dir)
        snapshots = store.load_reconstruction_snapshots()
        if snapshots:
            store.write_recon_vtk(snapshots, truth.snapshots, coarse, fine, config.forward_fluid)
            written += len(snapshots)
    print(f"Wrote {written} VTK snapshots under {root.run_dir}")
    return 0


COMMANDS = {
    "truth": cmd_truth,
    "assimilate": cmd_assimilate,
    "report": cmd_report,
    "export-vtk": cmd_export_vtk,
}


def cli(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one subcommand and return its exit status."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_dir, run_name=args.command)
    logfire.configure(service_name="aorta-twin", send_to_logfire="if-token-present", console=False)

    try:
        with logfire.span("aorta-twin {command}", command=args.command):
            return COMMANDS[args.command](args)
    except (MissingInputError, FileNotFoundError) as e:
        logger.error(f"Missing input: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (AortaTwinError, ValidationError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    """Console-script entry point."""
    try:
        sys.exit(cli())
    except KeyboardInterrupt:
        print("\nInterrupted.")
        sys.exit(130)


if __name__ == "__main__":
    main()

"""Operator entry point.

Subcommands: synth (generate a CSV dataset), ingest (validate a CSV), run
(full customization + sharing pass), worker (remote customization server),
predict (forecast the test day from a saved registry), report (emit run
metrics as JSON or CSV).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 connectivity
error, 5 integrity/format error. Log verbosity comes from SPEEDSHARE_LOG
(debug, info, warning, error).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import timedelta

import numpy as np

from . import coordinator, data, lstm, netproto
from .coordinator import RunConfig
from .errors import ConfigurationError, DataError, SpeedShareError
from .nmm import GridSpec, NmmConfig, test_profile_grid

log = logging.getLogger("speedshare")

SYNTH_CALIBRATION_RETRIES = 5


def _setup_logging() -> None:
    level_name = os.environ.get("SPEEDSHARE_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speedshare",
        description="Per-detector traffic speed prediction with model sharing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic detector CSV")
    p_synth.add_argument("--detectors", type=int, default=110)
    p_synth.add_argument("--patterns", type=int, default=31)
    p_synth.add_argument("--days", type=int, default=6)
    p_synth.add_argument("--noise", type=float, default=0.1, help="noise amplitude in mph")
    p_synth.add_argument("--seed", type=int, default=7)
    p_synth.add_argument("--thd-aard", type=float, default=0.1)
    p_synth.add_argument("--f", type=float, default=70.0)
    p_synth.add_argument("--out", required=True)

    p_ingest = sub.add_parser("ingest", help="validate a detector CSV")
    p_ingest.add_argument("--data", required=True)

    p_run = sub.add_parser("run", help="customize and share models over a dataset")
    p_run.add_argument("--data", required=True)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--sharing", choices=("on", "off"), default="on")
    p_run.add_argument("--thd-aard", type=float, default=0.1)
    p_run.add_argument("--thd-aare", type=float, default=0.05)
    p_run.add_argument("--f", type=float, default=70.0)
    p_run.add_argument("--window", type=int, default=12)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--mode", choices=("local", "distributed"), default="local")
    p_run.add_argument("--workers-endpoints", default="",
                       help="comma-separated host:port list for distributed mode")
    p_run.add_argument("--grid-profile", choices=("paper", "test"), default="paper")
    p_run.add_argument("--train-days", type=int, default=5)
    p_run.add_argument("--test-days", type=int, default=1)
    p_run.add_argument("--out", required=True)

    p_worker = sub.add_parser("worker", help="serve customization jobs for a master")
    p_worker.add_argument("--connect", required=True,
                          help="host:port this worker attaches to (the worker "
                               "binds it and waits for the master)")
    p_worker.add_argument("--worker-id", default=None)

    p_predict = sub.add_parser("predict", help="forecast the test day from a registry")
    p_predict.add_argument("--registry", required=True)
    p_predict.add_argument("--data", required=True)
    p_predict.add_argument("--out", required=True)

    p_report = sub.add_parser("report", help="emit metrics for a finished run")
    p_report.add_argument("--run", required=True)
    p_report.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def cmd_synth(args) -> int:
    noise = args.noise
    labels = [z % args.patterns for z in range(args.detectors)]
    library = data.default_pattern_library(args.patterns)
    for attempt in range(SYNTH_CALIBRATION_RETRIES):
        spec = data.SyntheticSpec(
            num_detectors=args.detectors,
            num_patterns=args.patterns,
            pattern_library=library,
            noise_amplitude=noise,
            days=args.days,
            seed=args.seed,
        )
        series_list = data.generate_synthetic(spec)
        report = data.verify_separation(series_list, args.f, args.thd_aard, labels)
        if report.passed:
            data.write_csv(series_list, args.out)
            print(
                f"wrote {args.detectors} detectors x {len(series_list[0])} points to {args.out}"
            )
            print(
                f"separation: pass (min cross {report.min_cross:.4f}, "
                f"max within {report.max_within:.4f}, threshold {report.threshold})"
            )
            return 0
        log.warning(
            "separation failed at noise %.4f (%d offending pairs); retrying",
            noise,
            len(report.offending_pairs),
        )
        noise *= 0.5
    print(
        f"separation: FAIL after {SYNTH_CALIBRATION_RETRIES} calibration retries "
        f"(min cross {report.min_cross:.4f}, max within {report.max_within:.4f})",
        file=sys.stderr,
    )
    return DataError.exit_code


def cmd_ingest(args) -> int:
    series_list = data.load_csv(args.data)
    print(f"{len(series_list)} detectors")
    for series in series_list:
        print(
            f"  {series.detector_id}: {len(series)} points from "
            f"{data.format_rfc3339(series.start_time)}, "
            f"speeds {series.values.min():.1f}..{series.values.max():.1f} mph"
        )
    return 0


def _run_config_from_args(args) -> RunConfig:
    grid = test_profile_grid() if args.grid_profile == "test" else GridSpec()
    nmm_config = NmmConfig(
        target_value=args.thd_aare,
        max_evaluations=10 if args.grid_profile == "test" else 50,
    )
    endpoints = tuple(e.strip() for e in args.workers_endpoints.split(",") if e.strip())
    return RunConfig(
        sharing_enabled=args.sharing == "on",
        worker_count=args.workers,
        thd_aard=args.thd_aard,
        thd_aare=args.thd_aare,
        norm_factor=args.f,
        window_length=args.window,
        grid=grid,
        nmm_config=nmm_config,
        run_seed=args.seed,
        mode=args.mode,
        worker_endpoints=endpoints,
        train_days=args.train_days,
        test_days=args.test_days,
    )


def cmd_run(args) -> int:
    series_list = data.load_csv(args.data)
    if not series_list:
        raise DataError(f"{args.data} contains no detectors")
    config = _run_config_from_args(args)
    report = coordinator.run(series_list, config)
    os.makedirs(args.out, exist_ok=True)
    coordinator.registry_save(report.assignments, config, args.out)
    coordinator.report_save(report, args.out)
    owned = sum(1 for a in report.assignments if a.kind == "owned")
    print(f"models customized: {owned}/{len(report.assignments)}")
    print(f"makespan: {report.makespan_seconds:.2f} s")
    print(
        f"average AARE {report.aggregate.average_aare:.4f}, "
        f"average AAE {report.aggregate.average_aae:.3f} mph, "
        f"average RMSE {report.aggregate.average_rmse:.3f} mph"
    )
    not_converged = [a.detector_id for a in report.assignments if not a.converged]
    if not_converged:
        print(
            f"warning: {len(not_converged)} detectors not converged: "
            + ", ".join(not_converged[:10])
            + ("..." if len(not_converged) > 10 else "")
        )
    print(f"run artifacts in {args.out}")
    return 0


def cmd_worker(args) -> int:
    print(f"worker serving on {args.connect}", flush=True)
    netproto.serve_worker(args.connect, worker_id=args.worker_id)
    return 0


def cmd_predict(args) -> int:
    assignments, config = coordinator.registry_load(args.registry)
    by_id = {a.detector_id: a for a in assignments}
    series_list = data.load_csv(args.data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["detector_id", "timestamp", "forecast_mph"])
        for series in series_list:
            assignment = by_id.get(series.detector_id)
            if assignment is None:
                raise DataError(
                    f"{series.detector_id}: not present in registry {args.registry}"
                )
            normalized = data.normalize(series, config.norm_factor)
            data_split = data.split(
                normalized, config.train_days, config.test_days,
                config.validation_fraction,
            )
            forecasts = lstm.predict_series(assignment.model, data_split.test)
            offset = len(series) - len(data_split.test) + config.window_length
            for k, value in enumerate(forecasts):
                ts = series.start_time + timedelta(seconds=(offset + k) * series.interval)
                writer.writerow(
                    [series.detector_id, data.format_rfc3339(ts), repr(float(value))]
                )
    print(f"wrote forecasts to {args.out}")
    return 0


def cmd_report(args) -> int:
    doc = coordinator.report_load_doc(args.run)
    if args.format == "json":
        json.dump(doc, sys.stdout, indent=2)
        print()
        return 0
    writer = csv.writer(sys.stdout)
    writer.writerow(
        ["detector_id", "kind", "donor_id", "converged", "validation_aare",
         "aare", "aae", "rmse"]
    )
    agg = doc["aggregate"]
    writer.writerow(
        ["__aggregate__", "", "", "", "",
         agg["average_aare"], agg["average_aae"], agg["average_rmse"]]
    )
    per_detector = {row["detector_id"]: row for row in agg["per_detector"]}
    for record in doc["assignments"]:
        row = per_detector[record["detector_id"]]
        writer.writerow(
            [
                record["detector_id"],
                record["kind"],
                record["donor_id"] or "",
                record["converged"],
                record["validation_aare"],
                row["aare"],
                row["aae"],
                row["rmse"],
            ]
        )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "run": cmd_run,
    "worker": cmd_worker,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SpeedShareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

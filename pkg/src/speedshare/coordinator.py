"""Master-node orchestration: sharing decisions, job dispatch, reporting.

One control flow processes detectors strictly in input order. A detector
whose normalized pattern sits within thd_aard of an earlier registry member
borrows that member's model (first match wins, not best match); otherwise
the detector joins the registry immediately and a customization job is
queued on the worker pool. Model slots fill as workers finish, so borrowers
can point at donors whose training is still running.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, replace

import numpy as np

from . import lstm, metrics
from .customizer import (
    CustomizationJob,
    CustomizationResult,
    customize,
    job_seed,
    result_from_doc,
    result_to_doc,
    trace_to_doc,
)
from .data import NormalizedSeries, normalize, split
from .errors import ConfigurationError, DataError, FormatError, IntegrityError
from .lstm import TrainingConfig
from .metrics import AggregateReport
from .nmm import GridSpec, NmmConfig

REGISTRY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    sharing_enabled: bool = True
    worker_count: int = 1
    thd_aard: float = 0.1
    thd_aare: float = 0.05
    norm_factor: float = 70.0
    window_length: int = 12
    grid: GridSpec = field(default_factory=GridSpec)
    nmm_config: NmmConfig = field(default_factory=NmmConfig)
    training_config: TrainingConfig = field(default_factory=TrainingConfig)
    run_seed: int = 0
    mode: str = "local"
    worker_endpoints: tuple = ()
    train_days: int = 5
    test_days: int = 1
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.worker_count < 1:
            raise ConfigurationError("worker_count must be at least 1")
        if self.thd_aard < 0 or self.thd_aare <= 0:
            raise ConfigurationError("thresholds must be positive")
        if self.mode not in ("local", "distributed"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "distributed" and not self.worker_endpoints:
            raise ConfigurationError("distributed mode needs worker endpoints")


@dataclass
class RegistryEntry:
    detector_id: str
    comparison: np.ndarray  # normalized training span, the AARD window
    result: CustomizationResult | None = None


@dataclass
class DetectorRegistry:
    """Detectors that own customized models, in append order."""

    members: list = field(default_factory=list)

    def append(self, detector_id: str, comparison: np.ndarray) -> RegistryEntry:
        entry = RegistryEntry(detector_id=detector_id, comparison=comparison)
        self.members.append(entry)
        return entry

    def find(self, detector_id: str) -> RegistryEntry:
        for entry in self.members:
            if entry.detector_id == detector_id:
                return entry
        raise IntegrityError(f"registry has no member {detector_id!r}")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Decision:
    kind: str  # "share" | "customize"
    donor_id: str | None = None
    matched_aard: float | None = None


@dataclass
class ModelAssignment:
    detector_id: str
    kind: str  # "owned" | "shared"
    donor_id: str | None = None
    matched_aard: float | None = None
    model: lstm.LstmModel | None = None
    converged: bool = False
    validation_aare: float | None = None


@dataclass
class RunReport:
    makespan_seconds: float
    model_count_curve: list
    assignments: list
    aggregate: AggregateReport
    converged_fraction: float
    processing_order: list
    config: RunConfig
    traces: dict


def process_detector(series: NormalizedSeries, registry: DetectorRegistry,
                     config: RunConfig) -> Decision:
    """Algorithm step for one unprocessed detector.

    Scans the registry in append order and shares on the FIRST member whose
    pattern difference (new detector in the denominator) is below thd_aard.
    Otherwise the detector is appended to the registry right away, before
    any training has happened.
    """
    comparison = series.values
    if config.sharing_enabled:
        for entry in registry.members:
            if entry.comparison.shape[0] != comparison.shape[0]:
                raise DataError(
                    f"{series.detector_id}: comparison window length "
                    f"{comparison.shape[0]} does not match {entry.detector_id}"
                )
            value = metrics.aard(comparison, entry.comparison)
            if value < config.thd_aard:
                return Decision(kind="share", donor_id=entry.detector_id,
                                matched_aard=value)
    registry.append(series.detector_id, comparison)
    return Decision(kind="customize")


def model_count_curve(assignments) -> list:
    """Prefix counts of owned assignments over processing order."""
    curve = []
    owned = 0
    for k, assignment in enumerate(assignments, start=1):
        if assignment.kind == "owned":
            owned += 1
        curve.append((k, owned))
    return curve


def _execute_job(job: CustomizationJob) -> CustomizationResult:
    return customize(job, job.nmm_config.target_value)


def _prepare(series_list, config: RunConfig):
    """Normalize and split every series; validate shared assumptions."""
    if not series_list:
        raise DataError("no detectors to process")
    lengths = {len(s) for s in series_list}
    if len(lengths) != 1:
        raise DataError(f"detector series lengths differ: {sorted(lengths)}")
    min_len = 2 * config.window_length + 2
    if lengths.pop() < min_len:
        raise DataError(f"series shorter than {min_len} points")
    ids = [s.detector_id for s in series_list]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate detector ids in input")
    prepared = []
    for series in series_list:
        normalized = normalize(series, config.norm_factor)
        data_split = split(
            normalized, config.train_days, config.test_days, config.validation_fraction
        )
        comparison = NormalizedSeries(
            detector_id=series.detector_id,
            values=data_split.training_span(),
            norm_factor=config.norm_factor,
        )
        prepared.append((series.detector_id, comparison, data_split))
    return prepared


def _make_job(detector_id: str, data_split, config: RunConfig) -> CustomizationJob:
    nmm_config = replace(config.nmm_config, target_value=config.thd_aare)
    return CustomizationJob(
        detector_id=detector_id,
        data_split=data_split,
        window_length=config.window_length,
        norm_factor=config.norm_factor,
        grid=config.grid,
        nmm_config=nmm_config,
        training_config=config.training_config,
        seed=job_seed(config.run_seed, detector_id),
    )


def run(series_list, config: RunConfig) -> RunReport:
    """Process every detector: decide share/customize, train, evaluate.

    The makespan clock starts at the first sharing decision and stops when
    the last model slot fills; evaluation of the test day happens after and
    is not part of the makespan, mirroring a customization-duration metric.
    """
    prepared = _prepare(series_list, config)
    registry = DetectorRegistry()
    assignments: list[ModelAssignment] = []
    jobs: list[CustomizationJob] = []

    if config.mode == "distributed":
        from . import netproto

        started = time.perf_counter()
        for detector_id, comparison, data_split in prepared:
            decision = process_detector(comparison, registry, config)
            assignments.append(_assignment_for(detector_id, decision))
            if decision.kind == "customize":
                jobs.append(_make_job(detector_id, data_split, config))
        results = netproto.dispatch_remote(
            config.worker_endpoints, [(job.detector_id, job) for job in jobs]
        )
        for detector_id, result in results.items():
            registry.find(detector_id).result = result
        finished = time.perf_counter()
    else:
        with ProcessPoolExecutor(max_workers=config.worker_count) as pool:
            started = time.perf_counter()
            futures = {}
            for detector_id, comparison, data_split in prepared:
                decision = process_detector(comparison, registry, config)
                assignments.append(_assignment_for(detector_id, decision))
                if decision.kind == "customize":
                    job = _make_job(detector_id, data_split, config)
                    futures[pool.submit(_execute_job, job)] = detector_id
            finished = started
            pending = set(futures)
            while pending:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                finished = time.perf_counter()
                for future in done:
                    result = future.result()
                    registry.find(futures[future]).result = result
            if not futures:
                finished = time.perf_counter()

    makespan = finished - started
    _resolve_assignments(assignments, registry)

    splits = {detector_id: data_split for detector_id, _, data_split in prepared}
    per_detector = [
        (a.detector_id, lstm.evaluate(a.model, splits[a.detector_id].test))
        for a in assignments
    ]
    aggregate = metrics.aggregate(per_detector)
    converged = sum(1 for a in assignments if a.converged)
    traces = {
        entry.detector_id: entry.result.trace
        for entry in registry.members
        if entry.result is not None
    }
    return RunReport(
        makespan_seconds=makespan,
        model_count_curve=model_count_curve(assignments),
        assignments=assignments,
        aggregate=aggregate,
        converged_fraction=converged / len(assignments),
        processing_order=[a.detector_id for a in assignments],
        config=config,
        traces=traces,
    )


def _assignment_for(detector_id: str, decision: Decision) -> ModelAssignment:
    if decision.kind == "share":
        return ModelAssignment(
            detector_id=detector_id,
            kind="shared",
            donor_id=decision.donor_id,
            matched_aard=decision.matched_aard,
        )
    return ModelAssignment(detector_id=detector_id, kind="owned")


def _resolve_assignments(assignments, registry: DetectorRegistry) -> None:
    for assignment in assignments:
        if assignment.kind == "owned":
            result = registry.find(assignment.detector_id).result
            if result is None:
                raise IntegrityError(
                    f"{assignment.detector_id}: customization never completed"
                )
            assignment.model = result.model
            assignment.converged = result.converged
            assignment.validation_aare = result.validation_aare
        else:
            donor = registry.find(assignment.donor_id)
            if donor.result is None:
                raise IntegrityError(
                    f"{assignment.detector_id}: donor {assignment.donor_id} "
                    "has no model"
                )
            assignment.model = donor.result.model
            assignment.converged = donor.result.converged
            assignment.validation_aare = donor.result.validation_aare


# --- persistence ---

def _config_to_doc(config: RunConfig) -> dict:
    return {
        "sharing_enabled": config.sharing_enabled,
        "worker_count": config.worker_count,
        "thd_aard": config.thd_aard,
        "thd_aare": config.thd_aare,
        "f": config.norm_factor,
        "window_length": config.window_length,
        "grid": {name: list(axis) for name, axis in config.grid.axes().items()},
        "nmm": {
            "alpha": config.nmm_config.alpha,
            "gamma": config.nmm_config.gamma,
            "rho": config.nmm_config.rho,
            "sigma": config.nmm_config.sigma,
            "target_value": config.nmm_config.target_value,
            "stddev_tol": config.nmm_config.stddev_tol,
            "max_evaluations": config.nmm_config.max_evaluations,
        },
        "training": {
            "batch_size": config.training_config.batch_size,
            "grad_clip_norm": config.training_config.grad_clip_norm,
            "seed": config.training_config.seed,
        },
        "run_seed": config.run_seed,
        "mode": config.mode,
        "worker_endpoints": list(config.worker_endpoints),
        "train_days": config.train_days,
        "test_days": config.test_days,
        "validation_fraction": config.validation_fraction,
    }


def config_from_doc(doc: dict) -> RunConfig:
    grid_doc = doc["grid"]
    return RunConfig(
        sharing_enabled=doc["sharing_enabled"],
        worker_count=doc["worker_count"],
        thd_aard=doc["thd_aard"],
        thd_aare=doc["thd_aare"],
        norm_factor=doc["f"],
        window_length=doc["window_length"],
        grid=GridSpec(
            learning_rate=tuple(grid_doc["learning_rate"]),
            layers=tuple(grid_doc["layers"]),
            units=tuple(grid_doc["units"]),
            epochs=tuple(grid_doc["epochs"]),
        ),
        nmm_config=NmmConfig(**doc["nmm"]),
        training_config=TrainingConfig(**doc["training"]),
        run_seed=doc["run_seed"],
        mode=doc["mode"],
        worker_endpoints=tuple(doc["worker_endpoints"]),
        train_days=doc["train_days"],
        test_days=doc["test_days"],
        validation_fraction=doc["validation_fraction"],
    )


def registry_save(assignments, config: RunConfig, directory) -> None:
    """Manifest plus one weight document per owned model. Shared
    assignments record only their donor."""
    os.makedirs(os.path.join(directory, "models"), exist_ok=True)
    records = []
    for assignment in assignments:
        record = {
            "detector_id": assignment.detector_id,
            "kind": assignment.kind,
            "converged": assignment.converged,
            "validation_aare": assignment.validation_aare,
        }
        if assignment.kind == "owned":
            record["model_file"] = f"models/{assignment.detector_id}.json"
            lstm.save_model(
                assignment.model, os.path.join(directory, record["model_file"])
            )
        else:
            record["donor_id"] = assignment.donor_id
            record["matched_aard"] = assignment.matched_aard
        records.append(record)
    manifest = {
        "format_version": REGISTRY_FORMAT_VERSION,
        "config": _config_to_doc(config),
        "assignments": records,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def registry_load(directory):
    """Rebuild assignments bit-exactly from a saved registry.

    Returns (assignments, RunConfig).
    """
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise IntegrityError(f"no manifest.json under {directory}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != REGISTRY_FORMAT_VERSION:
        raise FormatError(f"unsupported registry format_version {version!r}")
    config = config_from_doc(manifest["config"])

    assignments = []
    owned_models = {}
    for record in manifest["assignments"]:
        if record["kind"] == "owned":
            model_path = os.path.join(directory, record["model_file"])
            if not os.path.exists(model_path):
                raise IntegrityError(
                    f"{record['detector_id']}: missing model file {record['model_file']}"
                )
            model = lstm.load_model(model_path)
            owned_models[record["detector_id"]] = model
            assignments.append(
                ModelAssignment(
                    detector_id=record["detector_id"],
                    kind="owned",
                    model=model,
                    converged=record["converged"],
                    validation_aare=record["validation_aare"],
                )
            )
        else:
            assignments.append(
                ModelAssignment(
                    detector_id=record["detector_id"],
                    kind="shared",
                    donor_id=record["donor_id"],
                    matched_aard=record["matched_aard"],
                    converged=record["converged"],
                    validation_aare=record["validation_aare"],
                )
            )
    for assignment in assignments:
        if assignment.kind == "shared":
            if assignment.donor_id not in owned_models:
                raise IntegrityError(
                    f"{assignment.detector_id}: donor {assignment.donor_id!r} "
                    "is not an owned model in this registry"
                )
            assignment.model = owned_models[assignment.donor_id]
    return assignments, config


def report_to_doc(report: RunReport) -> dict:
    return {
        "makespan_seconds": report.makespan_seconds,
        "model_count_curve": [list(point) for point in report.model_count_curve],
        "processing_order": report.processing_order,
        "converged_fraction": report.converged_fraction,
        "config": _config_to_doc(report.config),
        "assignments": [
            {
                "detector_id": a.detector_id,
                "kind": a.kind,
                "donor_id": a.donor_id,
                "matched_aard": a.matched_aard,
                "converged": a.converged,
                "validation_aare": a.validation_aare,
            }
            for a in report.assignments
        ],
        "aggregate": {
            "average_aare": report.aggregate.average_aare,
            "average_aae": report.aggregate.average_aae,
            "average_rmse": report.aggregate.average_rmse,
            "num_detectors": report.aggregate.num_detectors,
            "per_detector": [
                {
                    "detector_id": detector_id,
                    "aare": rep.aare,
                    "aae": rep.aae,
                    "rmse": rep.rmse,
                    "num_points": rep.num_points,
                }
                for detector_id, rep in report.aggregate.per_detector
            ],
        },
        "traces": {
            detector_id: trace_to_doc(trace)
            for detector_id, trace in report.traces.items()
        },
    }


def report_save(report: RunReport, directory) -> None:
    with open(os.path.join(directory, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report_to_doc(report), fh, indent=2)


def report_load_doc(directory) -> dict:
    path = os.path.join(directory, "report.json")
    if not os.path.exists(path):
        raise IntegrityError(f"no report.json under {directory}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

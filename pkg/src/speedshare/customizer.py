"""Worker-side model customization for one detector.

Wraps LSTM training plus validation error into the objective the simplex
search minimizes. Everything is a pure function of the job contents, so a
job produces the same result on any worker, local or remote.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import lstm, nmm
from .data import DatasetSplit, NormalizedSeries
from .errors import TrainingError
from .lstm import HyperparameterSetting, LstmModel, TrainingConfig
from .nmm import GridSpec, NmmConfig, SearchTrace

# Initial setting from which every search starts: the cheapest corner of the
# production grid. Projected onto the job's grid when they differ.
DEFAULT_START = HyperparameterSetting(learning_rate=0.01, layers=1, units=2, epochs=100)


@dataclass(frozen=True)
class CustomizationJob:
    detector_id: str
    data_split: DatasetSplit
    window_length: int
    norm_factor: float
    grid: GridSpec
    nmm_config: NmmConfig
    training_config: TrainingConfig
    seed: int


@dataclass(frozen=True)
class CustomizationResult:
    detector_id: str
    best_setting: HyperparameterSetting
    model: LstmModel
    validation_aare: float
    converged: bool
    evaluations: int
    wall_time: float
    trace: SearchTrace


def job_seed(run_seed: int, detector_id: str) -> int:
    """Stable per-detector seed; independent of detector ordering."""
    digest = hashlib.sha256(f"job:{run_seed}:{detector_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _train_at(job: CustomizationJob, vertex: HyperparameterSetting):
    model = lstm.init_model(vertex, job.window_length, job.norm_factor, job.seed)
    samples = _training_samples(job)
    return lstm.train(model, samples, job.training_config)


def _training_samples(job: CustomizationJob):
    values = job.data_split.train.values
    count = len(values) - job.window_length
    return [
        (values[k : k + job.window_length], float(values[k + job.window_length]))
        for k in range(count)
    ]


def objective_for(job: CustomizationJob, thd_aare: float):
    """Vertex -> validation error closure, with a handle on the best model.

    Training failures surface as +inf objective values, never exceptions.
    The closure keeps the model of the best vertex seen so far (first
    strict improvement wins) so customize() can avoid one retraining.
    """

    state = {"best_value": math.inf, "best_vertex": None, "best_model": None}

    def objective(vertex: HyperparameterSetting) -> float:
        try:
            model, _ = _train_at(job, vertex)
            report = lstm.evaluate(model, job.data_split.validation)
        except TrainingError:
            return math.inf
        value = report.aare
        if value < state["best_value"]:
            state["best_value"] = value
            state["best_vertex"] = vertex
            state["best_model"] = model
        return value

    objective.state = state
    return objective


def customize(job: CustomizationJob, thd_aare: float, objective=None) -> CustomizationResult:
    """Search the grid for this detector and return its trained model.

    The search targets thd_aare on the validation slice. Non-convergence is
    a normal outcome: the best model found is still returned, flagged.
    An injected objective (tests) replaces the training pipeline inside the
    search; the returned model is then retrained at the best vertex.
    """
    started = time.perf_counter()
    real_objective = objective_for(job, thd_aare)
    search_objective = objective if objective is not None else real_objective
    start_vertex = nmm.project_to_grid(DEFAULT_START.as_tuple(), job.grid)
    config = job.nmm_config
    if config.target_value != thd_aare:
        config = NmmConfig(
            alpha=config.alpha,
            gamma=config.gamma,
            rho=config.rho,
            sigma=config.sigma,
            target_value=thd_aare,
            stddev_tol=config.stddev_tol,
            max_evaluations=config.max_evaluations,
        )
    best_vertex, best_value, trace = nmm.minimize(
        search_objective, start_vertex, job.grid, config
    )

    state = real_objective.state
    if state["best_vertex"] == best_vertex and state["best_model"] is not None:
        model = state["best_model"]
    else:
        # Injected objective, or the model cache missed: retrain. Training is
        # deterministic, so this reproduces the searched model bit-for-bit.
        model, _ = _train_at(job, best_vertex)

    return CustomizationResult(
        detector_id=job.detector_id,
        best_setting=best_vertex,
        model=model,
        validation_aare=best_value,
        converged=best_value <= thd_aare,
        evaluations=trace.evaluation_count,
        wall_time=time.perf_counter() - started,
        trace=trace,
    )


# --- serialization (wire format and registry reuse) ---

def _series_to_doc(series: NormalizedSeries) -> dict:
    return {
        "detector_id": series.detector_id,
        "values": series.values.tolist(),
        "f": series.norm_factor,
    }


def _series_from_doc(doc: dict) -> NormalizedSeries:
    return NormalizedSeries(
        detector_id=doc["detector_id"],
        values=np.asarray(doc["values"], dtype=np.float64),
        norm_factor=float(doc["f"]),
    )


def job_to_doc(job: CustomizationJob) -> dict:
    return {
        "detector_id": job.detector_id,
        "split": {
            "train": _series_to_doc(job.data_split.train),
            "validation": _series_to_doc(job.data_split.validation),
            "test": _series_to_doc(job.data_split.test),
        },
        "window_length": job.window_length,
        "f": job.norm_factor,
        "grid": {name: list(axis) for name, axis in job.grid.axes().items()},
        "nmm": {
            "alpha": job.nmm_config.alpha,
            "gamma": job.nmm_config.gamma,
            "rho": job.nmm_config.rho,
            "sigma": job.nmm_config.sigma,
            "target_value": job.nmm_config.target_value,
            "stddev_tol": job.nmm_config.stddev_tol,
            "max_evaluations": job.nmm_config.max_evaluations,
        },
        "training": {
            "batch_size": job.training_config.batch_size,
            "grad_clip_norm": job.training_config.grad_clip_norm,
            "seed": job.training_config.seed,
        },
        "seed": job.seed,
    }


def job_from_doc(doc: dict) -> CustomizationJob:
    grid_doc = doc["grid"]
    split_doc = doc["split"]
    return CustomizationJob(
        detector_id=doc["detector_id"],
        data_split=DatasetSplit(
            train=_series_from_doc(split_doc["train"]),
            validation=_series_from_doc(split_doc["validation"]),
            test=_series_from_doc(split_doc["test"]),
        ),
        window_length=int(doc["window_length"]),
        norm_factor=float(doc["f"]),
        grid=GridSpec(
            learning_rate=tuple(grid_doc["learning_rate"]),
            layers=tuple(grid_doc["layers"]),
            units=tuple(grid_doc["units"]),
            epochs=tuple(grid_doc["epochs"]),
        ),
        nmm_config=NmmConfig(**doc["nmm"]),
        training_config=TrainingConfig(**doc["training"]),
        seed=int(doc["seed"]),
    )


def _encode_value(value: float):
    return value if math.isfinite(value) else "inf"


def _decode_value(raw) -> float:
    return math.inf if raw == "inf" else float(raw)


def trace_to_doc(trace: SearchTrace) -> dict:
    return {
        "entries": [
            {
                "vertex": list(entry.vertex.as_tuple()),
                "value": _encode_value(entry.value),
                "kind": entry.kind,
            }
            for entry in trace.entries
        ],
        "evaluation_count": trace.evaluation_count,
        "termination_reason": trace.termination_reason,
    }


def trace_from_doc(doc: dict) -> SearchTrace:
    trace = SearchTrace(
        evaluation_count=int(doc["evaluation_count"]),
        termination_reason=doc["termination_reason"],
    )
    for record in doc["entries"]:
        lr, layers, units, epochs = record["vertex"]
        trace.entries.append(
            nmm.TraceEntry(
                vertex=HyperparameterSetting(
                    learning_rate=float(lr),
                    layers=int(layers),
                    units=int(units),
                    epochs=int(epochs),
                ),
                value=_decode_value(record["value"]),
                kind=record["kind"],
            )
        )
    return trace


def result_to_doc(result: CustomizationResult) -> dict:
    return {
        "detector_id": result.detector_id,
        "best_setting": list(result.best_setting.as_tuple()),
        "model": lstm.model_to_doc(result.model),
        "validation_aare": _encode_value(result.validation_aare),
        "converged": result.converged,
        "evaluations": result.evaluations,
        "wall_time": result.wall_time,
        "trace": trace_to_doc(result.trace),
    }


def result_from_doc(doc: dict) -> CustomizationResult:
    lr, layers, units, epochs = doc["best_setting"]
    return CustomizationResult(
        detector_id=doc["detector_id"],
        best_setting=HyperparameterSetting(
            learning_rate=float(lr),
            layers=int(layers),
            units=int(units),
            epochs=int(epochs),
        ),
        model=lstm.model_from_doc(doc["model"]),
        validation_aare=_decode_value(doc["validation_aare"]),
        converged=bool(doc["converged"]),
        evaluations=int(doc["evaluations"]),
        wall_time=float(doc["wall_time"]),
        trace=trace_from_doc(doc["trace"]),
    )

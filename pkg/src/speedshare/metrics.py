"""Error and similarity metrics for speed series comparison.

All metrics accumulate in double precision with plain index-order summation
(no pairwise or compensated tricks) so independent implementations can be
compared bit-for-bit. Denominators are clamped to a small floor instead of
dropping terms, which keeps the averaging count stable when traffic stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# Denominator floors: normalized ratios for aard, mph for aare.
AARD_DENOM_FLOOR = 1e-3
AARE_DENOM_FLOOR = 0.1


@dataclass(frozen=True)
class EvaluationReport:
    """Per-detector accuracy: relative error, absolute error (mph), RMSE (mph)."""

    aare: float
    aae: float
    rmse: float
    num_points: int

    def __post_init__(self):
        if self.num_points < 1:
            raise DataError("evaluation report needs at least one compared point")
        # Quadratic mean dominates arithmetic mean; allow fp slack.
        if self.rmse < self.aae - 1e-9 * max(self.aae, 1.0):
            raise DataError(
                f"rmse {self.rmse} below aae {self.aae}; metrics are inconsistent"
            )


@dataclass(frozen=True)
class AggregateReport:
    """Fleet-level averages over per-detector evaluation reports."""

    average_aare: float
    average_aae: float
    average_rmse: float
    num_detectors: int
    per_detector: tuple = field(default_factory=tuple)


def _ordered_sum(terms: np.ndarray) -> float:
    # cumsum adds strictly left to right, matching a plain loop accumulator.
    return float(np.cumsum(terms)[-1])


def _as_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    return arr


def _paired(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    a = _as_array(actual, "actual")
    f = _as_array(forecast, "forecast")
    if a.shape[0] != f.shape[0]:
        raise DataError(f"length mismatch: {a.shape[0]} actual vs {f.shape[0]} forecast")
    if a.shape[0] == 0:
        raise DataError("cannot compare empty series")
    return a, f


def aard(new_values, reference_values) -> float:
    """Average absolute relative difference between two normalized series.

    Asymmetric on purpose: the denominator is the series of the detector under
    comparison (the first argument), so aard(a, b) != aard(b, a) in general.
    """
    n_i, n_j = _paired(new_values, reference_values)
    denom = np.maximum(n_i, AARD_DENOM_FLOOR)
    return _ordered_sum(np.abs(n_i - n_j) / denom) / n_i.shape[0]


def aare(actual_mph, forecast_mph) -> float:
    """Average absolute relative error between actual and forecast speeds."""
    a, f = _paired(actual_mph, forecast_mph)
    denom = np.maximum(a, AARE_DENOM_FLOOR)
    return _ordered_sum(np.abs(a - f) / denom) / a.shape[0]


def aae(actual_mph, forecast_mph) -> float:
    """Average absolute error in mph."""
    a, f = _paired(actual_mph, forecast_mph)
    return _ordered_sum(np.abs(a - f)) / a.shape[0]


def rmse(actual_mph, forecast_mph) -> float:
    """Root mean square error in mph."""
    a, f = _paired(actual_mph, forecast_mph)
    d = a - f
    return float(np.sqrt(_ordered_sum(d * d) / a.shape[0]))


def evaluation_report(actual_mph, forecast_mph) -> EvaluationReport:
    """Bundle aare/aae/rmse over one actual-vs-forecast comparison."""
    a, f = _paired(actual_mph, forecast_mph)
    return EvaluationReport(
        aare=aare(a, f),
        aae=aae(a, f),
        rmse=rmse(a, f),
        num_points=a.shape[0],
    )


def aggregate(per_detector) -> AggregateReport:
    """Arithmetic means of per-detector reports.

    Accepts a list of (detector_id, EvaluationReport) pairs.
    """
    pairs = list(per_detector)
    if not pairs:
        raise DataError("aggregate requires at least one detector report")
    z = len(pairs)
    return AggregateReport(
        average_aare=_ordered_sum(np.array([r.aare for _, r in pairs])) / z,
        average_aae=_ordered_sum(np.array([r.aae for _, r in pairs])) / z,
        average_rmse=_ordered_sum(np.array([r.rmse for _, r in pairs])) / z,
        num_detectors=z,
        per_detector=tuple(pairs),
    )

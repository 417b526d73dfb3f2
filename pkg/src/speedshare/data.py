"""Speed-series ingestion, normalization, splitting, windowing, and synthesis.

Raw series are mph readings at a fixed 5-minute cadence. Everything here is
pure over immutable inputs; missing or irregular data is rejected, never
imputed.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import CadenceError, ConfigurationError, DataError, ParseError
from .metrics import AARD_DENOM_FLOOR

INTERVAL_SECONDS = 300
POINTS_PER_DAY = 86400 // INTERVAL_SECONDS  # 288
CSV_HEADER = ("detector_id", "timestamp", "speed_mph")

# Arbitrary but fixed epoch for generated datasets.
SYNTH_START = datetime(2021, 3, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SpeedSeries:
    """One detector's mph readings at a uniform 5-minute cadence."""

    detector_id: str
    start_time: datetime
    values: np.ndarray
    interval: int = INTERVAL_SECONDS

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.interval != INTERVAL_SECONDS:
            raise ConfigurationError(
                f"interval must be {INTERVAL_SECONDS} s, got {self.interval}"
            )
        if self.values.ndim != 1:
            raise DataError(f"{self.detector_id}: values must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.detector_id}: non-finite speed value")
        if np.any(self.values < 0):
            raise DataError(f"{self.detector_id}: negative speed value")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormalizedSeries:
    """Dimensionless speed ratios: source values divided by norm_factor (mph)."""

    detector_id: str
    values: np.ndarray
    norm_factor: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.norm_factor <= 0:
            raise ConfigurationError(f"norm factor must be positive, got {self.norm_factor}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def denormalized(self) -> np.ndarray:
        return self.values * self.norm_factor


@dataclass(frozen=True)
class DatasetSplit:
    """Chronological train / validation / test partition of one series."""

    train: NormalizedSeries
    validation: NormalizedSeries
    test: NormalizedSeries

    def training_span(self) -> np.ndarray:
        """Everything before the test segment, in order."""
        return np.concatenate([self.train.values, self.validation.values])


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic multi-detector dataset.

    Detector z gets pattern z mod num_patterns, so every base pattern is used
    and cluster membership is known by construction.
    """

    num_detectors: int
    num_patterns: int
    pattern_library: tuple
    noise_amplitude: float
    days: int
    seed: int

    def __post_init__(self):
        if self.num_patterns > self.num_detectors:
            raise ConfigurationError(
                f"num_patterns {self.num_patterns} exceeds num_detectors {self.num_detectors}"
            )
        if self.num_patterns < 1:
            raise ConfigurationError("need at least one pattern")
        if len(self.pattern_library) != self.num_patterns:
            raise ConfigurationError(
                f"pattern_library has {len(self.pattern_library)} entries, "
                f"expected {self.num_patterns}"
            )
        if self.noise_amplitude < 0:
            raise ConfigurationError("noise_amplitude must be non-negative")
        if self.days < 1:
            raise ConfigurationError("days must be at least 1")
        for k, profile in enumerate(self.pattern_library):
            arr = np.asarray(profile, dtype=np.float64)
            if arr.shape != (POINTS_PER_DAY,):
                raise ConfigurationError(
                    f"pattern {k} must have {POINTS_PER_DAY} points, got {arr.shape}"
                )

    def pattern_index(self, detector_index: int) -> int:
        return detector_index % self.num_patterns


@dataclass(frozen=True)
class SeparationReport:
    """Outcome of the pairwise cluster-separation check."""

    passed: bool
    threshold: float
    min_cross: float
    max_within: float
    offending_pairs: tuple = field(default_factory=tuple)


def _parse_rfc3339(text: str) -> datetime:
    cleaned = text.strip()
    if cleaned.endswith(("Z", "z")):
        cleaned = cleaned[:-1] + "+00:00"
    ts = datetime.fromisoformat(cleaned)
    if ts.tzinfo is None:
        raise ValueError("missing UTC offset")
    return ts.astimezone(timezone.utc)


def format_rfc3339(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_csv(path) -> list[SpeedSeries]:
    """Read `detector_id,timestamp,speed_mph` rows into per-detector series.

    Rows are grouped by detector (first-appearance order), sorted by
    timestamp, and validated for a strict 300-second cadence.
    """
    rows_by_detector: dict[str, list[tuple[datetime, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        if tuple(col.strip() for col in header) != CSV_HEADER:
            raise ParseError(
                f"line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"line {line_no}: expected 3 columns, got {len(row)}")
            detector_id, ts_text, speed_text = (cell.strip() for cell in row)
            if not detector_id:
                raise ParseError(f"line {line_no}: empty detector_id")
            try:
                ts = _parse_rfc3339(ts_text)
            except ValueError as exc:
                raise ParseError(f"line {line_no}: bad timestamp {ts_text!r} ({exc})") from exc
            if not speed_text:
                raise DataError(f"line {line_no}: missing speed value")
            try:
                speed = float(speed_text)
            except ValueError as exc:
                raise ParseError(f"line {line_no}: bad speed {speed_text!r}") from exc
            if not np.isfinite(speed):
                raise DataError(f"line {line_no}: non-finite speed {speed_text!r}")
            if speed < 0:
                raise DataError(f"line {line_no}: negative speed {speed}")
            rows_by_detector.setdefault(detector_id, []).append((ts, speed))

    series_list = []
    for detector_id, rows in rows_by_detector.items():
        rows.sort(key=lambda item: item[0])
        for (t_prev, _), (t_next, _) in zip(rows, rows[1:]):
            gap = (t_next - t_prev).total_seconds()
            if gap != INTERVAL_SECONDS:
                raise CadenceError(
                    f"{detector_id}: expected {INTERVAL_SECONDS} s between "
                    f"{format_rfc3339(t_prev)} and {format_rfc3339(t_next)}, got {gap:.0f} s"
                )
        series_list.append(
            SpeedSeries(
                detector_id=detector_id,
                start_time=rows[0][0],
                values=np.array([speed for _, speed in rows], dtype=np.float64),
            )
        )
    return series_list


def write_csv(series_list, path) -> None:
    """Emit the ingestion schema; floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for series in series_list:
            for k, value in enumerate(series.values):
                ts = series.start_time + timedelta(seconds=k * series.interval)
                writer.writerow([series.detector_id, format_rfc3339(ts), repr(float(value))])


def normalize(series: SpeedSeries, norm_factor: float) -> NormalizedSeries:
    """Divide every reading by norm_factor (typically the 70 mph speed limit)."""
    if norm_factor <= 0:
        raise ConfigurationError(f"norm factor must be positive, got {norm_factor}")
    return NormalizedSeries(
        detector_id=series.detector_id,
        values=series.values / norm_factor,
        norm_factor=norm_factor,
    )


def split(
    series: NormalizedSeries,
    train_days: int,
    test_days: int,
    validation_fraction: float,
) -> DatasetSplit:
    """Partition into train / validation / test, all chronological.

    The test segment is the final test_days; the validation segment is the
    trailing validation_fraction of the remaining training span. The series
    must contain exactly train_days + test_days full days.
    """
    if train_days < 1 or test_days < 1:
        raise ConfigurationError("train_days and test_days must be positive")
    if not 0 < validation_fraction < 1:
        raise ConfigurationError(
            f"validation_fraction must be in (0, 1), got {validation_fraction}"
        )
    expected = (train_days + test_days) * POINTS_PER_DAY
    if len(series) != expected:
        raise DataError(
            f"{series.detector_id}: expected exactly {expected} points for "
            f"{train_days}+{test_days} days, got {len(series)}"
        )
    test_points = test_days * POINTS_PER_DAY
    span = len(series) - test_points
    val_points = int(round(validation_fraction * span))
    if val_points < 1 or val_points >= span:
        raise ConfigurationError(
            f"validation_fraction {validation_fraction} leaves no usable split"
        )

    def segment(lo: int, hi: int) -> NormalizedSeries:
        return NormalizedSeries(
            detector_id=series.detector_id,
            values=series.values[lo:hi],
            norm_factor=series.norm_factor,
        )

    return DatasetSplit(
        train=segment(0, span - val_points),
        validation=segment(span - val_points, span),
        test=segment(span, len(series)),
    )


def window(segment: NormalizedSeries, window_length: int):
    """Stride-1 sliding windows paired with the next value as target."""
    if window_length < 1:
        raise ConfigurationError(f"window_length must be positive, got {window_length}")
    values = segment.values
    if len(values) <= window_length:
        raise DataError(
            f"{segment.detector_id}: segment of {len(values)} points cannot "
            f"produce windows of length {window_length}"
        )
    return [
        (values[k : k + window_length].copy(), float(values[k + window_length]))
        for k in range(len(values) - window_length)
    ]


def _detector_rng(seed: int, detector_index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"synth:{seed}:{detector_index}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "big")))


def generate_synthetic(spec: SyntheticSpec) -> list[SpeedSeries]:
    """Render the spec: per detector, its base pattern tiled over days plus
    seeded uniform noise, clamped at zero. Byte-identical for equal specs."""
    series_list = []
    for z in range(spec.num_detectors):
        profile = np.asarray(spec.pattern_library[spec.pattern_index(z)], dtype=np.float64)
        clean = np.tile(profile, spec.days)
        rng = _detector_rng(spec.seed, z)
        noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=clean.shape)
        values = np.maximum(clean + noise, 0.0)
        series_list.append(
            SpeedSeries(
                detector_id=f"d{z:03d}",
                start_time=SYNTH_START,
                values=values,
            )
        )
    return series_list


def default_pattern_library(num_patterns: int, swing: float = 0.058) -> tuple:
    """Distinct daily speed profiles with guaranteed pairwise contrast.

    Each profile is a two-level day: a busy half and a quiet half joined by
    smooth one-hour ramps, sitting `swing` above and below a base speed.
    Profiles pair a geometric base-speed ladder with the two orientations
    (busy-first or quiet-first). Opposite orientations at the same base
    differ by 2 * swing everywhere, and bases one rung apart differ by ~12%,
    so every pair of patterns clears the usual 0.1 similarity threshold.
    The profiles are flat almost everywhere, which keeps one-step-ahead
    forecasting easy for small models.
    """
    if num_patterns < 1:
        raise ConfigurationError("need at least one pattern")
    num_levels = -(-num_patterns // 2)  # ceil: two orientations per level
    low, high = 20.0, 110.0
    if num_levels == 1:
        levels = [0.5 * (low + high)]
    else:
        ratio = (high / low) ** (1.0 / (num_levels - 1))
        levels = [low * ratio**g for g in range(num_levels)]
    t = np.arange(POINTS_PER_DAY, dtype=np.float64)
    half = POINTS_PER_DAY / 2.0
    ramp = 12.0  # one-hour transition
    # Smooth square wave: +1 on the first half-day, -1 on the second.
    phase_dist = np.minimum(np.abs(t - half / 2), POINTS_PER_DAY - np.abs(t - half / 2))
    shape = np.clip((half / 2 + ramp / 2 - phase_dist) / ramp, 0.0, 1.0) * 2.0 - 1.0
    smooth = np.sin(shape * np.pi / 2)  # rounds the ramp corners
    library = []
    for k in range(num_patterns):
        level = levels[k // 2]
        orientation = 1.0 if k % 2 == 0 else -1.0
        library.append(level * (1.0 + swing * orientation * smooth))
    return tuple(library)


def pairwise_aard_matrix(series_list, norm_factor: float) -> np.ndarray:
    """M[i, j] = aard with series i as the denominator side, for all pairs."""
    lengths = {len(s) for s in series_list}
    if len(lengths) > 1:
        raise DataError(f"series lengths differ: {sorted(lengths)}")
    stacked = np.stack([s.values for s in series_list]) / norm_factor
    z = stacked.shape[0]
    matrix = np.zeros((z, z))
    for i in range(z):
        denom = np.maximum(stacked[i], AARD_DENOM_FLOOR)
        matrix[i] = np.mean(np.abs(stacked[i] - stacked) / denom, axis=1)
    return matrix


def verify_separation(series_list, norm_factor: float, thd_aard: float, labels) -> SeparationReport:
    """Check that same-label pairs sit below thd_aard and different-label
    pairs above it, in both comparison directions."""
    series_list = list(series_list)
    labels = list(labels)
    if len(labels) != len(series_list):
        raise ConfigurationError(
            f"{len(labels)} labels for {len(series_list)} series"
        )
    if not series_list:
        raise DataError("no series to verify")
    matrix = pairwise_aard_matrix(series_list, norm_factor)
    offending = []
    min_cross = np.inf
    max_within = 0.0
    z = len(series_list)
    for i in range(z):
        for j in range(z):
            if i == j:
                continue
            value = matrix[i, j]
            if labels[i] == labels[j]:
                max_within = max(max_within, value)
                if value >= thd_aard:
                    offending.append(
                        (series_list[i].detector_id, series_list[j].detector_id, value, "within")
                    )
            else:
                min_cross = min(min_cross, value)
                if value <= thd_aard:
                    offending.append(
                        (series_list[i].detector_id, series_list[j].detector_id, value, "cross")
                    )
    return SeparationReport(
        passed=not offending,
        threshold=thd_aard,
        min_cross=float(min_cross),
        max_within=float(max_within),
        offending_pairs=tuple(offending),
    )

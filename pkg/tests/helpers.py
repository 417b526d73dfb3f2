"""Shared fixtures-in-code: naive metric oracles and dataset builders.

The naive oracles are deliberately plain Python loops, independent of the
vectorized implementations they check.
"""

from __future__ import annotations

import math

import numpy as np

from speedshare.coordinator import RunConfig
from speedshare.data import SyntheticSpec, default_pattern_library, generate_synthetic
from speedshare.lstm import TrainingConfig
from speedshare.nmm import GridSpec, NmmConfig, test_profile_grid


def naive_aard(n_i, n_j, floor=1e-3):
    total = 0.0
    for a, b in zip(n_i, n_j):
        total += abs(a - b) / max(a, floor)
    return total / len(n_i)


def naive_aare(actual, forecast, floor=0.1):
    total = 0.0
    for s, f in zip(actual, forecast):
        total += abs(s - f) / max(s, floor)
    return total / len(actual)


def naive_aae(actual, forecast):
    total = 0.0
    for s, f in zip(actual, forecast):
        total += abs(s - f)
    return total / len(actual)


def naive_rmse(actual, forecast):
    total = 0.0
    for s, f in zip(actual, forecast):
        total += (s - f) ** 2
    return math.sqrt(total / len(actual))


def synth_series(num_detectors, num_patterns, days=6, noise=0.1, seed=7):
    spec = SyntheticSpec(
        num_detectors=num_detectors,
        num_patterns=num_patterns,
        pattern_library=default_pattern_library(num_patterns),
        noise_amplitude=noise,
        days=days,
        seed=seed,
    )
    return generate_synthetic(spec)


def quick_run_config(**overrides):
    """Config tuned for fast unit tests: tiny epoch grid, few evaluations."""
    defaults = dict(
        sharing_enabled=True,
        worker_count=1,
        grid=GridSpec(epochs=(5, 10, 5)),
        nmm_config=NmmConfig(target_value=0.05, max_evaluations=4),
        training_config=TrainingConfig(),
        run_seed=42,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def test_profile_run_config(**overrides):
    """The CI profile used by the acceptance suite."""
    defaults = dict(
        sharing_enabled=True,
        worker_count=1,
        grid=test_profile_grid(),
        nmm_config=NmmConfig(target_value=0.05, max_evaluations=10),
        training_config=TrainingConfig(),
        run_seed=42,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def assignments_signature(assignments):
    """Comparable projection of a run's assignments (order preserved)."""
    return [
        (a.detector_id, a.kind, a.donor_id, a.matched_aard, a.converged,
         a.validation_aare)
        for a in assignments
    ]


def weights_blob(model):
    arrays = []
    for layer in range(model.setting.layers):
        arrays.extend([model.wx[layer], model.wh[layer], model.biases[layer]])
    arrays.append(model.out_weights)
    arrays.append(np.array([model.out_bias]))
    return np.concatenate([a.ravel() for a in arrays])

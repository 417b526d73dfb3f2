import math

import numpy as np
import pytest

from helpers import naive_aae, naive_aard, naive_aare, naive_rmse
from speedshare.errors import DataError
from speedshare.metrics import (
    EvaluationReport,
    aae,
    aard,
    aare,
    aggregate,
    evaluation_report,
    rmse,
)


class TestHandCases:
    def test_aard_identical_series_is_zero(self):
        x = [0.3, 0.7, 1.0]
        assert aard(x, x) == 0.0

    def test_aard_hand_value(self):
        # (0.1/0.5 + 0.1/1.0) / 2
        assert aard([0.5, 1.0], [0.6, 0.9]) == pytest.approx(0.15, rel=1e-12)

    def test_aard_zero_denominator_guard(self):
        # matching zeros contribute nothing even with the clamp
        assert aard([0.0, 1.0], [0.0, 1.0]) == 0.0

    def test_aard_is_not_symmetric(self):
        # regression: the denominator side matters
        a, b = [0.5, 1.0], [0.6, 0.9]
        assert aard(a, b) != aard(b, a)

    def test_aare_hand_value(self):
        assert aare([60.0, 70.0], [63.0, 70.0]) == pytest.approx(0.025, rel=1e-12)

    def test_aare_single_point(self):
        assert aare([50.0], [55.0]) == pytest.approx(0.1, rel=1e-12)

    def test_aare_identical(self):
        assert aare([60.0, 70.0], [60.0, 70.0]) == 0.0

    def test_aae_hand_value(self):
        assert aae([60.0, 70.0], [63.0, 66.0]) == pytest.approx(3.5, rel=1e-12)

    def test_aae_zero_actual_has_no_denominator_issue(self):
        assert aae([0.0], [5.0]) == 5.0

    def test_rmse_hand_value(self):
        assert rmse([60.0, 70.0], [63.0, 66.0]) == pytest.approx(
            math.sqrt(12.5), rel=1e-12
        )

    def test_rmse_equals_aae_for_constant_errors(self):
        actual = [10.0, 20.0, 30.0]
        forecast = [12.0, 22.0, 32.0]
        assert rmse(actual, forecast) == pytest.approx(aae(actual, forecast), rel=1e-12)


class TestErrors:
    def test_length_mismatch(self):
        with pytest.raises(DataError):
            aare([1.0, 2.0], [1.0])

    def test_empty_series(self):
        with pytest.raises(DataError):
            aae([], [])

    def test_aard_length_mismatch(self):
        with pytest.raises(DataError):
            aard([1.0], [1.0, 2.0])


class TestProperties:
    def test_rmse_dominates_aae(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.integers(1, 40)
            actual = rng.uniform(0.0, 90.0, n)
            forecast = actual + rng.normal(0.0, 5.0, n)
            assert rmse(actual, forecast) >= aae(actual, forecast) - 1e-12

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(1, 60))
            actual = rng.uniform(0.0, 90.0, n)
            forecast = rng.uniform(0.0, 90.0, n)
            ni = rng.uniform(0.0, 1.3, n)
            nj = rng.uniform(0.0, 1.3, n)
            assert aard(ni, nj) == pytest.approx(naive_aard(ni, nj), rel=1e-12)
            assert aare(actual, forecast) == pytest.approx(
                naive_aare(actual, forecast), rel=1e-12
            )
            assert aae(actual, forecast) == pytest.approx(
                naive_aae(actual, forecast), rel=1e-12
            )
            assert rmse(actual, forecast) == pytest.approx(
                naive_rmse(actual, forecast), rel=1e-12
            )


class TestAggregate:
    def test_single_report(self):
        report = evaluation_report([50.0, 60.0], [51.0, 59.0])
        agg = aggregate([("d0", report)])
        assert agg.average_aare == report.aare
        assert agg.average_aae == report.aae
        assert agg.average_rmse == report.rmse
        assert agg.num_detectors == 1

    def test_two_reports_mean(self):
        r1 = EvaluationReport(aare=0.02, aae=1.0, rmse=1.5, num_points=10)
        r2 = EvaluationReport(aare=0.04, aae=2.0, rmse=2.5, num_points=10)
        agg = aggregate([("a", r1), ("b", r2)])
        assert agg.average_aare == pytest.approx(0.03, rel=1e-12)

    def test_averages_match_means_exactly(self):
        rng = np.random.default_rng(3)
        pairs = []
        for k in range(110):
            actual = rng.uniform(10.0, 80.0, 30)
            forecast = actual + rng.normal(0.0, 2.0, 30)
            pairs.append((f"d{k:03d}", evaluation_report(actual, forecast)))
        agg = aggregate(pairs)
        mean_aare = sum(r.aare for _, r in pairs) / len(pairs)
        assert agg.average_aare == pytest.approx(mean_aare, rel=1e-12)
        assert agg.num_detectors == 110

    def test_empty_is_an_error(self):
        with pytest.raises(DataError):
            aggregate([])

    def test_report_rejects_rmse_below_aae(self):
        with pytest.raises(DataError):
            EvaluationReport(aare=0.1, aae=5.0, rmse=1.0, num_points=3)

    def test_report_rejects_zero_points(self):
        with pytest.raises(DataError):
            EvaluationReport(aare=0.0, aae=0.0, rmse=0.0, num_points=0)

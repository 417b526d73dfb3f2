import numpy as np
import pytest

from helpers import synth_series
from speedshare.data import (
    POINTS_PER_DAY,
    SpeedSeries,
    SyntheticSpec,
    default_pattern_library,
    generate_synthetic,
    load_csv,
    normalize,
    split,
    verify_separation,
    window,
    write_csv,
)
from speedshare.errors import (
    CadenceError,
    ConfigurationError,
    DataError,
    ParseError,
)

HEADER = "detector_id,timestamp,speed_mph\n"


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCsv:
    def test_two_detectors_three_rows(self, tmp_path):
        rows = HEADER
        for d in ("a", "b"):
            for k in range(3):
                rows += f"{d},2021-03-01T00:{k*5:02d}:00Z,{50 + k}\n"
        series = load_csv(write(tmp_path, rows))
        assert len(series) == 2
        assert all(len(s) == 3 for s in series)
        assert series[0].detector_id == "a"
        assert list(series[0].values) == [50.0, 51.0, 52.0]

    def test_gap_names_detector(self, tmp_path):
        rows = HEADER
        rows += "d1,2021-03-01T00:00:00Z,50\n"
        rows += "d1,2021-03-01T00:10:00Z,51\n"  # 600 s gap
        with pytest.raises(CadenceError, match="d1"):
            load_csv(write(tmp_path, rows))

    def test_empty_file_is_empty_list(self, tmp_path):
        assert load_csv(write(tmp_path, "")) == []

    def test_unsorted_rows_are_sorted(self, tmp_path):
        rows = HEADER
        rows += "a,2021-03-01T00:05:00Z,51\n"
        rows += "a,2021-03-01T00:00:00Z,50\n"
        series = load_csv(write(tmp_path, rows))
        assert list(series[0].values) == [50.0, 51.0]

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError, match="line 1"):
            load_csv(write(tmp_path, "id,time,speed\na,2021-03-01T00:00:00Z,50\n"))

    def test_malformed_row_names_line(self, tmp_path):
        rows = HEADER + "a,2021-03-01T00:00:00Z,50\n" + "a,not-a-time,51\n"
        with pytest.raises(ParseError, match="line 3"):
            load_csv(write(tmp_path, rows))

    def test_missing_speed_is_data_error(self, tmp_path):
        rows = HEADER + "a,2021-03-01T00:00:00Z,\n"
        with pytest.raises(DataError, match="line 2"):
            load_csv(write(tmp_path, rows))

    def test_negative_speed_rejected(self, tmp_path):
        rows = HEADER + "a,2021-03-01T00:00:00Z,-4\n"
        with pytest.raises(DataError):
            load_csv(write(tmp_path, rows))

    def test_naive_timestamp_rejected(self, tmp_path):
        rows = HEADER + "a,2021-03-01T00:00:00,50\n"
        with pytest.raises(ParseError):
            load_csv(write(tmp_path, rows))

    def test_round_trip_is_exact(self, tmp_path):
        series = synth_series(2, 2, days=1)
        path = tmp_path / "rt.csv"
        write_csv(series, path)
        loaded = load_csv(path)
        for original, back in zip(series, loaded):
            assert back.detector_id == original.detector_id
            assert np.array_equal(back.values, original.values)


class TestNormalize:
    def test_speed_limit_maps_to_one(self):
        series = SpeedSeries("d", np.datetime64("2021-03-01").astype("O"), [70.0])
        # start_time type is irrelevant to normalize
        assert normalize(series, 70.0).values[0] == 1.0

    def test_zero_maps_to_zero(self):
        series = synth_series(1, 1, days=1)[0]
        values = normalize(series, 70.0).values
        assert values.shape == series.values.shape

    def test_hand_values(self):
        s = SpeedSeries("d", None, [35.0, 70.0])
        assert list(normalize(s, 70.0).values) == [0.5, 1.0]

    def test_non_positive_factor(self):
        s = SpeedSeries("d", None, [35.0])
        with pytest.raises(ConfigurationError):
            normalize(s, 0.0)

    def test_round_trip_within_one_ulp(self):
        series = synth_series(3, 3, days=1, noise=0.3)
        for s in series:
            back = normalize(s, 70.0).denormalized()
            assert np.all(np.abs(back - s.values) <= np.spacing(s.values))


class TestSplit:
    def make(self, days=6):
        series = synth_series(1, 1, days=days)[0]
        return normalize(series, 70.0)

    def test_six_day_partition(self):
        sp = split(self.make(), 5, 1, 0.2)
        assert len(sp.train) == 1152
        assert len(sp.validation) == 288
        assert len(sp.test) == 288

    def test_partition_is_exact(self):
        norm = self.make()
        sp = split(norm, 5, 1, 0.2)
        rebuilt = np.concatenate([sp.train.values, sp.validation.values, sp.test.values])
        assert np.array_equal(rebuilt, norm.values)

    def test_zero_fraction_rejected(self):
        with pytest.raises(ConfigurationError):
            split(self.make(), 5, 1, 0.0)

    def test_insufficient_days(self):
        with pytest.raises(DataError):
            split(self.make(days=5), 5, 1, 0.2)


class TestWindow:
    def test_unrolled_example(self):
        from speedshare.data import NormalizedSeries

        seg = NormalizedSeries("d", [0.1, 0.2, 0.3, 0.4], 70.0)
        samples = window(seg, 2)
        assert len(samples) == 2
        assert list(samples[0][0]) == [0.1, 0.2]
        assert samples[0][1] == pytest.approx(0.3)
        assert list(samples[1][0]) == [0.2, 0.3]
        assert samples[1][1] == pytest.approx(0.4)

    def test_boundary_single_sample(self):
        from speedshare.data import NormalizedSeries

        seg = NormalizedSeries("d", np.linspace(0, 1, 13), 70.0)
        assert len(window(seg, 12)) == 1

    def test_too_short(self):
        from speedshare.data import NormalizedSeries

        seg = NormalizedSeries("d", np.linspace(0, 1, 12), 70.0)
        with pytest.raises(DataError):
            window(seg, 12)

    def test_windows_do_not_straddle_split(self):
        norm = TestSplit().make()
        sp = split(norm, 5, 1, 0.2)
        train_samples = window(sp.train, 12)
        # the last training target is the last training value, never validation
        assert train_samples[-1][1] == sp.train.values[-1]


class TestSynthetic:
    def test_zero_noise_duplicates(self):
        lib = default_pattern_library(2)
        spec = SyntheticSpec(4, 2, lib, 0.0, 1, seed=3)
        series = generate_synthetic(spec)
        assert np.array_equal(series[0].values, series[2].values)
        assert np.array_equal(series[1].values, series[3].values)
        from speedshare.metrics import aard

        assert aard(series[0].values / 70.0, series[2].values / 70.0) == 0.0

    def test_determinism(self):
        a = synth_series(5, 3, seed=9)
        b = synth_series(5, 3, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.values, y.values)

    def test_seed_changes_output(self):
        a = synth_series(2, 2, seed=1)
        b = synth_series(2, 2, seed=2)
        assert not np.array_equal(a[0].values, b[0].values)

    def test_k_greater_than_z_rejected(self):
        lib = default_pattern_library(5)
        with pytest.raises(ConfigurationError):
            SyntheticSpec(3, 5, lib, 0.1, 1, seed=1)

    def test_values_never_negative(self):
        series = synth_series(4, 2, noise=50.0, seed=5)
        for s in series:
            assert np.all(s.values >= 0)


class TestSeparation:
    def test_zero_noise_two_clusters_pass(self):
        series = synth_series(4, 2, days=1, noise=0.0)
        report = verify_separation(series, 70.0, 0.1, [0, 1, 0, 1])
        assert report.passed
        assert report.max_within == 0.0

    def test_identical_series_labeled_differently_fail(self):
        series = synth_series(2, 1, days=1, noise=0.0)
        report = verify_separation(series, 70.0, 0.1, [0, 1])
        assert not report.passed
        ids = {(i, j) for i, j, _, kind in report.offending_pairs}
        assert ("d000", "d001") in ids

    def test_length_mismatch(self):
        series = synth_series(2, 2, days=1)
        short = SpeedSeries("dX", series[0].start_time, series[0].values[:100])
        with pytest.raises(DataError):
            verify_separation([series[0], short], 70.0, 0.1, [0, 1])

    def test_default_library_is_separated(self):
        series = synth_series(12, 6, days=1, noise=0.1)
        report = verify_separation(series, 70.0, 0.1, [z % 6 for z in range(12)])
        assert report.passed

import numpy as np
import pytest

from disttse.evaluate import NullModel, OracleExtractor
from disttse.sweep import SweepConfig, SweepCurve, detect_peaks, mae_eval, sweep, window_sum


def two_speaker_oracle(d1, d2, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    s = [0.05 * rng.standard_normal(n), 0.05 * rng.standard_normal(n)]
    return s[0] + s[1], OracleExtractor(s, [d1, d2])


def test_grid_has_ten_points():
    g = SweepConfig().grid()
    assert len(g) == 10 and g[0] == 0.5 and g[-1] == 5.0
    np.testing.assert_allclose(np.diff(g), 0.5)


def test_null_model_flat_curve_without_peaks():
    y = np.random.default_rng(1).standard_normal(4000)
    curve = sweep(NullModel(), y)
    assert np.ptp(curve.point_scores) == 0
    assert np.ptp(curve.scores) == 0
    assert detect_peaks(curve) == []


def test_oracle_peaks_at_speaker_distances():
    y, oracle = two_speaker_oracle(1.5, 3.5)
    peaks = detect_peaks(sweep(oracle, y))
    assert sorted(p[0] for p in peaks) == [1.5, 3.5]


def test_csv_columns(tmp_path):
    y, oracle = two_speaker_oracle(1.0, 4.0)
    sweep(oracle, y).save_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "d_q,point_iSDR,windowed_score" and len(lines) == 11


def curve(scores):
    scores = np.asarray(scores, float)
    return SweepCurve(np.arange(1, len(scores) + 1) * 0.5, scores, scores)


class TestDetectPeaks:
    def test_two_isolated_peaks(self):
        peaks = detect_peaks(curve([0, 5, 0, 0, 4, 0]))
        assert [p[0] for p in peaks] == [1.0, 2.5]

    def test_monotone_has_single_endpoint_peak(self):
        assert [p[0] for p in detect_peaks(curve([0, 1, 2, 3, 4, 5]))] == [3.0]

    def test_flat_has_none(self):
        assert detect_peaks(curve([2, 2, 2, 2])) == []

    def test_small_bumps_rejected(self):
        assert [p[0] for p in detect_peaks(curve([0, 10, 9, 11, 0]))] == [2.0]

    def test_invariant_to_constant_offset(self):
        s = np.array([1.0, 7, 2, 3, 9, 0, 4])
        assert [p[0] for p in detect_peaks(curve(s))] == [p[0] for p in detect_peaks(curve(s - 40))]

    def test_plateau_reported_once(self):
        assert [p[0] for p in detect_peaks(curve([0, 5, 5, 0]))] == [1.25]


def test_window_sum_centered():
    g = np.arange(1, 6) * 0.5
    np.testing.assert_allclose(window_sum(g, np.array([0, 0, 1.0, 0, 0]), 1.0), [0, 1, 1, 1, 0])
    np.testing.assert_allclose(window_sum(g, np.ones(5), 1.0), [2, 3, 3, 3, 2])
    np.testing.assert_allclose(window_sum(g, np.ones(5), 1.0, compensate=True), 3.0)


class TestMae:
    def test_exact(self):
        assert mae_eval([[(1.5, 0.0)], [(3.0, 0.0)]], [[1.5, 4.0], [3.0]])["mae"] == 0

    def test_nearest_of_two(self):
        assert mae_eval([2.0], [[1.8, 4.0]])["mae"] == pytest.approx(0.2)

    def test_nearest_truth(self):
        assert mae_eval([2.0], [[1.0, 2.5]])["mae"] == pytest.approx(0.5)

    def test_missing_counted(self):
        out = mae_eval([[], 1.0], [[1.0], [1.5]])
        assert out == {"mae": 0.5, "n": 1, "n_missed": 1}


def test_oracle_grid_aligned_exact():
    rng = np.random.default_rng(3)
    errs = []
    for t in range(20):
        d = rng.choice(SweepConfig().grid(), 2, replace=False)
        if abs(d[0] - d[1]) < 1.5:
            continue
        y, oracle = two_speaker_oracle(*d, n=2000, seed=t)
        errs.append(detect_peaks(sweep(oracle, y)))
        assert mae_eval([errs[-1]], [list(d)])["mae"] == 0


def test_oracle_between_grid_points_within_half_step():
    rng = np.random.default_rng(4)
    for t in range(50):
        d = rng.uniform(1.0, 4.5)
        y, oracle = two_speaker_oracle(d, 0.5 if d > 2.75 else 5.0, n=1600, seed=t)
        peaks = detect_peaks(sweep(oracle, y))
        assert min(abs(p[0] - d) for p in peaks) <= 0.25 + 1e-9

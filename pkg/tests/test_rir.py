import json
import logging

import numpy as np
import pytest
from scipy.stats import spearmanr

from disttse.audio import Waveform, save_wav
from disttse.rir import (DRR_CAP_DB, DecayRangeError, GeometryError, Rir, RirStore, RoomSpec,
                         compute_drr, estimate_rt60, ingest_real_rir, load_real_manifest,
                         simulate_rir)

FS = 16000
D1 = RoomSpec((7, 8, 3), 0.2)
MIC = np.array([3.5, 4.0, 1.1])


def synthetic_decay(rt60, seconds=0.6, seed=0):
    t = np.arange(int(seconds * FS)) / FS
    noise = np.random.default_rng(seed).standard_normal(len(t))
    return noise * np.exp(-t * 3 * np.log(10) / rt60)


def test_anechoic_direct_tap_position():
    src = MIC + np.array([3.43, 0.0, 0.0])
    r = simulate_rir(D1, src, MIC, max_order=0, rng=np.random.default_rng(0))
    assert int(np.argmax(np.abs(r.ir))) == 160
    assert np.count_nonzero(r.ir) == 1


def test_anechoic_inverse_distance_amplitude():
    a = simulate_rir(D1, MIC + [1.0, 0, 0], MIC, max_order=0).ir.max()
    b = simulate_rir(D1, MIC + [2.0, 0, 0], MIC, max_order=0).ir.max()
    assert a / b == pytest.approx(2.0, rel=0.01)


def test_d1_rt60_matches_target():
    r = simulate_rir(D1, [1.5, 2.0, 1.6], MIC, rng=np.random.default_rng(1))
    assert 0.15 <= estimate_rt60(r) <= 0.25


@pytest.mark.parametrize("bad", [MIC, [8.0, 4.0, 1.5], [3.0, 4.0, -0.1]])
def test_invalid_geometry(bad):
    with pytest.raises(GeometryError):
        simulate_rir(D1, bad, MIC)


def test_deterministic_given_seed():
    a = simulate_rir(D1, [2, 2, 1.5], MIC, rng=np.random.default_rng(7)).ir
    b = simulate_rir(D1, [2, 2, 1.5], MIC, rng=np.random.default_rng(7)).ir
    c = simulate_rir(D1, [2, 2, 1.5], MIC, rng=np.random.default_rng(8)).ir
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_distance_matches_geometry():
    r = simulate_rir(D1, [1.0, 6.5, 1.9], MIC)
    assert r.distance == pytest.approx(np.linalg.norm(np.array([1.0, 6.5, 1.9]) - MIC), abs=1e-6)


def test_default_max_order_and_length():
    assert D1.default_max_order() == 24  # ceil(343*0.2/3) + 1
    assert RoomSpec((4, 5, 2.5), 0.5).default_max_order() == 40
    assert D1.default_length() == 4800


class TestRt60:
    def test_synthetic_decay(self):
        assert estimate_rt60(synthetic_decay(0.2)) == pytest.approx(0.2, rel=0.05)

    def test_time_scaling_doubles(self):
        a = estimate_rt60(synthetic_decay(0.2))
        b = estimate_rt60(synthetic_decay(0.4, seconds=1.2))
        assert b / a == pytest.approx(2.0, rel=0.05)

    def test_single_impulse_below_measurable(self):
        ir = np.zeros(1000)
        ir[10] = 1.0
        with pytest.raises(DecayRangeError, match="below measurable"):
            estimate_rt60(ir)

    def test_calibration_moves_toward_target(self):
        room = RoomSpec((8.0, 10.0, 2.6), 0.4)
        rng = np.random.default_rng(3)
        sabine = estimate_rt60(simulate_rir(room, [2, 3, 1.5], [5, 6, 1.2], rng=rng))
        tuned = estimate_rt60(simulate_rir(room.calibrated(), [2, 3, 1.5], [5, 6, 1.2], rng=rng))
        assert abs(tuned / 0.4 - 1) < abs(sabine / 0.4 - 1)
        assert tuned == pytest.approx(0.4, rel=0.15)


class TestDrr:
    def test_anechoic_capped(self):
        r = simulate_rir(D1, [2, 2, 1.5], MIC, max_order=0)
        assert compute_drr(r) == DRR_CAP_DB

    def test_equal_energy_tail_is_zero_db(self):
        ir = np.zeros(4000)
        ir[100] = 1.0
        tail = np.random.default_rng(0).standard_normal(3000)
        ir[800:3800] = tail / np.linalg.norm(tail)
        r = Rir(ir, [0, 0, 0], [100 / FS * 343, 0, 0], 100 / FS * 343, "real", "x")
        assert compute_drr(r) == pytest.approx(0.0, abs=0.1)

    def test_window_exceeding_ir(self):
        r = Rir(np.ones(50), [0, 0, 0], [1, 0, 0], 1.0, "real", "x")
        with pytest.raises(ValueError):
            compute_drr(r, 2.5)


def test_ingest_real_rir(tmp_path):
    ir = np.zeros(8000)
    ir[30] = 1.0
    save_wav(tmp_path / "r.wav", Waveform(ir, 8000))
    r = ingest_real_rir(tmp_path / "r.wav", [0, 0, 1], [1, 0, 1])
    assert r.distance == pytest.approx(1.0)
    assert r.room == "real" and r.sample_rate == FS and len(r.ir) == 16000
    with pytest.raises(ValueError, match="mic_pos"):
        ingest_real_rir(tmp_path / "r.wav", None, [1, 0, 1])


def _write_real_manifest(tmp_path, n_train, n_test, distance=1.0):
    save_wav(tmp_path / "r.wav", Waveform(np.r_[1.0, np.zeros(99)]))
    lines = []
    for i in range(n_train + n_test):
        lines.append(json.dumps({"id": f"r{i}", "wav": "r.wav", "mic_pos": [0, 0, 1],
                                 "src_pos": [distance, 0, 1], "room_id": "Q301",
                                 "split": "train" if i < n_train else "test"}))
    (tmp_path / "real.jsonl").write_text("\n".join(lines))
    return tmp_path / "real.jsonl"


def test_real_manifest_split_preserved(tmp_path):
    pairs = load_real_manifest(_write_real_manifest(tmp_path, 624, 182))
    splits = [s for _, s in pairs]
    assert len(pairs) == 806 and splits.count("train") == 624 and splits.count("test") == 182


def test_real_manifest_range_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        load_real_manifest(_write_real_manifest(tmp_path, 1, 0, distance=12.0))
    assert "outside documented range" in caplog.text


def test_store_round_trip(tmp_path):
    rirs = [(simulate_rir(D1, [2 + i, 2, 1.5], MIC, rng=np.random.default_rng(i), rir_id=f"r{i}"), "train")
            for i in range(3)]
    store = RirStore.write(tmp_path, rirs)
    rec = store.record("r1")
    assert set(rec) >= {"id", "wav", "mic_pos", "src_pos", "distance_m", "rt60_s", "room_dims", "split"}
    loaded = store.load("r1")
    np.testing.assert_allclose(loaded.ir, rirs[1][0].ir.astype(np.float32))
    assert loaded.distance == pytest.approx(rirs[1][0].distance, abs=1e-6)


def test_direct_delay_slope():
    rng = np.random.default_rng(0)
    d, idx = [], []
    for _ in range(20):
        src = np.array([rng.uniform(0.5, 6.5), rng.uniform(0.5, 7.5), rng.uniform(1.2, 2.0)])
        r = simulate_rir(D1, src, MIC, rng=rng)
        d.append(r.distance)
        idx.append(r.direct_index)
    slope = np.polyfit(d, idx, 1)[0]
    assert slope == pytest.approx(FS / 343, rel=0.02)


def test_drr_falls_with_distance():
    rng = np.random.default_rng(1)
    d, drr = [], []
    for _ in range(50):
        src = np.array([rng.uniform(0.5, 6.5), rng.uniform(0.5, 7.5), rng.uniform(1.2, 2.0)])
        r = simulate_rir(D1, src, MIC, rng=rng)
        d.append(r.distance)
        drr.append(compute_drr(r))
    assert spearmanr(d, drr).statistic < -0.5

import json
import time

import numpy as np
import pytest

from kvsim import probe as pb
from kvsim import rng
from kvsim.latency import LatencyModelConfig

CAPACITY_TOKENS = 16_000


def gap_for_usage(usage, noise_gen=None, noise_frac=0.0):
    """Reference gap model: the decode-iteration duration at a usage level."""
    cfg = LatencyModelConfig(noise_stddev_frac=0.0)
    base = cfg.decode_floor_us + usage * CAPACITY_TOKENS \
        * cfg.kv_bytes_per_token / cfg.bw_hbm * 1e6
    if noise_gen is not None and noise_frac > 0:
        factor = min(max(noise_gen.normal(1.0, noise_frac), 0.5), 2.0)
        base *= factor
    return max(1, int(round(base)))


def make_window(usage, noise_gen=None, noise_frac=0.0, n=8):
    gaps = [gap_for_usage(usage, noise_gen, noise_frac) for _ in range(n)]
    return pb.ItlWindow(gaps_us=gaps, request_id=0, t_end_us=0)


def make_samples(per_bin=80, noise_frac=0.0, n_bins=10, seed=0):
    gen = rng.stream(seed, "test.samples")
    samples = []
    for b in range(n_bins):
        for _ in range(per_bin):
            usage = (b + float(gen.uniform(0.02, 0.98))) / n_bins
            window = make_window(usage, gen, noise_frac)
            samples.append(pb.LabeledSample(
                pb.extract_features(window), b))
    return samples


class TestFeatures:
    def test_constant_gaps(self):
        window = pb.ItlWindow([50] * 8)
        f = pb.extract_features(window)
        named = dict(zip(pb.FEATURE_NAMES, f))
        assert named["mean"] == 50
        assert named["stddev"] == 0
        assert named["trend_slope"] == 0
        assert named["min"] == named["max"] == 50

    def test_ramp_gaps(self):
        window = pb.ItlWindow([10, 20, 30, 40, 50, 60, 70, 80])
        f = dict(zip(pb.FEATURE_NAMES, pb.extract_features(window)))
        assert f["mean"] == 45
        assert f["trend_slope"] == pytest.approx(10.0)
        assert f["last_gap"] == 80
        assert f["p95"] == 80   # nearest-rank over 8 values

    def test_window_too_short(self):
        with pytest.raises(pb.WindowTooShort):
            pb.extract_features(pb.ItlWindow([1] * 7))


class TestTraining:
    def test_noiseless_accuracy(self):
        result = pb.train(make_samples(per_bin=60), seed=1)
        assert result.holdout_accuracy >= 0.95

    def test_default_noise_accuracy(self):
        result = pb.train(make_samples(per_bin=80, noise_frac=0.05), seed=1)
        assert result.holdout_accuracy >= 0.85

    def test_missing_bin_rejected(self):
        samples = [s for s in make_samples(per_bin=60) if s.true_bin != 9]
        with pytest.raises(pb.InsufficientCoverage):
            pb.train(samples, seed=1)

    def test_too_few_samples_rejected(self):
        with pytest.raises(pb.InsufficientCoverage):
            pb.train(make_samples(per_bin=20), seed=1)

    def test_training_deterministic(self, tmp_path):
        samples = make_samples(per_bin=55, noise_frac=0.05)
        a = pb.train(samples, seed=7)
        b = pb.train(samples, seed=7)
        pa, pb_ = tmp_path / "a.json", tmp_path / "b.json"
        a.model.save(str(pa))
        b.model.save(str(pb_))
        assert pa.read_bytes() == pb_.read_bytes()

    def test_oracle_equivalence_on_noiseless_data(self):
        # brute-force optimal mean-ITL threshold classifier as the reference
        samples = make_samples(per_bin=60)
        result = pb.train(samples, seed=1)
        mean_idx = pb.FEATURE_NAMES.index("mean")
        means = np.array([s.features[mean_idx] for s in samples])
        bins = np.array([s.true_bin for s in samples])
        thresholds = []
        for b in range(9):
            lo = means[bins == b].max()
            hi = means[bins == b + 1].min()
            thresholds.append((lo + hi) / 2)
        oracle_pred = np.searchsorted(thresholds, means)
        oracle_acc = float((oracle_pred == bins).mean())
        assert oracle_acc == 1.0     # noiseless data is separable
        assert result.holdout_accuracy >= oracle_acc - 0.02


@pytest.fixture(scope="module")
def model():
    return pb.train(make_samples(per_bin=60), seed=1).model


class TestPredict:
    def test_low_usage_maps_to_bin_0(self, model):
        pred = pb.predict(model, make_window(0.02))
        assert pred.bin == 0
        assert pred.usage_estimate == pytest.approx(0.05)

    def test_high_usage_maps_to_top_bin(self, model):
        pred = pb.predict(model, make_window(0.97))
        assert pred.bin == 9
        assert pred.usage_estimate == pytest.approx(0.95)

    def test_prediction_deterministic(self, model):
        window = make_window(0.42)
        assert pb.predict(model, window) == pb.predict(model, window)

    def test_monotone_bin_sweep(self, model):
        bins = [pb.predict(model, make_window(u)).bin
                for u in np.linspace(0.005, 0.995, 100)]
        assert all(b2 >= b1 for b1, b2 in zip(bins, bins[1:]))

    def test_predict_latency_budget(self, model):
        window = make_window(0.5)
        pb.predict(model, window)  # warm
        start = time.perf_counter()
        for _ in range(20):
            pb.predict(model, window)
        per_call = (time.perf_counter() - start) / 20
        # must stay well under one simulated probe gap (~milliseconds)
        assert per_call < 0.05

    def test_round_trip_serialization(self, model, tmp_path):
        path = tmp_path / "model.json"
        model.save(str(path))
        loaded = pb.ProbeModel.load(str(path))
        window = make_window(0.63)
        assert pb.predict(loaded, window) == pb.predict(model, window)

    def test_version_check(self, model, tmp_path):
        path = tmp_path / "model.json"
        model.save(str(path))
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(pb.ProbeError):
            pb.ProbeModel.load(str(path))


class TestSampleCsv:
    def test_round_trip(self, tmp_path):
        samples = make_samples(per_bin=2, noise_frac=0.05)
        path = tmp_path / "windows.csv"
        pb.write_samples_csv(samples, str(path))
        loaded = pb.read_samples_csv(str(path))
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.true_bin == b.true_bin
            assert np.array_equal(a.features, b.features)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n1\n")
        with pytest.raises(pb.ProbeError):
            pb.read_samples_csv(str(path))

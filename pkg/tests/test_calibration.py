"""Temperature scaling, ECE binning, and the temperature-recovery oracle."""

import math
import warnings

import numpy as np
import pytest

from murmurkit.calibration import (ReliabilityBin, build_report, ece,
                                   ece_from_bins, fit_temperature, nll,
                                   reliability_data, scale, write_bins_csv)
from murmurkit.uncertainty import softmax


def sample_calibrated_set(n: int, seed: int, spread: float = 2.0):
    """Logits whose labels are drawn from their own softmax distribution."""
    gen = np.random.default_rng(seed)
    logits = gen.normal(0.0, spread, size=(n, 3))
    probs = softmax(logits)
    u = gen.random(n)
    cdf = probs.cumsum(axis=1)
    labels = (u[:, None] > cdf).sum(axis=1)
    return logits, labels


class TestScale:
    def test_identity_temperature(self):
        gen = np.random.default_rng(0)
        z = gen.standard_normal((20, 3))
        np.testing.assert_allclose(scale(z, 1.0), softmax(z), rtol=1e-12)

    def test_high_temperature_approaches_uniform(self):
        p = scale(np.array([2.0, 1.0, 0.0]), 1e4)
        assert np.abs(p - 1.0 / 3.0).max() < 1e-3

    def test_hand_scaled_softmax(self):
        p = scale(np.array([2.0, 1.0, 0.0]), 2.0)
        np.testing.assert_allclose(p, [0.5064, 0.3072, 0.1863], atol=1e-4)

    def test_argmax_preserved(self):
        gen = np.random.default_rng(1)
        z = gen.standard_normal((200, 3)) * 4
        for temperature in (0.1, 0.5, 1.0, 3.0, 19.0):
            np.testing.assert_array_equal(scale(z, temperature).argmax(axis=1),
                                          z.argmax(axis=1))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            scale(np.zeros((1, 3)), 0.0)


class TestFitTemperature:
    def test_recovers_unit_temperature(self):
        logits, labels = sample_calibrated_set(10_000, seed=7)
        fitted = fit_temperature(logits, labels)
        assert 0.9 <= fitted <= 1.1

    def test_recovers_scaling_factor(self):
        logits, labels = sample_calibrated_set(10_000, seed=7)
        fitted = fit_temperature(2.5 * logits, labels)
        assert 2.25 <= fitted <= 2.75

    def test_fit_never_hurts_validation_nll(self):
        for seed in range(5):
            gen = np.random.default_rng(seed)
            logits = gen.normal(0.0, 3.0, size=(500, 3))
            labels = gen.integers(0, 3, size=500)
            fitted = fit_temperature(logits, labels)
            assert nll(logits, labels, fitted) <= nll(logits, labels, 1.0) + 1e-12

    def test_identical_logits_conflicting_labels(self):
        logits = np.tile([3.0, 0.0, -1.0], (2, 1))
        labels = np.array([0, 1])
        fitted = fit_temperature(logits, labels)
        assert math.isfinite(fitted) and fitted > 0
        assert nll(logits, labels, fitted) <= nll(logits, labels, 1.0)

    def test_single_class_returns_one_with_warning(self):
        logits = np.random.default_rng(0).standard_normal((10, 3))
        with pytest.warns(UserWarning, match="single-class"):
            assert fit_temperature(logits, np.zeros(10, dtype=int)) == 1.0

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fit_temperature(np.zeros((0, 3)), np.zeros(0, dtype=int))


class TestEce:
    def test_single_sample(self):
        assert ece(np.array([0.8]), np.array([True])) == pytest.approx(0.2)

    def test_one_bin_partial_accuracy(self):
        conf = np.full(4, 0.9)
        correct = np.array([True, True, True, False])
        assert ece(conf, correct) == pytest.approx(abs(0.75 - 0.9))

    def test_perfectly_calibrated_bins(self):
        # accuracy equals confidence inside each occupied bin
        conf = np.array([0.75] * 4 + [0.5] * 2)
        correct = np.array([True, True, True, False, True, False])
        assert ece(conf, correct) == pytest.approx(0.0, abs=1e-12)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            ece(np.zeros(0), np.zeros(0, dtype=bool))

    def test_boundaries_total(self):
        # 0.0, 1.0 and every bin edge land in exactly one bin
        edges = np.linspace(0.0, 1.0, 16)
        bins = reliability_data(edges, np.ones(16, dtype=bool))
        assert sum(b.count for b in bins) == 16
        assert bins[-1].count == 2  # 14/15 edge and 1.0 both in the last bin


class TestReliability:
    def test_one_sample_per_bin(self):
        centers = (np.arange(15) + 0.5) / 15
        bins = reliability_data(centers, np.ones(15, dtype=bool))
        assert [b.count for b in bins] == [1] * 15
        for b, center in zip(bins, centers):
            assert b.lo <= center < b.hi
            assert b.avg_confidence == pytest.approx(center)

    def test_bins_recombine_to_same_ece(self):
        gen = np.random.default_rng(3)
        conf = gen.random(500)
        correct = gen.random(500) < conf
        bins = reliability_data(conf, correct)
        assert ece_from_bins(bins) == ece(conf, correct)

    def test_report_and_csv(self, tmp_path):
        gen = np.random.default_rng(4)
        conf_before = gen.random(100)
        correct = gen.random(100) < 0.7
        report = build_report("segment", 1.5, conf_before, correct,
                              conf_before * 0.9, correct)
        assert report.n == 100
        assert len(report.bins_before) == 15
        path = tmp_path / "bins.csv"
        write_bins_csv(path, report.bins_before)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count,avg_conf,accuracy"
        assert len(lines) == 16

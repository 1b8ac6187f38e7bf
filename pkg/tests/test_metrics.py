"""Metric formula and invariance tests."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afopt import metrics
from afopt.dsp import FrameSpec

SPEC = FrameSpec(64, 32)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSegmentalSnr:
    def test_perfect_estimate_clamps_high(self):
        d = rng(0).standard_normal(640)
        series = metrics.segmental_snr(d, d, SPEC)
        assert np.all(series.values == metrics.DB_CLAMP)
        assert series.mean == metrics.DB_CLAMP

    def test_quarter_error_energy(self):
        d = rng(1).standard_normal(640)
        y = d - 0.5 * d  # ||d - y||^2 = ||d||^2 / 4
        series = metrics.segmental_snr(d, y, SPEC)
        assert np.allclose(series.values, 10 * np.log10(4.0), atol=1e-9)

    def test_zero_estimate_is_zero_db(self):
        d = rng(2).standard_normal(640)
        series = metrics.segmental_snr(d, np.zeros_like(d), SPEC)
        assert np.allclose(series.values, 0.0, atol=1e-12)

    def test_mean_only_over_active_frames(self):
        d = np.concatenate([np.zeros(320), rng(3).standard_normal(320)])
        vad = metrics.energy_vad(d, SPEC)
        assert not vad.all() and vad.any()
        series = metrics.segmental_snr(d, np.zeros_like(d), SPEC, vad)
        assert series.mean == pytest.approx(
            float(np.mean(series.values[vad])))

    def test_frame_permutation_keeps_mean(self):
        d = rng(4).standard_normal(960)
        y = d + 0.1 * rng(5).standard_normal(960)
        series = metrics.segmental_snr(d, y, SPEC)
        perm = rng(6).permutation(series.values.size)
        assert np.mean(series.values[perm]) == pytest.approx(
            np.mean(series.values))

    def test_nonfinite_estimate_scores_worst(self):
        d = rng(7).standard_normal(640)
        y = d.copy()
        y[100] = np.inf
        series = metrics.segmental_snr(d, y, SPEC)
        assert np.all(np.isfinite(series.values))
        assert series.values.min() == -metrics.DB_CLAMP


class TestErle:
    def test_perfect_cancellation_clamps(self):
        echo = rng(8).standard_normal(640)
        assert metrics.erle(echo, echo, SPEC).values.max() == metrics.DB_CLAMP

    def test_zero_estimate_zero_db(self):
        echo = rng(9).standard_normal(640)
        series = metrics.erle(echo, np.zeros_like(echo), SPEC)
        assert np.allclose(series.values, 0.0, atol=1e-12)

    def test_half_residual_energy(self):
        echo = rng(10).standard_normal(640)
        y = echo - echo * np.sqrt(0.5)  # residual energy halved
        series = metrics.erle(echo, y, SPEC)
        assert np.allclose(series.values, 10 * np.log10(2.0), atol=1e-9)


class TestSrr:
    def test_passthrough_clamps_high(self):
        d = rng(11).standard_normal(640)
        assert np.all(metrics.srr(d, d, SPEC).values == metrics.DB_CLAMP)

    def test_halved_output(self):
        d = rng(12).standard_normal(640)
        series = metrics.srr(d, 0.5 * d, SPEC)
        assert np.allclose(series.values, 0.0, atol=1e-12)

    def test_formula_on_random_pair(self):
        d = rng(13).standard_normal(640)
        out = d + 0.3 * rng(14).standard_normal(640)
        series = metrics.srr(d, out, SPEC)
        # direct recomputation frame by frame
        for t in range(series.values.size):
            seg_d = d[t * 32:t * 32 + 64]
            seg_o = out[t * 32:t * 32 + 64]
            expect = 10 * np.log10(np.sum(seg_o ** 2)
                                   / np.sum((seg_d - seg_o) ** 2))
            assert series.values[t] == pytest.approx(expect, abs=1e-9)


class TestSnrW:
    def test_equal_magnitudes_clamp(self):
        w = np.abs(rng(15).standard_normal(33)) + 0.1
        assert metrics.snr_w(w, w) == metrics.DB_CLAMP

    def test_zero_reference_gives_zero_db(self):
        w = np.abs(rng(16).standard_normal(33)) + 0.1
        assert metrics.snr_w(w, np.zeros_like(w)) == pytest.approx(0.0)

    def test_random_pair_formula(self):
        g = rng(17)
        est = np.abs(g.standard_normal(33)) + 0.1
        true = np.abs(g.standard_normal(33)) + 0.1
        expect = 10 * np.log10(np.sum(est ** 2) / np.sum((est - true) ** 2))
        assert metrics.snr_w(est, true) == pytest.approx(expect, abs=1e-12)


class TestSiSdr:
    def test_scaled_estimate_clamps(self):
        s = rng(18).standard_normal(1000)
        assert metrics.si_sdr(s, 2.0 * s) == metrics.DB_CLAMP

    def test_orthogonal_noise_equal_energy(self):
        g = rng(19)
        s = g.standard_normal(1000)
        n = g.standard_normal(1000)
        n -= (np.dot(n, s) / np.dot(s, s)) * s  # make exactly orthogonal
        n *= np.linalg.norm(s) / np.linalg.norm(n)
        assert metrics.si_sdr(s, s + n) == pytest.approx(0.0, abs=1e-9)

    def test_scale_invariance_both_sides(self):
        g = rng(20)
        s = g.standard_normal(500)
        y = s + 0.2 * g.standard_normal(500)
        base = metrics.si_sdr(s, y)
        for alpha in (0.01, 0.5, 3.0, 100.0):
            assert metrics.si_sdr(s, alpha * y) == pytest.approx(base,
                                                                 abs=1e-9)
            assert metrics.si_sdr(alpha * s, y) == pytest.approx(base,
                                                                 abs=1e-9)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            metrics.si_sdr(np.zeros(10), np.ones(10))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.si_sdr(np.ones(10), np.ones(11))


class TestEnergyVad:
    def test_silence_all_inactive(self):
        assert not metrics.energy_vad(np.zeros(640), SPEC).any()

    def test_full_scale_all_active(self):
        assert metrics.energy_vad(np.ones(640), SPEC).all()

    def test_quiet_region_detected(self):
        x = np.concatenate([rng(21).standard_normal(320) * 1e-4,
                            rng(22).standard_normal(320)])
        vad = metrics.energy_vad(x, SPEC)
        assert not vad[0] and vad[-1]

    @given(st.floats(-80.0, -10.0))
    @settings(max_examples=50, deadline=None)
    def test_threshold_monotone(self, threshold):
        x = rng(23).standard_normal(960) * np.linspace(0.001, 1.0, 960)
        loose = metrics.energy_vad(x, SPEC, threshold)
        tight = metrics.energy_vad(x, SPEC, threshold + 5.0)
        assert np.all(loose[tight])  # tighter mask is a subset

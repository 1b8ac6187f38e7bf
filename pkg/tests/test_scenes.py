"""Scene generation, mixing, manifests, and WAV round trips."""

import json

import numpy as np
import pytest
from scipy import signal as sps
from scipy.stats import kstest

from afopt import scenes
from afopt.metrics import energy_vad
from afopt.dsp import FrameSpec


class TestSynthRir:
    def test_vanishing_decay_is_impulse_like(self):
        r = scenes.synth_rir(64, decay=1e-6, seed=0, sample_rate=16000)
        assert np.sum(r[:8] ** 2) >= 0.9 * np.sum(r ** 2)

    def test_deterministic(self):
        a = scenes.synth_rir(128, 0.1, seed=42)
        b = scenes.synth_rir(128, 0.1, seed=42)
        assert np.array_equal(a, b)

    def test_unit_energy(self):
        r = scenes.synth_rir(256, 0.2, seed=1)
        assert np.linalg.norm(r) == pytest.approx(1.0, abs=1e-9)

    def test_onset_shifts_direct_path(self):
        r = scenes.synth_rir(64, 0.01, seed=2, onset=5)
        assert np.all(r[:5] == 0)
        assert r[5] != 0


class TestSpeechlike:
    def test_has_silent_region(self):
        x = scenes.synth_speechlike(2.0, seed=3, sample_rate=8000)
        vad = energy_vad(x, FrameSpec(256, 128))
        assert vad.any() and not vad.all()

    def test_peak_normalized(self):
        x = scenes.synth_speechlike(1.0, seed=4, sample_rate=8000)
        assert np.max(np.abs(x)) <= 0.5 + 1e-12

    def test_deterministic(self):
        a = scenes.synth_speechlike(0.5, seed=5, sample_rate=8000)
        b = scenes.synth_speechlike(0.5, seed=5, sample_rate=8000)
        assert np.array_equal(a, b)


class TestMixing:
    def test_equal_power_at_zero_db(self):
        g = np.random.default_rng(6)
        echo = scenes.synth_speechlike(1.0, 7, 8000)
        s = scenes.synth_speechlike(1.0, 8, 8000)
        mixed = scenes.mix_at_ser(echo, s, 0.0, 8000)
        ratio = scenes.active_power(mixed, 8000) / scenes.active_power(echo,
                                                                       8000)
        assert ratio == pytest.approx(1.0, rel=1e-9)

    def test_ten_db(self):
        echo = scenes.synth_speechlike(1.0, 9, 8000)
        s = scenes.synth_speechlike(1.0, 10, 8000)
        mixed = scenes.mix_at_ser(echo, s, 10.0, 8000)
        ratio = scenes.active_power(mixed, 8000) / scenes.active_power(echo,
                                                                       8000)
        assert ratio == pytest.approx(10.0, rel=1e-9)

    @pytest.mark.parametrize("ser", [-7.5, -2.0, 4.25])
    def test_random_ser_recomputes(self, ser):
        echo = scenes.synth_speechlike(1.5, 11, 8000)
        s = scenes.synth_speechlike(1.5, 12, 8000)
        mixed = scenes.mix_at_ser(echo, s, ser, 8000)
        ratio = scenes.active_power(mixed, 8000) / scenes.active_power(echo,
                                                                       8000)
        assert 10 * np.log10(ratio) == pytest.approx(ser, abs=1e-9)

    def test_silent_speech_rejected(self):
        echo = scenes.synth_speechlike(1.0, 13, 8000)
        with pytest.raises(ValueError, match="silent"):
            scenes.mix_at_ser(echo, np.zeros_like(echo), 0.0, 8000)

    def test_noise_snr(self):
        ref = scenes.synth_speechlike(2.0, 14, 8000)
        n = scenes.noise_at_snr(ref, 20.0, 15, 8000)
        snr = scenes.active_power(ref, 8000) / np.mean(n ** 2)
        assert 10 * np.log10(snr) == pytest.approx(20.0, abs=1e-9)


class TestPathChange:
    def test_collapsed_range_deterministic(self):
        sys1 = scenes.splice_path_change(np.ones(4), np.ones(4) * 2,
                                         (1.0, 1.0), seed=0, sample_rate=100)
        assert sys1.switch_sample == 100

    def test_switch_time_uniform(self):
        draws = [scenes.splice_path_change(
            np.ones(2), np.ones(2), (4.0, 6.0), seed=i,
            sample_rate=1000).switch_sample for i in range(1000)]
        draws = np.asarray(draws, dtype=float)
        assert draws.min() >= 4000 and draws.max() <= 6000
        stat = kstest((draws - 4000) / 2000.0, "uniform")
        assert stat.pvalue > 0.01

    def test_output_matches_first_system_before_switch(self):
        rng = np.random.default_rng(16)
        u = rng.standard_normal(2000)
        w_a = scenes.synth_rir(16, 0.001, 17)
        w_b = scenes.synth_rir(16, 0.001, 18)
        system = scenes.splice_path_change(w_a, w_b, (0.5, 0.7), seed=19,
                                           sample_rate=1000)
        out = system.apply(u)
        ref = sps.fftconvolve(u, w_a)[:2000]
        t = system.switch_sample
        assert np.array_equal(out[:t], ref[:t])
        assert not np.allclose(out[t:], ref[t:])


class TestSceneBuilders:
    def test_aec_single_talk_reduces_to_system_id(self):
        cfg = scenes.SceneConfig(task="aec", kind="single_talk",
                                 sample_rate=8000, duration=1.0, rir_taps=32,
                                 decay=0.01, noise_snr_db=300.0)
        scene = scenes.generate_scene(cfg, 0)
        ref = sps.fftconvolve(scene.u[:, 0], scene.refs["w_true"])[
            :scene.u.shape[0]]
        assert np.allclose(scene.d[:, 0], ref, atol=1e-10)

    def test_aec_double_talk_ser_honored(self):
        cfg = scenes.SceneConfig(task="aec", kind="double_talk",
                                 sample_rate=8000, duration=2.0, rir_taps=32,
                                 decay=0.01, ser_range=(0.0, 0.0),
                                 noise_snr_db=300.0)
        scene = scenes.generate_scene(cfg, 1)
        p_echo = scenes.active_power(scene.refs["echo"][:, 0], 8000)
        p_near = scenes.active_power(scene.refs["near"][:, 0], 8000)
        assert p_near / p_echo == pytest.approx(1.0, rel=1e-9)

    def test_aec_path_change_in_window(self):
        cfg = scenes.SceneConfig(task="aec", kind="path_change",
                                 sample_rate=8000, duration=8.0, rir_taps=16,
                                 decay=0.01, path_change_range=(4.0, 6.0))
        scene = scenes.generate_scene(cfg, 2)
        t = scene.refs["path_change_sample"]
        assert 4.0 * 8000 <= t <= 6.0 * 8000

    def test_aec_nonlinear_applies_soft_clip(self):
        cfg = scenes.SceneConfig(task="aec", kind="nonlinear",
                                 sample_rate=8000, duration=1.0, rir_taps=16,
                                 decay=0.01, noise_snr_db=300.0,
                                 nonlin_alpha=4.0)
        scene = scenes.generate_scene(cfg, 3)
        # the echo reference must equal conv(soft_clip(u), w_true)
        driven = scenes.soft_clip(scene.u[:, 0], 4.0)
        ref = sps.fftconvolve(driven, scene.refs["w_true"])[
            :scene.u.shape[0]]
        assert np.allclose(scene.refs["echo"][:, 0], ref, atol=1e-10)

    def test_wpe_scene_shapes(self):
        cfg = scenes.SceneConfig(task="wpe", sample_rate=8000, duration=1.0,
                                 channels=3, rir_taps=64, decay=0.2)
        scene = scenes.generate_scene(cfg, 4)
        assert scene.d.shape[1] == 3
        assert scene.refs["s"].shape[0] == scene.d.shape[0]

    def test_gsc_scene_geometry(self):
        cfg = scenes.SceneConfig(task="gsc", kind="directional",
                                 sample_rate=8000, duration=1.0, channels=4)
        scene = scenes.generate_scene(cfg, 5)
        assert scene.u.shape[1] == 4
        assert scene.refs["image"].shape == scene.u.shape
        assert scene.refs["positions"].shape == (4, 2)

    def test_level_range_scales_scene(self):
        base = scenes.SceneConfig(task="system_id", sample_rate=8000,
                                  duration=0.5, rir_taps=8, decay=0.001,
                                  level_range_db=(0.0, 0.0))
        loud = scenes.SceneConfig(task="system_id", sample_rate=8000,
                                  duration=0.5, rir_taps=8, decay=0.001,
                                  level_range_db=(20.0, 20.0))
        a = scenes.generate_scene(base, 6)
        b = scenes.generate_scene(loud, 6)
        assert np.allclose(b.u, 10.0 * a.u, atol=1e-12)

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            scenes.generate_scene(scenes.SceneConfig(task="nope"), 0)


class TestDatasets:
    def cfg(self):
        return scenes.SceneConfig(task="system_id", sample_rate=8000,
                                  duration=0.5, rir_taps=8, decay=0.001,
                                  base_seed=11)

    def test_manifest_deterministic(self):
        counts = {"train": 3, "val": 2, "test": 1}
        m1 = scenes.build_dataset(self.cfg(), counts)
        m2 = scenes.build_dataset(self.cfg(), counts)
        assert json.dumps(m1, sort_keys=True) == json.dumps(m2,
                                                            sort_keys=True)

    def test_fold_seeds_disjoint(self):
        manifest = scenes.build_dataset(self.cfg(),
                                        {"train": 50, "val": 50, "test": 50})
        seeds = {}
        for entry in manifest["scenes"]:
            seeds.setdefault(entry["fold"], set()).add(entry["seed"])
        assert not (seeds["train"] & seeds["val"])
        assert not (seeds["train"] & seeds["test"])
        assert not (seeds["val"] & seeds["test"])

    def test_regeneration_bit_identical(self):
        manifest = scenes.build_dataset(self.cfg(), {"train": 2})
        entry = manifest["scenes"][1]
        a = scenes.scene_from_entry(manifest, entry)
        b = scenes.scene_from_entry(manifest, entry)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.d, b.d)

    def test_manifest_round_trip(self, tmp_path):
        manifest = scenes.build_dataset(self.cfg(), {"train": 1})
        path = tmp_path / "manifest.json"
        scenes.save_manifest(path, manifest)
        loaded = scenes.load_manifest(path)
        assert loaded == manifest


class TestWavIO:
    def test_float32_round_trip_exact(self, tmp_path):
        x = np.random.default_rng(20).standard_normal((100, 2)) * 0.4
        x32 = x.astype(np.float32).astype(np.float64)
        path = tmp_path / "f.wav"
        scenes.wav_write(path, x32, 8000, fmt="float32")
        y, rate = scenes.wav_read(path)
        assert rate == 8000
        assert np.array_equal(y, x32)

    def test_pcm16_quantization_bound(self, tmp_path):
        x = np.random.default_rng(21).standard_normal((200, 1))
        x *= 0.95 / np.max(np.abs(x))  # keep within full scale
        path = tmp_path / "p.wav"
        scenes.wav_write(path, x, 16000, fmt="pcm16")
        y, _ = scenes.wav_read(path)
        assert np.max(np.abs(y - x)) <= 1.0 / 32768.0

    def test_multichannel_order_preserved(self, tmp_path):
        # distinct constant per channel survives the round trip in order
        x = np.tile(np.array([[0.1, -0.2, 0.3]], dtype=np.float32), (50, 1))
        path = tmp_path / "m.wav"
        scenes.wav_write(path, x.astype(np.float64), 8000)
        y, _ = scenes.wav_read(path)
        assert y.shape == (50, 3)
        assert np.allclose(y[0], [0.1, -0.2, 0.3], atol=1e-7)

    def test_malformed_file_rejected(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not a wav at all")
        with pytest.raises(ValueError):
            scenes.wav_read(path)

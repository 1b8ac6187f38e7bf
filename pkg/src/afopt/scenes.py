"""Synthetic scene generation, dataset manifests, and WAV I/O.

Every scene is reproducible from (task, config, seed) alone; manifests only
record seeds and the generating config, so regenerating from a manifest entry
yields bit-identical audio.  Fold seeds are disjoint by construction (train,
validation, and test draw from offset seed ranges).
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

FOLD_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}
MANIFEST_VERSION = 1

SCENE_KINDS = {
    "system_id": ("default",),
    "aec": ("single_talk", "double_talk", "path_change", "nonlinear"),
    "eq": ("default",),
    "wpe": ("default",),
    "gsc": ("diffuse", "directional"),
}


@dataclass(frozen=True)
class SceneConfig:
    task: str = "system_id"
    kind: str = "default"
    sample_rate: int = 16000
    duration: float = 10.0
    channels: int = 1
    ser_range: tuple = (-10.0, 10.0)
    noise_snr_db: float = 30.0
    rir_taps: int = 1024
    decay: float = 0.25
    input_kind: str = "speech"  # speech | white
    # per-scene broadband gain drawn log-uniform from this dB range; models
    # level diversity across recordings (signal-to-noise ratio is unaffected)
    level_range_db: tuple = (0.0, 0.0)
    nonlin_alpha: float = 2.0
    path_change_range: tuple = (4.0, 6.0)
    eq_effects_range: tuple = (5, 15)
    array_radius: float = 0.1
    base_seed: int = 0

    def to_dict(self):
        d = asdict(self)
        # json-native: tuples persist as lists
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("ser_range", "path_change_range", "eq_effects_range",
                    "level_range_db"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scene:
    u: np.ndarray  # (T, M) filter input
    d: np.ndarray  # (T, M) desired / microphone signal
    refs: dict = field(default_factory=dict)
    task: str = "system_id"
    sample_rate: int = 16000
    seed: int = 0


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def synth_rir(n_taps: int, decay: float, seed, sample_rate: int = 16000,
              onset: int = 0):
    """Exponentially decaying noise tail behind a unit direct-path spike.

    ``decay`` is the amplitude time constant in seconds; the result has unit
    energy.  ``onset`` shifts the direct path by whole samples.
    """
    if n_taps < 1:
        raise ValueError("n_taps must be >= 1")
    rng = _rng(seed)
    r = np.zeros(n_taps)
    r[min(onset, n_taps - 1)] = 1.0
    tail0 = min(onset, n_taps - 1) + 1
    if tail0 < n_taps and decay > 0:
        t = np.arange(n_taps - tail0)
        tau = max(decay * sample_rate, 1e-12)
        r[tail0:] = rng.standard_normal(n_taps - tail0) * np.exp(-t / tau)
    return r / np.linalg.norm(r)


def synth_speechlike(duration: float, seed, sample_rate: int = 16000):
    """Amplitude-modulated band-limited noise with explicit pauses.

    Bursts of 0.25-0.8 s alternate with 0.1-0.3 s near-silent gaps so an
    energy VAD always finds inactive frames; peak normalized to 0.5.
    """
    rng = _rng(seed)
    t = int(round(duration * sample_rate))
    if t < 1:
        raise ValueError("duration too short")
    low = min(0.7, 2 * 300.0 / sample_rate)
    high = min(0.9, 2 * 3400.0 / sample_rate)
    b, a = sps.butter(2, [low, high], btype="band")
    x = sps.lfilter(b, a, rng.standard_normal(t))
    # syllabic-rate modulation
    env = sps.lfilter(*sps.butter(2, min(0.9, 2 * 4.0 / sample_rate)),
                      np.abs(rng.standard_normal(t)))
    env = np.abs(env)
    env /= max(np.max(env), 1e-12)
    x *= 0.2 + env
    gate = np.ones(t)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    while pos < t:
        burst = int(rng.uniform(0.25, 0.8) * sample_rate)
        gap = int(rng.uniform(0.1, 0.3) * sample_rate)
        gate[pos + burst:pos + burst + gap] = 0.0
        pos += burst + gap
    ramp = max(1, int(0.005 * sample_rate))
    gate = np.convolve(gate, np.ones(ramp) / ramp, mode="same")
    x *= gate
    peak = np.max(np.abs(x))
    return 0.5 * x / peak if peak > 0 else x


def active_power(x, sample_rate: int, threshold_db: float = -40.0) -> float:
    """Mean-square power over voice-active 32 ms frames.

    Used by the SER/SNR mixers; scaling a signal scales this measure by the
    same factor squared, so mixing ratios are exact by construction.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = max(1, int(0.032 * sample_rate))
    hop = max(1, n // 2)
    count = (x.size - n) // hop + 1 if x.size >= n else 0
    if count <= 0:
        return float(np.mean(x ** 2))
    idx = np.arange(count)[:, None] * hop + np.arange(n)[None, :]
    energy = np.mean(x[idx] ** 2, axis=1)
    active = energy > np.max(energy) * 10.0 ** (threshold_db / 10.0)
    if not np.any(active):
        return 0.0
    return float(np.mean(energy[active]))


def mix_at_ser(echo, speech, ser_db: float, sample_rate: int = 16000):
    """Scale ``speech`` so its active power sits ``ser_db`` above the echo's."""
    p_echo = active_power(echo, sample_rate)
    p_s = active_power(speech, sample_rate)
    if p_s <= 0.0:
        raise ValueError("near-end speech is silent")
    if p_echo <= 0.0:
        raise ValueError("echo signal is silent")
    return speech * np.sqrt(10.0 ** (ser_db / 10.0) * p_echo / p_s)


def noise_at_snr(reference, snr_db: float, seed, sample_rate: int = 16000):
    """White noise whose full-band power sits ``snr_db`` below the reference's
    active power."""
    rng = _rng(seed)
    n = rng.standard_normal(np.asarray(reference).shape[0])
    p_ref = active_power(reference, sample_rate)
    p_n = np.mean(n ** 2)
    return n * np.sqrt(p_ref / 10.0 ** (snr_db / 10.0) / max(p_n, 1e-30))


def soft_clip(x, alpha: float):
    """Memoryless loudspeaker-style distortion, identity slope preserved at 0
    gain normalization."""
    if alpha <= 0:
        return np.asarray(x, dtype=np.float64)
    return np.tanh(alpha * np.asarray(x, dtype=np.float64)) / np.tanh(alpha)


@dataclass(frozen=True)
class SwitchedSystem:
    w_before: np.ndarray
    w_after: np.ndarray
    switch_sample: int

    def apply(self, u):
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        before = sps.fftconvolve(u, self.w_before)[:u.size]
        after = sps.fftconvolve(u, self.w_after)[:u.size]
        out = before.copy()
        out[self.switch_sample:] = after[self.switch_sample:]
        return out


def splice_path_change(w_before, w_after, t_range, seed,
                       sample_rate: int = 16000) -> SwitchedSystem:
    """System that switches impulse responses at a uniform random time in
    ``t_range`` (seconds)."""
    rng = _rng(seed)
    lo, hi = t_range
    t_star = int(round(rng.uniform(lo, hi) * sample_rate))
    return SwitchedSystem(np.asarray(w_before), np.asarray(w_after), t_star)


def biquad_peaking(center_hz: float, gain_db: float, q: float,
                   sample_rate: int):
    """RBJ peaking-EQ biquad as a second-order section."""
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * center_hz / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    b = np.array([1.0 + alpha * a_lin, -2.0 * np.cos(w0), 1.0 - alpha * a_lin])
    a = np.array([1.0 + alpha / a_lin, -2.0 * np.cos(w0), 1.0 - alpha / a_lin])
    return np.concatenate([b / a[0], a / a[0]])


def random_eq_system(rng, sample_rate: int, n_effects_range=(5, 15)):
    """Cascade of random peaking filters, as second-order sections."""
    n_eff = int(rng.integers(n_effects_range[0], n_effects_range[1] + 1))
    top = min(8000.0, 0.45 * sample_rate)
    sos = np.stack([
        biquad_peaking(rng.uniform(1000.0 * top / 8000.0, top),
                       rng.uniform(-18.0, 18.0), rng.uniform(0.1, 10.0),
                       sample_rate)
        for _ in range(n_eff)])
    return sos


def delay_signal(x, delay_samples: float):
    """Fractional delay via a frequency-domain phase ramp (circular edges)."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.fft.rfft(x)
    freqs = np.arange(spec.size) / x.size
    return np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * delay_samples),
                        n=x.size)


def array_positions(channels: int, kind: str = "circular", radius: float = 0.1):
    """Planar mic coordinates in meters; circular ring or rectangular frame."""
    if channels == 1:
        return np.zeros((1, 2))
    if kind == "circular":
        ang = 2.0 * np.pi * np.arange(channels) / channels
        return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if kind == "rect":
        # evenly spread around a 2r x r frame perimeter
        per = np.linspace(0.0, 1.0, channels, endpoint=False)
        pts = []
        for p in per:
            q = p * 2 * (2 * radius + radius)
            if q < 2 * radius:
                pts.append((q - radius, radius / 2))
            elif q < 2 * radius + radius:
                pts.append((radius, radius / 2 - (q - 2 * radius)))
            elif q < 4 * radius + radius:
                pts.append((radius - (q - 3 * radius), -radius / 2))
            else:
                pts.append((-radius, (q - 5 * radius) - radius / 2))
        return np.asarray(pts)
    raise ValueError(f"unknown array kind {kind!r}")


def steering_delays(positions, angle_rad: float, sample_rate: int,
                    speed_of_sound: float = 343.0):
    """Far-field plane-wave arrival delays in samples for each mic."""
    direction = np.array([np.cos(angle_rad), np.sin(angle_rad)])
    return -(positions @ direction) / speed_of_sound * sample_rate


# ---------------------------------------------------------------------------
# Per-task scene assembly
# ---------------------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)


def _source(cfg: SceneConfig, rng):
    if cfg.input_kind == "white":
        t = int(round(cfg.duration * cfg.sample_rate))
        x = rng.standard_normal(t)
        x = 0.5 * x / np.max(np.abs(x))
    else:
        x = synth_speechlike(cfg.duration, rng, cfg.sample_rate)
    lo, hi = cfg.level_range_db
    if hi > lo:
        x = x * 10.0 ** (rng.uniform(lo, hi) / 20.0)
    elif lo != 0.0:
        x = x * 10.0 ** (lo / 20.0)
    return x


def _system_id_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = _rng(seed)
    u = _source(cfg, rng)
    w = synth_rir(cfg.rir_taps, cfg.decay, rng, cfg.sample_rate)
    clean = sps.fftconvolve(u, w)[:u.size]
    d = clean + noise_at_snr(clean, cfg.noise_snr_db, rng, cfg.sample_rate)
    return Scene(u=u[:, None], d=d[:, None],
                 refs={"w_true": w, "clean_response": clean[:, None]},
                 task="system_id", sample_rate=cfg.sample_rate, seed=seed)


def _aec_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = _rng(seed)
    far = _source(cfg, rng)
    w = synth_rir(cfg.rir_taps, cfg.decay, rng, cfg.sample_rate)
    driven = soft_clip(far, cfg.nonlin_alpha) if cfg.kind == "nonlinear" else far
    change_sample = -1
    if cfg.kind == "path_change":
        w_b = synth_rir(cfg.rir_taps, cfg.decay, rng, cfg.sample_rate)
        system = splice_path_change(w, w_b, cfg.path_change_range, rng,
                                    cfg.sample_rate)
        echo = system.apply(driven)
        change_sample = system.switch_sample
        refs_w = {"w_true": w, "w_after": w_b}
    else:
        echo = sps.fftconvolve(driven, w)[:far.size]
        refs_w = {"w_true": w}
    d = echo.copy()
    near = np.zeros_like(far)
    if cfg.kind in ("double_talk", "path_change", "nonlinear"):
        ser = rng.uniform(*cfg.ser_range)
        near = mix_at_ser(echo, synth_speechlike(cfg.duration, rng,
                                                 cfg.sample_rate),
                          ser, cfg.sample_rate)
        d = d + near
    noise = noise_at_snr(echo, cfg.noise_snr_db, rng, cfg.sample_rate)
    d = d + noise
    refs = {"echo": echo[:, None], "near": near[:, None],
            "path_change_sample": change_sample, **refs_w}
    return Scene(u=far[:, None], d=d[:, None], refs=refs, task="aec",
                 sample_rate=cfg.sample_rate, seed=seed)


def _eq_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = _rng(seed)
    dry = _source(cfg, rng)
    sos = random_eq_system(rng, cfg.sample_rate, cfg.eq_effects_range)
    wet = sps.sosfilt(sos, dry)
    d = dry + noise_at_snr(dry, cfg.noise_snr_db, rng, cfg.sample_rate)
    return Scene(u=wet[:, None], d=d[:, None],
                 refs={"sos": sos, "dry": dry[:, None]},
                 task="eq", sample_rate=cfg.sample_rate, seed=seed)


def _wpe_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = _rng(seed)
    src = _source(cfg, rng)
    m = cfg.channels
    positions = array_positions(m, "circular", cfg.array_radius)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    delays = steering_delays(positions, angle, cfg.sample_rate)
    delays -= delays.min()
    mics = np.zeros((src.size, m))
    for ch in range(m):
        rir = synth_rir(cfg.rir_taps, cfg.decay, rng, cfg.sample_rate,
                        onset=int(round(delays[ch])))
        mics[:, ch] = sps.fftconvolve(src, rir)[:src.size]
    for ch in range(m):
        mics[:, ch] += noise_at_snr(mics[:, ch], cfg.noise_snr_db, rng,
                                    cfg.sample_rate)
    return Scene(u=mics, d=mics, refs={"s": src[:, None]},
                 task="wpe", sample_rate=cfg.sample_rate, seed=seed)


def _gsc_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = _rng(seed)
    src = _source(cfg, rng)
    m = cfg.channels
    positions = array_positions(m, "rect", cfg.array_radius)
    angle_s = rng.uniform(0.0, 2.0 * np.pi)
    delays_s = steering_delays(positions, angle_s, cfg.sample_rate)
    image = np.stack([delay_signal(src, dl) for dl in delays_s], axis=1)
    if cfg.kind == "directional":
        interf = synth_speechlike(cfg.duration, rng, cfg.sample_rate)
        angle_i = (angle_s + rng.uniform(np.pi / 3, 5 * np.pi / 3)) % (2 * np.pi)
        delays_i = steering_delays(positions, angle_i, cfg.sample_rate)
        noise = np.stack([delay_signal(interf, dl) for dl in delays_i], axis=1)
        refs_extra = {"interferer_angle": float(angle_i)}
    else:
        noise = np.stack([synth_speechlike(cfg.duration, rng, cfg.sample_rate)
                          for _ in range(m)], axis=1)
        refs_extra = {}
    scale = np.sqrt(active_power(image[:, 0], cfg.sample_rate)
                    / 10.0 ** (cfg.noise_snr_db / 10.0)
                    / max(active_power(noise[:, 0], cfg.sample_rate), 1e-30))
    mics = image + scale * noise
    for ch in range(m):
        mics[:, ch] += noise_at_snr(image[:, ch], 40.0, rng, cfg.sample_rate)
    refs = {"s": src[:, None], "image": image, "positions": positions,
            "source_angle": float(angle_s), **refs_extra}
    return Scene(u=mics, d=mics, refs=refs, task="gsc",
                 sample_rate=cfg.sample_rate, seed=seed)


_BUILDERS = {
    "system_id": _system_id_scene,
    "aec": _aec_scene,
    "eq": _eq_scene,
    "wpe": _wpe_scene,
    "gsc": _gsc_scene,
}


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    if cfg.task not in _BUILDERS:
        raise ValueError(f"unknown task {cfg.task!r}")
    if cfg.kind not in SCENE_KINDS[cfg.task]:
        raise ValueError(f"unknown scene kind {cfg.kind!r} for {cfg.task}")
    return _BUILDERS[cfg.task](cfg, seed)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def scene_seed(cfg: SceneConfig, fold: str, index: int) -> int:
    return cfg.base_seed + FOLD_OFFSETS[fold] + index


def build_dataset(cfg: SceneConfig, counts: dict) -> dict:
    """Deterministic manifest listing one (fold, seed) entry per scene."""
    entries = []
    for fold in ("train", "val", "test"):
        for i in range(counts.get(fold, 0)):
            entries.append({"id": f"{fold}-{i:05d}", "fold": fold,
                            "seed": scene_seed(cfg, fold, i)})
    return {"version": MANIFEST_VERSION, "task": cfg.task,
            "config": cfg.to_dict(), "scenes": entries}


def manifest_scenes(manifest: dict, fold: str | None = None):
    cfg = SceneConfig.from_dict(manifest["config"])
    for entry in manifest["scenes"]:
        if fold is None or entry["fold"] == fold:
            yield entry, generate_scene(cfg, entry["seed"])


def scene_from_entry(manifest: dict, entry: dict) -> Scene:
    cfg = SceneConfig.from_dict(manifest["config"])
    return generate_scene(cfg, entry["seed"])


def save_manifest(path, manifest: dict):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}")
    return manifest


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def wav_write(path, x, sample_rate: int, fmt: str = "float32"):
    """Write mono or multichannel audio as float32 or 16-bit PCM."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if fmt == "float32":
        wavfile.write(path, sample_rate, np.squeeze(x.astype(np.float32)))
    elif fmt == "pcm16":
        q = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, sample_rate, np.squeeze(q))
    else:
        raise ValueError(f"unknown wav format {fmt!r}")


def wav_read(path):
    """Read a WAV file to float64 ``(T, M)`` plus its sample rate."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise ValueError(f"malformed wav file {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported wav sample format {data.dtype}")
    if x.ndim == 1:
        x = x[:, None]
    return x, int(rate)

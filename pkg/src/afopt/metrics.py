"""Signal-level evaluation metrics.

Segmental metrics slide the task's analysis window (length N, hop R) over the
time signals, score each frame in dB, clamp to +-100 dB so perfect fits stay
finite, and average over voice-active frames only.
"""

from dataclasses import dataclass, field

import numpy as np

DB_CLAMP = 100.0
DEFAULT_VAD_THRESHOLD_DB = -40.0


@dataclass
class MetricSeries:
    values: np.ndarray
    active: np.ndarray
    mean: float = field(init=False)

    def __post_init__(self):
        active_vals = self.values[self.active]
        self.mean = float(np.mean(active_vals)) if active_vals.size else float("nan")


def _frames(x, spec):
    """Length-N windows at hop R over the raw signal (no head padding)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, r = spec.win_len, spec.hop
    count = (x.shape[0] - n) // r + 1 if x.shape[0] >= n else 0
    if count <= 0:
        return np.zeros((0, n, x.shape[1]))
    idx = np.arange(count)[:, None] * r + np.arange(n)[None, :]
    return x[idx]


def _frame_energy(x, spec):
    f = _frames(x, spec)
    return np.sum(f ** 2, axis=(1, 2))


def _ratio_db(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = 10.0 * np.log10(num / den)
    db = np.where(num == 0.0, -DB_CLAMP, db)
    db = np.where((den == 0.0) & (num > 0.0), DB_CLAMP, db)
    # a diverged estimate (inf/nan energies) scores worst rather than raising
    db = np.where(~np.isfinite(num) | ~np.isfinite(den), -DB_CLAMP, db)
    return np.clip(np.nan_to_num(db, nan=0.0), -DB_CLAMP, DB_CLAMP)


def energy_vad(x, spec, threshold_db: float = DEFAULT_VAD_THRESHOLD_DB):
    """Frame-activity mask: energy above ``threshold_db`` relative to the peak frame."""
    energy = _frame_energy(x, spec)
    if energy.size == 0:
        return np.zeros(0, dtype=bool)
    return energy > np.max(energy) * 10.0 ** (threshold_db / 10.0)


def _segmental(reference, estimate, spec, vad):
    ref = _frames(reference, spec)
    est = _frames(estimate, spec)
    count = min(ref.shape[0], est.shape[0])
    ref, est = ref[:count], est[:count]
    with np.errstate(over="ignore", invalid="ignore"):
        num = np.sum(ref ** 2, axis=(1, 2))
        den = np.sum((ref - est) ** 2, axis=(1, 2))
    values = _ratio_db(num, den)
    if vad is None:
        active = np.ones(count, dtype=bool)
    else:
        active = np.asarray(vad, dtype=bool)[:count]
    return MetricSeries(values=values, active=active)


def segmental_snr(desired, estimate, spec, vad=None) -> MetricSeries:
    """Per-frame 10*log10(||d||^2 / ||d - y||^2); higher is better."""
    return _segmental(desired, estimate, spec, vad)


def erle(echo, estimate, spec, vad=None) -> MetricSeries:
    """Echo-return loss enhancement against the noiseless system response."""
    return _segmental(echo, estimate, spec, vad)


def srr(mixture, dereverbed, spec, vad=None) -> MetricSeries:
    """Energy-removal ratio 10*log10(||d_hat||^2 / ||d - d_hat||^2).

    Lower means more energy removed.  A pass-through output clamps high.
    """
    mix = _frames(mixture, spec)
    out = _frames(dereverbed, spec)
    count = min(mix.shape[0], out.shape[0])
    mix, out = mix[:count], out[:count]
    with np.errstate(over="ignore", invalid="ignore"):
        num = np.sum(out ** 2, axis=(1, 2))
        den = np.sum((mix - out) ** 2, axis=(1, 2))
    values = _ratio_db(num, den)
    if vad is None:
        active = np.ones(count, dtype=bool)
    else:
        active = np.asarray(vad, dtype=bool)[:count]
    return MetricSeries(values=values, active=active)


def snr_w(est_inv_mag, true_inv_mag) -> float:
    """System SNR on inverse-response magnitudes (phase ignored)."""
    est = np.abs(np.asarray(est_inv_mag, dtype=np.float64))
    true = np.abs(np.asarray(true_inv_mag, dtype=np.float64))
    if est.shape != true.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {true.shape}")
    return float(_ratio_db(np.sum(est ** 2), np.sum((est - true) ** 2)))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    The estimate is projected onto the reference with
    ``a = <estimate, reference> / ||reference||^2`` so any positive rescaling
    of either signal leaves the score unchanged.
    """
    s = np.asarray(reference, dtype=np.float64).reshape(-1)
    y = np.asarray(estimate, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("signals must have equal length")
    energy = np.dot(s, s)
    if energy == 0.0:
        raise ValueError("reference signal is zero")
    target = (np.dot(y, s) / energy) * s
    return float(_ratio_db(np.dot(target, target),
                           np.sum((target - y) ** 2)))

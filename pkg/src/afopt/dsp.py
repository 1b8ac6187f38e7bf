"""Framing and block frequency-domain filtering (overlap-save / overlap-add).

Conventions used by every module downstream:

* FFTs are the plain unnormalized forward transform with the ``1/K`` factor on
  the inverse, ``K = N`` (no zero padding beyond the window).
* Time signals are real arrays of shape ``(T, M)`` with ``M`` channels; a
  frequency frame is complex ``(K, M)``.
* Streams are head-padded with ``N - R`` zeros so frame 0 exists: frame ``t``
  holds samples ``x[t*R - N + R : t*R + R]`` of the unpadded signal.
* Overlap-save emits the last ``R`` samples of each inverse-transformed frame
  (zero signal delay); overlap-add uses sqrt-Hann analysis and synthesis
  windows at 50% overlap (perfect reconstruction, ``N - R`` samples of delay).
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

WINDOW_KINDS = ("rect", "hann")


@dataclass(frozen=True)
class FrameSpec:
    """Analysis frame geometry: window length N, hop R, K = N FFT bins."""

    win_len: int
    hop: int
    window: str = "rect"
    channels: int = 1

    def __post_init__(self):
        if self.win_len < 1 or not 0 < self.hop <= self.win_len:
            raise ValueError(f"need 0 < hop <= win_len, got {self}")
        if self.window not in WINDOW_KINDS:
            raise ValueError(f"unknown window {self.window!r}")
        if self.window == "hann" and 2 * self.hop != self.win_len:
            # sqrt-Hann pairs only satisfy COLA at 50% overlap
            raise ValueError("hann framing requires hop = win_len / 2")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def fft_len(self) -> int:
        return self.win_len


def analysis_window(spec: FrameSpec) -> np.ndarray:
    """Analysis window; sqrt of the periodic Hann so analysis*synthesis is COLA."""
    if spec.window == "rect":
        return np.ones(spec.win_len)
    return np.sqrt(_hann_periodic(spec.win_len))


def synthesis_window(spec: FrameSpec) -> np.ndarray:
    if spec.window != "hann":
        raise ValueError("synthesis window only defined for hann framing")
    return np.sqrt(_hann_periodic(spec.win_len))


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def frame_count(n_samples: int, spec: FrameSpec) -> int:
    """Number of full hops a stream of ``n_samples`` produces (0 if too short)."""
    if n_samples < spec.hop:
        return 0
    return (n_samples - spec.hop) // spec.hop + 1


def frame_signal(x, spec: FrameSpec):
    """Split a time signal into windowed frequency frames.

    Args:
        x: real signal, shape ``(T,)`` or ``(T, M)``.
        spec: frame geometry; ``spec.channels`` must match ``M``.

    Returns:
        Complex array of shape ``(F, K, M)`` with ``F = frame_count(T, spec)``.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.channels:
        raise ValueError(f"expected (T, {spec.channels}) signal, got {x.shape}")
    if not bool(jnp.all(jnp.isfinite(x))):
        raise ValueError("signal contains non-finite samples")
    n, hop = spec.win_len, spec.hop
    n_frames = frame_count(x.shape[0], spec)
    if n_frames == 0:
        return jnp.zeros((0, spec.fft_len, spec.channels), dtype=jnp.complex128)
    padded = jnp.concatenate([jnp.zeros((n - hop, x.shape[1])), x], axis=0)
    idx = jnp.arange(n_frames)[:, None] * hop + jnp.arange(n)[None, :]
    frames = padded[idx]  # (F, N, M)
    win = jnp.asarray(analysis_window(spec))
    return jnp.fft.fft(frames * win[None, :, None], axis=1)


def hop_slices(x, spec: FrameSpec):
    """Hop-aligned time segments of ``x``: shape ``(F, R, M)``.

    Segment ``t`` holds samples ``x[t*R : (t+1)*R]``; with overlap-save
    filtering these are the samples emitted for frame ``t``.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.ndim == 1:
        x = x[:, None]
    n_frames = frame_count(x.shape[0], spec)
    return x[: n_frames * spec.hop].reshape(n_frames, spec.hop, x.shape[1])


# ---------------------------------------------------------------------------
# Overlap-save
# ---------------------------------------------------------------------------


def push_frame(buf, frame):
    """Shift a ``(K, B, M)`` frame buffer left and append ``frame`` as newest."""
    return jnp.concatenate([buf[:, 1:, :], frame[:, None, :]], axis=1)


def antialias_project(w, spec: FrameSpec):
    """Zero the last R time-domain taps of a frequency-domain filter.

    Operates along axis 0 (the K frequency bins); trailing axes (channels,
    buffered frames) are projected independently.  Idempotent; restricting a
    filter's time support to ``K - R`` taps makes the overlap-save product an
    exact linear convolution.
    """
    w = jnp.asarray(w, dtype=jnp.complex128)
    k, r = spec.fft_len, spec.hop
    mask = jnp.concatenate([jnp.ones(k - r), jnp.zeros(r)])
    t = jnp.fft.ifft(w, axis=0)
    t = t * mask.reshape((k,) + (1,) * (w.ndim - 1))
    return jnp.fft.fft(t, axis=0)


def ols_apply(ubuf, w, spec: FrameSpec, constrained: bool = True):
    """Apply a multi-frame filter to a buffered input frame via overlap-save.

    Per output channel m the product is diagonal over frequency and summed
    over the B buffered frames of input channel m.

    Args:
        ubuf: complex ``(K, B, M)`` input buffer, newest frame last.
        w: complex ``(K, M, B)`` filter.
        constrained: apply the anti-aliasing projection to ``w`` first.

    Returns:
        ``(y_freq, y_time)``: complex ``(K, M)`` and real ``(R, M)`` (the valid
        last R samples of the inverse transform).
    """
    ubuf = jnp.asarray(ubuf, dtype=jnp.complex128)
    w = jnp.asarray(w, dtype=jnp.complex128)
    k, r = spec.fft_len, spec.hop
    if ubuf.ndim != 3 or w.ndim != 3 or ubuf.shape[0] != k or w.shape[0] != k \
            or ubuf.shape[1] != w.shape[2] or ubuf.shape[2] != w.shape[1]:
        raise ValueError(f"shape mismatch: ubuf {ubuf.shape}, w {w.shape}")
    if constrained:
        w = antialias_project(w, spec)
    y_freq = jnp.einsum("kbm,kmb->km", ubuf, w)
    y_time = jnp.real(jnp.fft.ifft(y_freq, axis=0))[k - r:]
    return y_freq, y_time


# ---------------------------------------------------------------------------
# Overlap-add
# ---------------------------------------------------------------------------


def ola_init(spec: FrameSpec, channels: int | None = None):
    """Zeroed overlap-add carry buffer, shape ``(K, M)``."""
    m = spec.channels if channels is None else channels
    return jnp.zeros((spec.fft_len, m))


def ola_synthesize(y_freq, buf, spec: FrameSpec):
    """Turn one frequency frame into R output samples, carrying the overlap.

    The synthesis-windowed inverse transform is split: its first half is
    emitted together with the tail of the carry buffer, the rest is carried.

    Args:
        y_freq: complex ``(K, M)`` frame to synthesize.
        buf: real ``(K, M)`` carry from the previous hop (zeros at stream start).

    Returns:
        ``(y_time, buf')``: real ``(R, M)`` output samples and the new carry.
    """
    k, r = spec.fft_len, spec.hop
    win = jnp.asarray(synthesis_window(spec))
    contrib = win[:, None] * jnp.real(jnp.fft.ifft(y_freq, axis=0))
    y_time = contrib[:r] + buf[k - r:]
    buf_next = contrib + jnp.concatenate(
        [buf[k - r:], jnp.zeros((k - r, buf.shape[1]))], axis=0)
    return y_time, buf_next


def ola_apply(u, w, buf, spec: FrameSpec):
    """Single-frame overlap-add filtering: y = u * w per bin and channel.

    Returns ``(y_freq, y_time, buf')`` with shapes ``(K, M)``, ``(R, M)``,
    ``(K, M)``.
    """
    u = jnp.asarray(u, dtype=jnp.complex128)
    w = jnp.asarray(w, dtype=jnp.complex128)
    if u.shape != w.shape:
        raise ValueError(f"shape mismatch: u {u.shape}, w {w.shape}")
    y_freq = u * w
    y_time, buf_next = ola_synthesize(y_freq, buf, spec)
    return y_freq, y_time, buf_next


def resynthesize(frames, spec: FrameSpec):
    """Overlap-add a stack of frequency frames back to hop-sized segments.

    Args:
        frames: complex ``(F, K, M)``.

    Returns:
        Real ``(F, R, M)``; flattening the first two axes gives the stream,
        which for frames produced by :func:`frame_signal` is the input
        delayed by ``N - R`` samples.
    """
    import jax

    def step(buf, y):
        y_time, buf = ola_synthesize(y, buf, spec)
        return buf, y_time

    frames = jnp.asarray(frames, dtype=jnp.complex128)
    _, hops = jax.lax.scan(step, ola_init(spec, frames.shape[2]), frames)
    return hops

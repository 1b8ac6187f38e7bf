"""Overlap-save linear-filter tasks: system identification, echo
cancellation, and equalization.

All three adapt a diagonal-per-channel multi-frame filter: output channel m
is the sum over B buffered frames of input channel m times its taps.  They
differ only in what plays input and desired (AEC adapts against the noisy
near-end mixture; EQ feeds the forward-system output and targets the dry
signal) and in whether the anti-aliasing constraint is enforced.
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .. import dsp, metrics
from .base import OptIn, StepOut


@dataclass(frozen=True)
class LinearFilterTask:
    kind: str  # system_id | aec | eq
    spec: dsp.FrameSpec
    buffered_frames: int = 1
    constrained: bool = True

    def __post_init__(self):
        if self.kind not in ("system_id", "aec", "eq"):
            raise ValueError(f"unknown linear task {self.kind!r}")
        if self.spec.window != "rect":
            raise ValueError("overlap-save tasks use rectangular framing")

    @property
    def n_bins(self):
        return self.spec.fft_len

    @property
    def channels(self):
        return self.spec.channels

    # optimizer-facing layout: one group of B taps per channel
    @property
    def groups(self):
        return self.channels

    @property
    def taps(self):
        return self.buffered_frames

    @property
    def out_channels(self):
        return self.channels

    def prepare(self, scene):
        u_frames = dsp.frame_signal(scene.u, self.spec)
        d_frames = dsp.frame_signal(scene.d, self.spec)
        d_hops = dsp.hop_slices(scene.d, self.spec)
        count = min(u_frames.shape[0], d_frames.shape[0])
        return {
            "xs": {"u": u_frames[:count], "d": d_frames[:count],
                   "d_hop": d_hops[:count]},
            "target": d_hops[:count],
            "n_frames": count,
        }

    def init_theta(self):
        return jnp.zeros(
            (self.n_bins, self.channels * self.buffered_frames),
            dtype=jnp.complex128)

    def init_tstate(self, prepared=None):
        return {"ubuf": jnp.zeros(
            (self.n_bins, self.buffered_frames, self.channels),
            dtype=jnp.complex128)}

    def constrain(self, theta):
        if not self.constrained:
            return theta
        k, m, b = self.n_bins, self.channels, self.buffered_frames
        w = dsp.antialias_project(theta.reshape(k, m, b), self.spec)
        return w.reshape(k, m * b)

    def step(self, theta, tstate, x):
        k, m, b = self.n_bins, self.channels, self.buffered_frames
        ubuf = dsp.push_frame(tstate["ubuf"], x["u"])
        # theta is kept inside the constraint set by constrain(), so the
        # filter product itself runs unprojected
        y_freq, y_time = dsp.ols_apply(ubuf, theta.reshape(k, m, b), self.spec,
                                       constrained=False)
        # hop error formed on the valid output samples and zero-padded back:
        # unlike the raw inter-frame spectral difference this vanishes at a
        # perfect filter (no circular-aliasing bias in the update)
        e_time = x["d_hop"] - y_time
        err = jnp.fft.fft(jnp.concatenate(
            [jnp.zeros((k - self.spec.hop, m)), e_time], axis=0), axis=0)
        regressor = jnp.conj(jnp.swapaxes(ubuf, 1, 2)).reshape(k, m * b)
        grad = (-regressor.reshape(k, m, b) * err[:, :, None]).reshape(k, m * b)
        opt_in = OptIn(grad=grad, regressor=regressor,
                       err=jnp.conj(err), out=jnp.conj(y_freq))
        out = StepOut(opt_in=opt_in, d_loss=x["d"], y_loss=y_freq,
                      y_time=y_time, af_loss=jnp.mean(e_time ** 2))
        return {"ubuf": ubuf}, out

    def metric(self, scene, result) -> float:
        """Primary score: mean segmental SNR of the estimated response
        (AEC scores ERLE against the noiseless echo instead)."""
        y = np.asarray(result.y_stream)
        if self.kind == "aec":
            ref = np.asarray(scene.refs["echo"])[: y.shape[0]]
        else:
            ref = np.asarray(scene.d)[: y.shape[0]]
        vad = metrics.energy_vad(ref, self.spec)
        return metrics.segmental_snr(ref, y, self.spec, vad).mean

    def inverse_magnitude(self, theta):
        """EQ helper: |filter response| per bin, summed over taps at lag
        ordering consistent with the OLS product."""
        k, m, b = self.n_bins, self.channels, self.buffered_frames
        return np.abs(np.asarray(theta).reshape(k, m, b)).sum(axis=2)

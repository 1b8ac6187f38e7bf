"""Multi-channel linear-prediction dereverberation (weighted prediction
error), overlap-add variant.

The filter predicts the current reference-channel frame from a buffer of B
past frames of all M channels, delayed by D hops; subtracting the prediction
leaves the early/direct part.  The prediction loss is normalized by a running
per-bin power estimate over the last B + D frames, and the optimizer sees the
power-normalized signals so the gradient of the normalized loss is exactly
the uniform ``-r * conj(e)`` form.
"""

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from .. import dsp, metrics
from ..classic import EPS
from .base import OptIn, StepOut


@dataclass(frozen=True)
class WpeTask:
    spec: dsp.FrameSpec
    buffered_frames: int = 5
    delay: int = 2

    def __post_init__(self):
        if self.spec.window != "hann":
            raise ValueError("prediction task uses hann overlap-add framing")
        if self.buffered_frames < 1 or self.delay < 1:
            raise ValueError("need buffered_frames >= 1 and delay >= 1")

    @property
    def n_bins(self):
        return self.spec.fft_len

    @property
    def channels(self):
        return self.spec.channels

    @property
    def groups(self):
        return 1

    @property
    def taps(self):
        return self.buffered_frames * self.channels

    @property
    def out_channels(self):
        return 1

    kind = "wpe"
    constrained = False

    def constrain(self, theta):
        return theta

    def prepare(self, scene):
        frames = dsp.frame_signal(scene.d, self.spec)
        # identity-resynthesized reference channel: the stream the
        # dereverberated output is subtracted from, equally delayed
        target = dsp.resynthesize(frames[:, :, :1], self.spec)
        return {"xs": {"d": frames}, "target": target,
                "n_frames": frames.shape[0]}

    def init_theta(self):
        return jnp.zeros((self.n_bins, self.taps), dtype=jnp.complex128)

    def init_tstate(self, prepared=None):
        window = self.buffered_frames + self.delay
        return {
            "ring": jnp.zeros((window, self.n_bins, self.channels),
                              dtype=jnp.complex128),
            "ola": dsp.ola_init(self.spec, 1),
        }

    def step(self, theta, tstate, x):
        k, m, b = self.n_bins, self.channels, self.buffered_frames
        ring = jnp.concatenate([tstate["ring"][1:], x["d"][None]], axis=0)
        window = b + self.delay
        power = jnp.sum(jnp.abs(ring) ** 2, axis=(0, 2)) / (m * window)
        power = jnp.maximum(power, EPS)
        scale = jnp.sqrt(power)

        # oldest b ring slots are exactly the frames delayed by D hops
        regressor = jnp.swapaxes(ring[:b], 0, 1).reshape(k, b * m)
        d_ref = x["d"][:, 0]
        y = jnp.einsum("kq,kq->k", jnp.conj(theta), regressor)
        residual = d_ref - y

        reg_n = regressor / scale[:, None]
        err_n = (residual / scale)[:, None]
        out_n = (y / scale)[:, None]
        opt_in = OptIn(grad=-reg_n * jnp.conj(err_n), regressor=reg_n,
                       err=err_n, out=out_n)

        y_time, ola = dsp.ola_synthesize(y[:, None], tstate["ola"], self.spec)
        out = StepOut(opt_in=opt_in, d_loss=d_ref[:, None], y_loss=y[:, None],
                      y_time=y_time,
                      af_loss=jnp.mean(jnp.abs(residual) ** 2 / power))
        return {"ring": ring, "ola": ola}, out

    def metric(self, scene, result) -> float:
        """Primary score: negated segmental energy-removal ratio (less
        remaining energy is better), so grid search can maximize."""
        mix = np.asarray(result.target_stream)
        out = np.asarray(result.target_stream) - np.asarray(result.y_stream)
        vad = metrics.energy_vad(mix, self.spec)
        return -metrics.srr(mix, out, self.spec, vad).mean

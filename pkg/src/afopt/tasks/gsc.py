"""Generalized sidelobe canceller beamforming.

The distortionless branch applies a fixed steering vector v (normalized
principal component of the clean-source covariance, oracle access to the
clean multichannel image); the adaptive branch filters the blocked signals
B^H u and is subtracted, so the beamformed output is the branch error
``s_hat = (v - B theta)^H u`` and minimizing the branch MSE minimizes output
power while the look direction stays untouched.
"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .. import dsp, metrics
from .base import OptIn, StepOut


def estimate_steering(s_frames, forget: float = 0.99, reg: float = 1e-4):
    """Steering vector and blocking matrix from clean-source frames.

    Runs the recursive covariance estimate over all frames, extracts the
    principal component per bin by power iteration, fixes phase and scale by
    the first element, and builds a blocking matrix orthogonal to it.

    Args:
        s_frames: complex ``(F, K, M)`` clean-source frames.

    Returns:
        ``(v, B)`` with shapes ``(K, M)`` and ``(K, M, M-1)``;
        ``v[:, 0] == 1`` and ``v^H B == 0`` per bin.
    """
    s_frames = jnp.asarray(s_frames, dtype=jnp.complex128)
    f, k, m = s_frames.shape
    if f == 0:
        raise ValueError("no frames to estimate steering from")

    def cov_step(phi, s):
        outer = s[:, :, None] * jnp.conj(s[:, None, :])
        phi = forget * phi + (1.0 - forget) * (
            outer + reg * jnp.eye(m, dtype=jnp.complex128))
        return phi, None

    phi0 = jnp.zeros((k, m, m), dtype=jnp.complex128)
    phi, _ = jax.lax.scan(cov_step, phi0, s_frames)
    if not bool(jnp.all(jnp.linalg.norm(phi, axis=(1, 2)) > 0)):
        raise ValueError("zero source covariance; cannot steer")
    v = principal_component(phi)
    v = v / v[:, :1]
    blocking = blocking_matrix(v)
    return v, blocking


def principal_component(phi, iters: int = 50, tol: float = 1e-10):
    """Dominant eigenvector of each ``(M, M)`` Hermitian PSD slice."""
    phi = jnp.asarray(phi, dtype=jnp.complex128)
    m = phi.shape[-1]
    # fixed generic start, extremely unlikely to be orthogonal to the
    # dominant eigenvector of any test matrix
    x = jnp.exp(1j * 0.61803398875 * jnp.arange(m)) * (1.0 + jnp.arange(m) / m)
    x = jnp.broadcast_to(x, phi.shape[:-1])

    def body(x, _):
        y = jnp.einsum("...ij,...j->...i", phi, x)
        norm = jnp.linalg.norm(y, axis=-1, keepdims=True)
        y = y / jnp.maximum(norm, 1e-300)
        delta = jnp.linalg.norm(y - x, axis=-1)
        return jnp.where(delta[..., None] > tol, y, x), None

    x, _ = jax.lax.scan(body, x, None, length=iters)
    return x


def blocking_matrix(v):
    """Columns spanning the orthogonal complement of ``v`` per bin:
    first row ``-conj(v_1..v_{M-1}) / conj(v_0)``, identity below."""
    v = jnp.asarray(v, dtype=jnp.complex128)
    k, m = v.shape
    top = -(jnp.conj(v[:, 1:]) / jnp.conj(v[:, :1]))[:, None, :]
    eye = jnp.broadcast_to(jnp.eye(m - 1, dtype=jnp.complex128),
                           (k, m - 1, m - 1))
    return jnp.concatenate([top, eye], axis=1)


def beampattern(v_k, b_k, theta_k, positions, freq_hz: float,
                angles_rad, speed_of_sound: float = 343.0):
    """Far-field response power of the beamformer at one frequency.

    Returns linear gains ``|(v - B theta)^H a(angle)|^2`` over the angle grid.
    """
    v_k = np.asarray(v_k)
    w_eff = v_k - np.asarray(b_k) @ np.asarray(theta_k) if v_k.size > 1 \
        else v_k
    positions = np.asarray(positions)
    angles = np.asarray(angles_rad)
    direction = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    tau = -(direction @ positions.T) / speed_of_sound  # (A, M) seconds
    manifold = np.exp(-2j * np.pi * freq_hz * tau)
    response = manifold @ np.conj(w_eff)
    return np.abs(response) ** 2


@dataclass(frozen=True)
class GscTask:
    spec: dsp.FrameSpec
    forget: float = 0.99
    reg: float = 1e-4

    def __post_init__(self):
        if self.spec.window != "hann":
            raise ValueError("beamforming task uses hann overlap-add framing")
        if self.spec.channels < 2:
            raise ValueError("beamforming needs at least two channels")

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
        return self.spec.channels - 1

    @property
    def out_channels(self):
        return 1

    kind = "gsc"
    constrained = False

    def constrain(self, theta):
        return theta

    def prepare(self, scene):
        u_frames = dsp.frame_signal(scene.u, self.spec)
        s_frames = dsp.frame_signal(scene.refs["image"], self.spec)
        v, blocking = estimate_steering(s_frames, self.forget, self.reg)
        d_frames = jnp.einsum("km,fkm->fk", jnp.conj(v), u_frames)
        target = dsp.resynthesize(d_frames[:, :, None], self.spec)
        return {"xs": {"u": u_frames}, "target": target,
                "n_frames": u_frames.shape[0], "steering": v,
                "blocking": blocking}

    def init_theta(self):
        return jnp.zeros((self.n_bins, self.taps), dtype=jnp.complex128)

    def init_tstate(self, prepared):
        return {"v": prepared["steering"], "B": prepared["blocking"],
                "ola": dsp.ola_init(self.spec, 1)}

    def step(self, theta, tstate, x):
        u = x["u"]
        regressor = jnp.einsum("kmq,km->kq", jnp.conj(tstate["B"]), u)
        desired = jnp.einsum("km,km->k", jnp.conj(tstate["v"]), u)
        y = jnp.einsum("kq,kq->k", jnp.conj(theta), regressor)
        err = desired - y  # the beamformed output itself
        opt_in = OptIn(grad=-regressor * jnp.conj(err)[:, None],
                       regressor=regressor, err=err[:, None], out=y[:, None])
        y_time, ola = dsp.ola_synthesize(y[:, None], tstate["ola"], self.spec)
        out = StepOut(opt_in=opt_in, d_loss=desired[:, None],
                      y_loss=y[:, None], y_time=y_time,
                      af_loss=jnp.mean(jnp.abs(err) ** 2))
        return {**tstate, "ola": ola}, out

    def metric(self, scene, result) -> float:
        """Primary score: SI-SDR of the beamformed stream against the clean
        source, compensating the overlap-add path delay."""
        out = (np.asarray(result.target_stream)
               - np.asarray(result.y_stream)).reshape(-1)
        lag = self.spec.win_len - self.spec.hop
        ref = np.asarray(scene.refs["s"]).reshape(-1)
        n = min(out.size - lag, ref.size)
        if n <= 0:
            return float("nan")
        return metrics.si_sdr(ref[:n], out[lag:lag + n])

"""Single-pass streaming execution of a task with any optimizer.

Every consumer (evaluation, inference, validation during training, the grid
tuner) runs scenes through the same compiled scan, so outputs are
bit-identical across entry points.  Runners are compiled once per
(task, optimizer, frame-count) combination and cached.
"""

import time
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .tasks.base import OptimizerSpec, optimizer_init, optimizer_step


class DivergenceError(RuntimeError):
    """Raised when the learned optimizer emits non-finite filter state."""


@dataclass
class StreamResult:
    y_stream: np.ndarray       # (F*R, C) filter output samples
    target_stream: np.ndarray  # (F*R, C) aligned desired samples
    af_loss: np.ndarray        # (F,) instantaneous filter loss per hop
    theta: np.ndarray          # (K, P) final filter
    diverged: int
    n_frames: int
    elapsed: float = 0.0
    d_freq: np.ndarray | None = None  # (F, K, G) when collected
    y_freq: np.ndarray | None = None

    @property
    def error_stream(self):
        """target - y: the residual/enhanced signal for cancellation tasks."""
        return self.target_stream - self.y_stream


_RUNNERS = {}


def _get_runner(task, opt_spec: OptimizerSpec, collect_freq: bool):
    key = (task, opt_spec, collect_freq)
    if key in _RUNNERS:
        return _RUNNERS[key]

    def run(params, theta0, ostate0, tstate0, xs):
        def step(carry, x):
            theta, ostate, tstate, div = carry
            tstate, out = task.step(theta, tstate, x)
            delta, ostate, bad = optimizer_step(task, opt_spec, params,
                                                ostate, out.opt_in)
            theta = task.constrain(theta + delta)
            collected = (out.y_time, out.af_loss)
            if collect_freq:
                collected = collected + (out.d_loss, out.y_loss)
            return (theta, ostate, tstate, div + bad), collected

        carry, ys = jax.lax.scan(step, (theta0, ostate0, tstate0,
                                        jnp.int64(0)), xs)
        return carry, ys

    runner = jax.jit(run)
    _RUNNERS[key] = runner
    return runner


def run_scene(task, opt_spec: OptimizerSpec, scene, params=None,
              theta0=None, collect_freq: bool = False) -> StreamResult:
    """Adapt through one scene and collect the output streams.

    ``params`` is the learned-optimizer weight pytree (ignored for classical
    rules).  A non-finite filter after a learned-optimizer run raises
    :class:`DivergenceError` naming the first bad frequency bin; classical
    divergence is only counted (RLS resets itself).
    """
    prepared = task.prepare(scene)
    return run_prepared(task, opt_spec, prepared, params=params,
                        theta0=theta0, collect_freq=collect_freq)


def run_prepared(task, opt_spec: OptimizerSpec, prepared, params=None,
                 theta0=None, collect_freq: bool = False) -> StreamResult:
    runner = _get_runner(task, opt_spec, collect_freq)
    theta0 = task.init_theta() if theta0 is None else jnp.asarray(theta0)
    ostate0 = optimizer_init(task, opt_spec)
    tstate0 = task.init_tstate(prepared)
    if params is None:
        params = {}
    start = time.perf_counter()
    (theta, _, _, div), ys = runner(params, theta0, ostate0, tstate0,
                                    prepared["xs"])
    theta = np.asarray(jax.block_until_ready(theta))
    elapsed = time.perf_counter() - start
    y_hops = np.asarray(ys[0])
    result = StreamResult(
        y_stream=y_hops.reshape(-1, y_hops.shape[-1]),
        target_stream=np.asarray(prepared["target"]).reshape(
            -1, y_hops.shape[-1]),
        af_loss=np.asarray(ys[1]),
        theta=theta,
        diverged=int(div),
        n_frames=int(prepared["n_frames"]),
        elapsed=elapsed,
        d_freq=np.asarray(ys[2]) if collect_freq else None,
        y_freq=np.asarray(ys[3]) if collect_freq else None,
    )
    if opt_spec.kind == "meta" and not np.all(np.isfinite(result.theta)):
        bad = np.flatnonzero(~np.isfinite(result.theta).all(axis=1))[0]
        raise DivergenceError(
            f"learned optimizer diverged at frequency bin {bad}")
    return result


def primary_output(task, result: StreamResult) -> np.ndarray:
    """The task's headline audio output stream.

    System-ID/EQ estimate the desired signal directly; cancellation-style
    tasks (AEC residual, dereverberated, beamformed) emit target - y.
    """
    kind = getattr(task, "kind", None)
    if kind in ("system_id", "eq"):
        return result.y_stream
    return result.error_stream


def real_time_factor(result: StreamResult, sample_rate: int, hop: int) -> float:
    audio_seconds = result.n_frames * hop / sample_rate
    return result.elapsed / audio_seconds if audio_seconds > 0 else float("inf")

"""Shared plumbing between task harnesses and optimizers.

A task turns a scene into a stream of per-hop step inputs and exposes one
``step`` that applies the current filter and emits everything an optimizer
needs.  Optimizer-facing signals use the conjugated-application convention
``y = theta^H r``: tasks whose synthesis path multiplies the filter in
unconjugated form conjugate their emissions, so a single gradient definition
``grad = -r * conj(d - y)`` (the Wirtinger derivative w.r.t. ``conj(theta)``)
serves every update rule, classical or learned.
"""

from dataclasses import dataclass
from typing import NamedTuple

import jax.numpy as jnp

from .. import classic, neural


class OptIn(NamedTuple):
    """Per-hop optimizer inputs, all per frequency bin.

    grad: ``(K, P)`` loss gradient; regressor: ``(K, P)`` filter input block;
    err / out: ``(K, G)`` per-group error and filter output.
    """

    grad: jnp.ndarray
    regressor: jnp.ndarray
    err: jnp.ndarray
    out: jnp.ndarray


class StepOut(NamedTuple):
    opt_in: OptIn
    d_loss: jnp.ndarray  # (K, G) desired side of the frame loss
    y_loss: jnp.ndarray  # (K, G) estimate side of the frame loss
    y_time: jnp.ndarray  # (R, C) time-domain output samples for this hop
    af_loss: jnp.ndarray  # scalar instantaneous filter loss


@dataclass(frozen=True)
class OptimizerSpec:
    """Which update rule drives the filter, with its hyperparameters."""

    kind: str  # lms | nlms | rmsprop | rls | meta
    step_size: float = 0.1
    forget: float = 0.99
    init_scale: float = 1e-2
    hidden: int = 32
    feature_set: str = "full"

    def __post_init__(self):
        if self.kind not in ("lms", "nlms", "rmsprop", "rls", "meta"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_init(task, spec: OptimizerSpec):
    k, g, q = task.n_bins, task.groups, task.taps
    if spec.kind == "lms":
        return ()
    if spec.kind == "nlms":
        return classic.nlms_init(k)
    if spec.kind == "rmsprop":
        return classic.rmsprop_init(k, g * q)
    if spec.kind == "rls":
        return classic.rls_init(k, g, q, classic.RlsConfig(
            forget=spec.forget, init_scale=spec.init_scale))
    return neural.init_state(k, spec.hidden)


def optimizer_step(task, spec: OptimizerSpec, params, state, opt_in: OptIn):
    """Run one update rule step; returns ``(delta (K, P), state, diverged)``."""
    if spec.kind == "lms":
        return classic.lms_step(opt_in.grad, classic.LmsConfig(spec.step_size)), \
            state, jnp.int64(0)
    if spec.kind == "nlms":
        delta, state = classic.nlms_step(
            opt_in.grad, opt_in.regressor, state,
            classic.NlmsConfig(spec.step_size, spec.forget))
        return delta, state, jnp.int64(0)
    if spec.kind == "rmsprop":
        delta, state = classic.rmsprop_step(
            opt_in.grad, state, classic.RmsPropConfig(spec.step_size, spec.forget))
        return delta, state, jnp.int64(0)
    if spec.kind == "rls":
        k = opt_in.grad.shape[0]
        reg = opt_in.regressor.reshape(k, task.groups, task.taps)
        desired = opt_in.out + opt_in.err  # d = y + e
        delta, state, diverged = classic.rls_step(
            reg, desired, opt_in.out, state,
            classic.RlsConfig(spec.forget, spec.init_scale))
        return delta.reshape(k, -1), state, diverged
    feats = neural.assemble_features(opt_in.grad, opt_in.regressor,
                                     opt_in.err, opt_in.out, spec.feature_set)
    delta, state = neural.forward(params, feats, state)
    return delta, state, jnp.int64(0)


def meta_input_dim(task, feature_set: str = "full") -> int:
    return neural.feature_dim(task.groups * task.taps, feature_set)

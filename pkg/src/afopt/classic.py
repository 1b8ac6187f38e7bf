"""Classical per-frequency adaptive-filter update rules.

All rules consume the gradient convention used throughout the package:
``grad = dL/d(conj(theta))`` (Wirtinger derivative with respect to the
conjugated coefficient, no factor of two), so plain LMS is
``delta = -step_size * grad``, the textbook complex LMS ``u* e`` update.

Tasks hand the optimizer their signals in conjugated-application form,
``y = theta^H r`` with regressor ``r``, which makes the RLS recursion below
(Kalman gain, inverse-covariance update, ``delta = gain * conj(d - y)``)
converge for every task regardless of how the filter product is written in
the synthesis path.

Every step is a pure function ``(inputs, state) -> (delta, state)``; states
are arrays shaped per frequency bin so the rules vectorize over ``K`` bins
and, for RLS, over ``G`` independent filter groups of ``Q`` taps each.
"""

from dataclasses import dataclass

import jax.numpy as jnp

EPS = 1e-8


@dataclass(frozen=True)
class LmsConfig:
    step_size: float = 0.1


@dataclass(frozen=True)
class NlmsConfig:
    step_size: float = 1.0
    forget: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.forget <= 1.0:
            raise ValueError("forget factor must be in [0, 1]")


@dataclass(frozen=True)
class RmsPropConfig:
    step_size: float = 0.1
    forget: float = 0.9


@dataclass(frozen=True)
class RlsConfig:
    forget: float = 0.99
    # precision is initialized to identity / init_scale; pick per input SNR
    init_scale: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.forget <= 1.0:
            raise ValueError("forget factor must be in (0, 1]")


def lms_step(grad, cfg: LmsConfig):
    return -cfg.step_size * grad


def nlms_init(n_bins: int):
    return jnp.zeros(n_bins)


def nlms_step(grad, regressor, power, cfg: NlmsConfig):
    """Input-power-normalized LMS.

    ``power`` is the per-bin running input energy; the norm runs over the
    whole regressor row (all taps and channels of the bin).
    """
    power_next = cfg.forget * power + (1.0 - cfg.forget) * jnp.sum(
        jnp.abs(regressor) ** 2, axis=-1)
    delta = -cfg.step_size * grad / (power_next[:, None] + EPS)
    return delta, power_next


def rmsprop_init(n_bins: int, n_taps: int):
    return jnp.zeros((n_bins, n_taps))


def rmsprop_step(grad, grad_power, cfg: RmsPropConfig):
    """Gradient-power-normalized step with elementwise running normalizer."""
    power_next = cfg.forget * grad_power + (1.0 - cfg.forget) * jnp.abs(grad) ** 2
    delta = -cfg.step_size * grad / (jnp.sqrt(power_next) + EPS)
    return delta, power_next


def rls_init(n_bins: int, groups: int, taps: int, cfg: RlsConfig):
    eye = jnp.eye(taps, dtype=jnp.complex128) / cfg.init_scale
    return jnp.broadcast_to(eye, (n_bins, groups, taps, taps))


def rls_step(regressor, desired, estimate, precision, cfg: RlsConfig):
    """Recursive least squares via the matrix inversion lemma.

    Args:
        regressor: ``(K, G, Q)`` input vectors (conjugated-application form).
        desired: ``(K, G)`` target values.
        estimate: ``(K, G)`` current filter outputs ``theta^H r``.
        precision: ``(K, G, Q, Q)`` running inverse covariance.

    Returns:
        ``(delta, precision, diverged)``.  A bin whose precision turns
        non-finite is reset to its initialization and its update zeroed;
        ``diverged`` counts how many (bin, group) pairs were reset.
    """
    pr = jnp.einsum("kgij,kgj->kgi", precision, regressor)
    denom = cfg.forget + jnp.real(
        jnp.einsum("kgi,kgi->kg", jnp.conj(regressor), pr))
    gain = pr / denom[..., None]
    rhp = jnp.einsum("kgi,kgij->kgj", jnp.conj(regressor), precision)
    precision_next = (precision - gain[..., :, None] * rhp[..., None, :]) \
        / cfg.forget
    delta = gain * jnp.conj(desired - estimate)[..., None]

    ok = jnp.all(jnp.isfinite(precision_next), axis=(-2, -1)) \
        & jnp.all(jnp.isfinite(delta), axis=-1)
    fresh = jnp.eye(regressor.shape[-1], dtype=jnp.complex128) / cfg.init_scale
    precision_next = jnp.where(ok[..., None, None], precision_next, fresh)
    delta = jnp.where(ok[..., None], delta, 0.0)
    return delta, precision_next, jnp.sum(~ok)

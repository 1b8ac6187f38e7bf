"""Complex-valued recurrent optimizer network.

One small network maps per-frequency filter signals to a per-frequency
coefficient update.  The weights are shared across all bins; each bin keeps
its own recurrent state, so the forward pass is a batched matrix product over
the frequency axis and the whole module is frequency-permutation equivariant.

Architecture: linear -> split ReLU -> GRU -> GRU -> linear -> split ReLU ->
linear.  The final layer is purely linear so updates can take any complex
value.  All activations use the split convention: the real-valued function is
applied to real and imaginary parts separately, e.g.
``split_sigmoid(z) = sigmoid(Re z) + 1j * sigmoid(Im z)``.  The GRU combines
complex matrix products with split gate activations:

    z = split_sigmoid(Wz x + Uz h + bz)
    r = split_sigmoid(Wr x + Ur h + br)
    c = split_tanh(Wc x + Uc (r * h) + bc)
    h' = z * h + ((1 - Re z) + 1j (1 - Im z)) * c

where ``*`` is the complex elementwise product and the update-gate complement
is taken per part.  With all-real values this reduces to the textbook GRU.
"""

import numpy as np
import jax
import jax.numpy as jnp

FEATURE_SETS = ("full", "grad_only")


def whiten(z):
    """Compress magnitudes to ``ln(1 + |z|)`` keeping the phase unchanged."""
    z = jnp.asarray(z)
    mag = jnp.abs(z)
    # guarded magnitude keeps the zero branch free of 0/0 under autodiff
    safe = jnp.where(mag > 0, mag, 1.0)
    return z * (jnp.log1p(safe) / safe)


def split_relu(z):
    return jnp.maximum(z.real, 0.0) + 1j * jnp.maximum(z.imag, 0.0)


def split_sigmoid(z):
    return jax.nn.sigmoid(z.real) + 1j * jax.nn.sigmoid(z.imag)


def split_tanh(z):
    return jnp.tanh(z.real) + 1j * jnp.tanh(z.imag)


def gru_cell(x, h, p):
    """One complex GRU step; ``x``/``h`` are ``(..., H_in)`` / ``(..., H)``."""
    z = split_sigmoid(x @ p["wz"].T + h @ p["uz"].T + p["bz"])
    r = split_sigmoid(x @ p["wr"].T + h @ p["ur"].T + p["br"])
    c = split_tanh(x @ p["wc"].T + (r * h) @ p["uc"].T + p["bc"])
    comp = (1.0 - z.real) + 1j * (1.0 - z.imag)
    return z * h + comp * c


def feature_dim(n_taps: int, feature_set: str) -> int:
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}")
    return n_taps if feature_set == "grad_only" else 4 * n_taps


def assemble_features(grad, regressor, err, out, feature_set: str = "full"):
    """Stack and whiten the optimizer inputs for every frequency bin.

    Args:
        grad: ``(K, P)`` filter-loss gradient.
        regressor: ``(K, P)`` input signal block seen by the filter.
        err: ``(K, G)`` per-group error ``d - y`` (broadcast across the
            ``P // G`` taps of each group when stacking).
        out: ``(K, G)`` per-group filter output.

    Returns:
        ``(K, 4P)`` complex feature matrix (``(K, P)`` for ``grad_only``).
    """
    grad = jnp.asarray(grad)
    if grad.ndim != 2:
        raise ValueError(f"grad must be (K, P), got {grad.shape}")
    if feature_set == "grad_only":
        return whiten(grad)
    if feature_set != "full":
        raise ValueError(f"unknown feature set {feature_set!r}")
    regressor = jnp.asarray(regressor)
    err = jnp.asarray(err)
    out = jnp.asarray(out)
    if regressor.shape != grad.shape or err.shape != out.shape \
            or err.shape[0] != grad.shape[0] or grad.shape[1] % err.shape[1]:
        raise ValueError(
            f"inconsistent feature shapes: grad {grad.shape}, regressor "
            f"{regressor.shape}, err {err.shape}, out {out.shape}")
    reps = grad.shape[1] // err.shape[1]
    return jnp.concatenate(
        [whiten(grad), whiten(regressor),
         whiten(jnp.repeat(err, reps, axis=1)),
         whiten(jnp.repeat(out, reps, axis=1))], axis=1)


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------


def _complex_uniform(rng, shape, fan_in):
    # zero-mean complex draw with E|w|^2 = 1/fan_in: uniform magnitude on
    # [0, sqrt(3/fan_in)], uniform phase
    mag = rng.uniform(0.0, np.sqrt(3.0 / fan_in), size=shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    return jnp.asarray(mag * np.exp(1j * phase))


def _init_gru(rng, h_in, h):
    p = {}
    for gate in ("z", "r", "c"):
        p["w" + gate] = _complex_uniform(rng, (h, h_in), h_in)
        p["u" + gate] = _complex_uniform(rng, (h, h), h)
        p["b" + gate] = jnp.zeros(h, dtype=jnp.complex128)
    return p


def init_params(seed: int, in_dim: int, out_dim: int, hidden: int = 32):
    """Draw optimizer weights deterministically from ``seed``.

    Weight magnitudes are variance-scaled by fan-in, phases uniform; biases
    start at zero.
    """
    rng = np.random.default_rng(seed)
    return {
        "in": {"w": _complex_uniform(rng, (hidden, in_dim), in_dim),
               "b": jnp.zeros(hidden, dtype=jnp.complex128)},
        "gru1": _init_gru(rng, hidden, hidden),
        "gru2": _init_gru(rng, hidden, hidden),
        "mid": {"w": _complex_uniform(rng, (hidden, hidden), hidden),
                "b": jnp.zeros(hidden, dtype=jnp.complex128)},
        "out": {"w": _complex_uniform(rng, (out_dim, hidden), hidden),
                "b": jnp.zeros(out_dim, dtype=jnp.complex128)},
    }


def init_state(n_bins: int, hidden: int = 32):
    """Zeroed per-frequency recurrent state, shape ``(K, 2, H)``."""
    return jnp.zeros((n_bins, 2, hidden), dtype=jnp.complex128)


def forward(params, features, state):
    """Run the optimizer network on all frequency bins at once.

    Args:
        params: pytree from :func:`init_params`.
        features: ``(K, F)`` whitened inputs.
        state: ``(K, 2, H)`` recurrent state.

    Returns:
        ``(delta, state')`` with ``delta`` of shape ``(K, out_dim)``.
    """
    x = split_relu(features @ params["in"]["w"].T + params["in"]["b"])
    h1 = gru_cell(x, state[:, 0], params["gru1"])
    h2 = gru_cell(h1, state[:, 1], params["gru2"])
    x = split_relu(h2 @ params["mid"]["w"].T + params["mid"]["b"])
    delta = x @ params["out"]["w"].T + params["out"]["b"]
    return delta, jnp.stack([h1, h2], axis=1)


def param_count(params) -> int:
    return sum(int(np.prod(p.shape)) for p in jax.tree_util.tree_leaves(params))

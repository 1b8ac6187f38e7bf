"""Learned-optimizer network: activations, GRU, forward pass, init."""

import numpy as np
import jax.numpy as jnp
import pytest
from hypothesis import given, settings, strategies as st

from afopt import neural


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


finite_complex = st.complex_numbers(min_magnitude=0, max_magnitude=1e6,
                                    allow_nan=False, allow_infinity=False)


class TestWhiten:
    def test_zero(self):
        assert complex(neural.whiten(jnp.array(0.0 + 0j))) == 0

    def test_log_of_e(self):
        out = complex(neural.whiten(jnp.array((np.e - 1) + 0j)))
        assert out == pytest.approx(1.0 + 0j, abs=1e-12)

    def test_imaginary_unit(self):
        out = complex(neural.whiten(jnp.array(1j)))
        assert out == pytest.approx(np.log(2.0) * 1j, abs=1e-12)

    @given(finite_complex)
    @settings(max_examples=200, deadline=None)
    def test_phase_preserved_and_magnitude_compressed(self, z):
        out = complex(neural.whiten(jnp.array(z, dtype=jnp.complex128)))
        assert abs(out) == pytest.approx(np.log1p(abs(z)), rel=1e-12,
                                         abs=1e-300)
        if abs(z) > 1e-12:
            assert np.angle(out) == pytest.approx(np.angle(z), abs=1e-9)

    @given(st.floats(0.0, 1e6), st.floats(0.0, 1e6))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_magnitude(self, a, b):
        fa = abs(complex(neural.whiten(jnp.array(a + 0j))))
        fb = abs(complex(neural.whiten(jnp.array(b + 0j))))
        if a < b:
            assert fa < fb or (fa == fb and a == b)


class TestSplitActivations:
    @pytest.mark.parametrize("z,expect", [
        (1 - 2j, 1 + 0j), (-1 - 1j, 0j), (3 + 4j, 3 + 4j)])
    def test_split_relu(self, z, expect):
        assert complex(neural.split_relu(jnp.array(z))) == expect

    def test_split_sigmoid_at_zero(self):
        assert complex(neural.split_sigmoid(jnp.array(0j))) == 0.5 + 0.5j


class TestGruCell:
    def zero_params(self, h_in, h):
        z = lambda *s: jnp.zeros(s, dtype=jnp.complex128)
        return {"wz": z(h, h_in), "uz": z(h, h), "bz": z(h),
                "wr": z(h, h_in), "ur": z(h, h), "br": z(h),
                "wc": z(h, h_in), "uc": z(h, h), "bc": z(h)}

    def test_zero_parameter_fixed_point(self):
        # all gates sit at sigmoid(0) = 0.5 per part, candidate at 0, so
        # h' = (0.5 + 0.5j) * h elementwise (complex product)
        rng = np.random.default_rng(0)
        h = jnp.asarray(crandn(rng, 4))
        x = jnp.asarray(crandn(rng, 3))
        out = neural.gru_cell(x, h, self.zero_params(3, 4))
        assert np.allclose(np.asarray(out), (0.5 + 0.5j) * np.asarray(h),
                           atol=1e-14)

    def test_zero_input_zero_state(self):
        out = neural.gru_cell(jnp.zeros(3, dtype=jnp.complex128),
                              jnp.zeros(4, dtype=jnp.complex128),
                              self.zero_params(3, 4))
        assert np.all(np.asarray(out) == 0)

    def test_matches_straight_line_reference(self):
        # independent re-implementation of the documented gating formula
        rng = np.random.default_rng(1)
        p = {k: jnp.asarray(crandn(rng, 4, 3 if k.startswith("w") else 4))
             if not k.startswith("b") else jnp.asarray(crandn(rng, 4))
             for k in ("wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc")}
        x = crandn(rng, 3)
        h = crandn(rng, 4)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        def split_sig(v):
            return sig(v.real) + 1j * sig(v.imag)

        def split_tanh(v):
            return np.tanh(v.real) + 1j * np.tanh(v.imag)

        pz = {k: np.asarray(v) for k, v in p.items()}
        zg = split_sig(pz["wz"] @ x + pz["uz"] @ h + pz["bz"])
        rg = split_sig(pz["wr"] @ x + pz["ur"] @ h + pz["br"])
        cg = split_tanh(pz["wc"] @ x + pz["uc"] @ (rg * h) + pz["bc"])
        expected = zg * h + ((1 - zg.real) + 1j * (1 - zg.imag)) * cg

        out = neural.gru_cell(jnp.asarray(x), jnp.asarray(h), p)
        assert np.linalg.norm(np.asarray(out) - expected) <= 1e-12


class TestAssembleFeatures:
    def test_all_zero(self):
        z = jnp.zeros((4, 2), dtype=jnp.complex128)
        g = jnp.zeros((4, 1), dtype=jnp.complex128)
        feats = neural.assemble_features(z, z, g, g)
        assert feats.shape == (4, 8)
        assert np.all(np.asarray(feats) == 0)

    def test_error_slot_zero_when_outputs_match(self):
        rng = np.random.default_rng(2)
        grad = jnp.asarray(crandn(rng, 4, 2))
        reg = jnp.asarray(crandn(rng, 4, 2))
        err = jnp.zeros((4, 1), dtype=jnp.complex128)
        out = jnp.asarray(crandn(rng, 4, 1))
        feats = np.asarray(neural.assemble_features(grad, reg, err, out))
        assert np.all(feats[:, 4:6] == 0)  # third block of two taps

    def test_magnitudes_are_whitened(self):
        rng = np.random.default_rng(3)
        grad = jnp.asarray(crandn(rng, 5, 3))
        reg = jnp.asarray(crandn(rng, 5, 3))
        err = jnp.asarray(crandn(rng, 5, 1))
        out = jnp.asarray(crandn(rng, 5, 1))
        feats = np.asarray(neural.assemble_features(grad, reg, err, out))
        raw = np.concatenate([np.asarray(grad), np.asarray(reg),
                              np.repeat(np.asarray(err), 3, axis=1),
                              np.repeat(np.asarray(out), 3, axis=1)], axis=1)
        assert np.allclose(np.abs(feats), np.log1p(np.abs(raw)), atol=1e-12)

    def test_grad_only_shape(self):
        g = jnp.ones((4, 3), dtype=jnp.complex128)
        feats = neural.assemble_features(g, None, None, None,
                                         feature_set="grad_only")
        assert feats.shape == (4, 3)

    def test_shape_mismatch_rejected(self):
        g = jnp.ones((4, 3), dtype=jnp.complex128)
        with pytest.raises(ValueError):
            neural.assemble_features(g, jnp.ones((4, 2),
                                                 dtype=jnp.complex128),
                                     jnp.ones((4, 1), dtype=jnp.complex128),
                                     jnp.ones((4, 1), dtype=jnp.complex128))


class TestForward:
    def make(self, seed=0, k=8, p=2, h=6):
        params = neural.init_params(seed, 4 * p, p, h)
        state = neural.init_state(k, h)
        rng = np.random.default_rng(seed + 100)
        feats = jnp.asarray(crandn(rng, k, 4 * p))
        return params, state, feats

    def test_zero_output_layer_gives_zero_delta_but_state_moves(self):
        params, state, feats = self.make()
        params["out"]["w"] = jnp.zeros_like(params["out"]["w"])
        params["out"]["b"] = jnp.zeros_like(params["out"]["b"])
        delta, state_next = neural.forward(params, feats, state)
        assert np.all(np.asarray(delta) == 0)
        assert np.any(np.asarray(state_next) != 0)

    def test_frequency_permutation_equivariance(self):
        params, state, feats = self.make(seed=1)
        rng = np.random.default_rng(5)
        state = jnp.asarray(crandn(rng, *state.shape))
        perm = rng.permutation(feats.shape[0])
        d1, s1 = neural.forward(params, feats, state)
        d2, s2 = neural.forward(params, feats[perm], state[perm])
        assert np.allclose(np.asarray(d1)[perm], np.asarray(d2), atol=1e-12)
        assert np.allclose(np.asarray(s1)[perm], np.asarray(s2), atol=1e-12)

    def test_single_row_matches_batched(self):
        params, state, feats = self.make(seed=2)
        rng = np.random.default_rng(6)
        state = jnp.asarray(crandn(rng, *state.shape))
        d_all, s_all = neural.forward(params, feats, state)
        for k in range(feats.shape[0]):
            d_row, s_row = neural.forward(params, feats[k:k + 1],
                                          state[k:k + 1])
            assert np.allclose(np.asarray(d_row)[0], np.asarray(d_all)[k],
                               atol=1e-12)
            assert np.allclose(np.asarray(s_row)[0], np.asarray(s_all)[k],
                               atol=1e-12)

    def test_forward_deterministic(self):
        params, state, feats = self.make(seed=3)
        d1, s1 = neural.forward(params, feats, state)
        d2, s2 = neural.forward(params, feats, state)
        assert np.array_equal(np.asarray(d1), np.asarray(d2))
        assert np.array_equal(np.asarray(s1), np.asarray(s2))


class TestInit:
    def test_same_seed_identical(self):
        a = neural.init_params(7, 8, 2, 6)
        b = neural.init_params(7, 8, 2, 6)
        for ka, kb in zip(sorted(a), sorted(b)):
            for n in a[ka]:
                assert np.array_equal(np.asarray(a[ka][n]),
                                      np.asarray(b[kb][n]))

    def test_different_seeds_differ(self):
        a = neural.init_params(7, 8, 2, 6)
        b = neural.init_params(8, 8, 2, 6)
        assert not np.array_equal(np.asarray(a["in"]["w"]),
                                  np.asarray(b["in"]["w"]))

    def test_variance_scaling(self):
        # E|w|^2 should be 1/fan_in within 20% for a >=1000-sample draw
        fan_in = 64
        params = neural.init_params(0, fan_in, 2, 32)  # in.w is 32x64 = 2048
        w = np.asarray(params["in"]["w"])
        assert w.size >= 1000
        measured = float(np.mean(np.abs(w) ** 2))
        assert abs(measured - 1.0 / fan_in) <= 0.2 / fan_in

    def test_biases_zero(self):
        params = neural.init_params(0, 8, 2, 4)
        assert np.all(np.asarray(params["gru1"]["bz"]) == 0)
        assert np.all(np.asarray(params["out"]["b"]) == 0)

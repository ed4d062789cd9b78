import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopnet import koopman as kp
from koopnet import nnet

from helpers import identity_model, randomize_biases

PAIR = kp.SpectrumConfig(1, 0)
TWO_REAL = kp.SpectrumConfig(0, 2)
MIXED = kp.SpectrumConfig(1, 1)


def rot(theta):
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


def test_spectrum_latent_dim():
    assert kp.SpectrumConfig(2, 1).latent_dim == 5
    with pytest.raises(ValueError):
        kp.SpectrumConfig(0, 0)
    assert {k: v.latent_dim for k, v in kp.SPECTRA.items()} == {
        "discrete_spectrum": 2, "pendulum": 2, "fluid1": 2, "fluid2": 3,
    }


def test_init_model_architecture():
    m = kp.init_model(3, MIXED, [8, 6], [5], 0.01, seed=0)
    assert m.encoder.dims == [3, 8, 6, 3]
    assert m.decoder.dims == [3, 6, 8, 3]
    assert [n.dims for n in m.aux_pairs] == [[1, 5, 2]]
    assert [n.dims for n in m.aux_reals] == [[1, 5, 1]]


def test_model_rejects_mismatch():
    m = kp.init_model(2, PAIR, [4], [4], 0.1, seed=0)
    with pytest.raises(nnet.ArchitectureError):
        kp.KoopmanModel(m.encoder, m.decoder, [], [], PAIR, 0.1)


def test_encode_identity():
    m = identity_model(PAIR)
    assert np.array_equal(kp.encode(m, np.array([0.2, -0.2])), [0.2, -0.2])
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(kp.encode(m, x), x)
    assert np.array_equal(kp.decode(m, kp.encode(m, x)), x)


def test_encode_shape_error():
    with pytest.raises(nnet.ShapeError):
        kp.encode(identity_model(PAIR), np.zeros(3))


def test_decode_zero_latent_finite():
    m = kp.init_model(2, PAIR, [10], [4], 0.1, seed=0)
    assert np.all(np.isfinite(kp.decode(m, np.zeros(2))))


def test_zero_aux_gives_zero_eigenvalues():
    m = kp.init_model(3, MIXED, [4], [4], 0.1, seed=0)
    for net in m.aux_pairs + m.aux_reals:
        for layer in net.layers:
            layer.weight[:] = 0.0
    e = kp.eigenvalues_at(m, np.array([0.3, -1.0, 2.0]))
    assert np.all(e.pairs == 0.0) and np.all(e.reals == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 2 * np.pi), st.integers(0, 1000))
def test_eigenvalues_rotation_invariant(a, b, theta, seed):
    m = randomize_biases(kp.init_model(3, MIXED, [4], [6, 6], 0.1, seed), np.random.default_rng(seed))
    y = np.array([a, b, 0.4])
    y2 = y.copy()
    y2[:2] = rot(theta) @ y[:2]
    e1, e2 = kp.eigenvalues_at(m, y), kp.eigenvalues_at(m, y2)
    assert np.allclose(e1.pairs, e2.pairs, rtol=1e-12, atol=1e-12)
    assert np.array_equal(e1.reals, e2.reals)


def test_jordan_block_examples():
    assert np.array_equal(kp.jordan_block(0.0, 0.0, 0.02), np.eye(2))
    dt = 0.1
    B = kp.jordan_block(0.0, (np.pi / 2) / dt, dt)
    assert np.allclose(B, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)
    K = kp.build_K(kp.Eigenvalues(np.zeros((0, 2)), np.array([-1.0])), 0.02)
    assert K.shape == (1, 1)
    assert K[0, 0] == pytest.approx(0.980198673306755, rel=1e-14)


def test_build_K_layout():
    eigs = kp.Eigenvalues(np.array([[0.1, 2.0], [-0.3, 1.0]]), np.array([-1.0]))
    K = kp.build_K(eigs, 0.05)
    assert K.shape == (5, 5)
    assert np.allclose(K[:2, :2], kp.jordan_block(0.1, 2.0, 0.05))
    assert np.allclose(K[2:4, 2:4], kp.jordan_block(-0.3, 1.0, 0.05))
    assert K[4, 4] == np.exp(-0.05)
    mask = np.zeros((5, 5), bool)
    mask[:2, :2] = mask[2:4, 2:4] = True
    mask[4, 4] = True
    assert np.all(K[~mask] == 0.0)


def test_build_K_batched():
    pairs = np.random.default_rng(0).normal(size=(4, 1, 2))
    K = kp.build_K(kp.Eigenvalues(pairs, np.zeros((4, 0))), 0.1)
    assert K.shape == (4, 2, 2)
    assert np.allclose(K[2], kp.jordan_block(*pairs[2, 0], 0.1))


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-3, 0.5))
def test_block_identities(mu, omega, dt):
    B = kp.jordan_block(mu, omega, dt)
    assert abs(np.linalg.det(B) - np.exp(2 * mu * dt)) <= 1e-12 * max(1.0, np.exp(2 * mu * dt))
    R = kp.jordan_block(0.0, omega, dt)
    assert np.allclose(R.T @ R, np.eye(2), rtol=0, atol=1e-12)


def test_advance_identity_when_aux_zero():
    m = identity_model(MIXED)
    y = np.array([0.3, -0.4, 0.9])
    assert np.array_equal(kp.advance(m, y), y)


def test_advance_pure_rotation_preserves_norm():
    m = identity_model(PAIR, dt=0.1, pairs=[(0.0, 3.0)])
    y = np.array([0.6, -0.8])
    assert np.linalg.norm(kp.advance(m, y)) == pytest.approx(1.0, abs=1e-15)


def test_rollout_is_stepwise_composition():
    rng = np.random.default_rng(3)
    m = randomize_biases(kp.init_model(3, MIXED, [5], [6], 0.1, seed=3), rng)
    y0 = rng.normal(size=3)
    ys = kp.latent_rollout(m, y0, 4)
    y = y0
    for k in range(4):
        K = kp.build_K(kp.eigenvalues_at(m, y), m.dt)
        y = K @ y
        assert np.allclose(ys[k], y, rtol=1e-14, atol=1e-15)


def test_rollout_m1_is_advance():
    m = kp.init_model(2, PAIR, [4], [4], 0.1, seed=1)
    y0 = np.array([0.5, 0.1])
    assert np.array_equal(kp.latent_rollout(m, y0, 1)[0], kp.advance(m, y0))


def test_rollout_constant_eigenvalues_matrix_power():
    m = identity_model(MIXED, dt=0.05, pairs=[(-0.2, 1.3)], reals=[-1.0])
    y0 = np.array([0.3, 0.2, -0.5])
    K = kp.build_K(kp.Eigenvalues(np.array([[-0.2, 1.3]]), np.array([-1.0])), 0.05)
    ys = kp.latent_rollout(m, y0, 7)
    assert np.allclose(ys[-1], np.linalg.matrix_power(K, 7) @ y0, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("steps", [3, 4, 7, 12, 50])
def test_rotation_closes(steps):
    dt = 0.02
    m = identity_model(PAIR, dt=dt, pairs=[(0.0, 2 * np.pi / (steps * dt))])
    y0 = np.array([0.7, -0.3])
    assert np.max(np.abs(kp.latent_rollout(m, y0, steps)[-1] - y0)) < 1e-12


def test_rollout_requires_positive_m():
    m = identity_model(PAIR)
    with pytest.raises(ValueError):
        kp.latent_rollout(m, np.zeros(2), 0)


def test_rollout_divergence():
    m = identity_model(PAIR, dt=1.0, pairs=[(800.0, 0.0)])
    with pytest.raises(kp.RolloutDivergenceError):
        kp.latent_rollout(m, np.array([1.0, 0.0]), 3)


def test_predict_states_identity():
    m = identity_model(PAIR)
    x0 = np.array([0.25, -0.5])
    assert np.array_equal(kp.predict_states(m, x0, 5), np.tile(x0, (5, 1)))


def test_predict_states_batch_shape():
    m = kp.init_model(3, MIXED, [4], [4], 0.1, seed=0)
    assert kp.predict_states(m, np.zeros((6, 3)), 9).shape == (6, 9, 3)


@pytest.mark.parametrize("seed", range(6))
def test_advance_gradient(seed):
    rng = np.random.default_rng(seed)
    spec = [PAIR, MIXED, TWO_REAL][seed % 3]
    m = randomize_biases(kp.init_model(2 if spec != MIXED else 3, spec, [3], [5, 4], 0.2, seed), rng)
    y = rng.normal(size=(3, spec.latent_dim))
    w = rng.normal(size=y.shape)
    n_fixed = len(m.encoder.params()) + len(m.decoder.params())

    def loss_and_grad(params):
        mm = m.copy()
        mm.set_params(m.params()[:n_fixed] + list(params[:-1]))
        out, grads, gy = kp.advance_with_grad(mm, params[-1], w)
        return float(np.sum(out * w)), grads[n_fixed:] + [gy]

    assert nnet.finite_diff_check(loss_and_grad, m.params()[n_fixed:] + [y]) < 1e-5


def test_params_roundtrip_and_copy_independent():
    m = kp.init_model(3, MIXED, [4], [4], 0.1, seed=0)
    c = m.copy()
    c.encoder.layers[0].weight[0, 0] += 1.0
    assert m.encoder.layers[0].weight[0, 0] != c.encoder.layers[0].weight[0, 0]
    m.set_params([p * 2 for p in c.params()])
    assert np.array_equal(m.params()[0], 2 * c.params()[0])
    with pytest.raises(nnet.ShapeError):
        m.set_params(m.params() + [np.zeros(1)])


def test_serialization_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    m = randomize_biases(kp.init_model(3, MIXED, [7, 5], [4], 0.01, seed=5, system="fluid2"), rng)
    m.metadata = {"seed": 5, "best_step": 10, "best_val_loss": 1.25e-3}
    path = kp.save_model(m, tmp_path / "m.json")
    back = kp.load_model(path)
    x = rng.normal(size=(100, 3))
    assert np.array_equal(kp.predict_states(m, x, 5), kp.predict_states(back, x, 5))
    assert back.metadata == m.metadata and back.system == "fluid2"
    assert kp.dumps_model(back) == path.read_text()


def test_load_rejects_unknown_format():
    d = kp.model_to_dict(identity_model(PAIR))
    d["format_version"] = 2
    with pytest.raises(ValueError):
        kp.model_from_dict(d)

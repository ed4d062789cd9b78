"""Model builders and an independent loop-based loss evaluator for tests."""

import math

import numpy as np

from koopnet import koopman as kp
from koopnet.losses import LossBreakdown
from koopnet.nnet import LINEAR, DenseLayer, Mlp


def identity_net(n):
    return Mlp([DenseLayer(np.eye(n), np.zeros(n), LINEAR)])


def constant_net(values, hidden=()):
    """Aux net that ignores its input and outputs ``values``."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    dims = [1, *hidden, values.size]
    layers = []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = k == len(dims) - 2
        layers.append(
            DenseLayer(np.zeros((b, a)), values.copy() if last else np.zeros(b), LINEAR if last else "relu")
        )
    return Mlp(layers)


def identity_model(spectrum, dt=0.1, pairs=None, reals=None):
    """Identity encoder/decoder with constant eigenvalues (zero by default)."""
    p = spectrum.latent_dim
    pairs = pairs if pairs is not None else [(0.0, 0.0)] * spectrum.complex_pairs
    reals = reals if reals is not None else [0.0] * spectrum.real_eigs
    return kp.KoopmanModel(
        identity_net(p), identity_net(p),
        [constant_net(pr) for pr in pairs], [constant_net([lam]) for lam in reals],
        spectrum, dt,
    )


def randomize_biases(model, rng, scale=0.3):
    """Zero biases put every ReLU kink at the origin; spread them out."""
    for net in model.networks():
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=scale, size=layer.bias.shape)
    return model


# --- brute-force loss oracle ------------------------------------------------

def _mlp(net, v):
    h = np.asarray(v, dtype=float)
    for layer in net.layers:
        h = np.array([sum(w * x for w, x in zip(row, h)) for row in layer.weight]) + layer.bias
        if layer.activation == "relu":
            h = np.array([max(0.0, x) for x in h])
    return h


def _K(model, y):
    c, r = model.spectrum.complex_pairs, model.spectrum.real_eigs
    p = 2 * c + r
    K = np.zeros((p, p))
    dt = model.dt
    for k in range(c):
        mu, om = _mlp(model.aux_pairs[k], [y[2 * k] ** 2 + y[2 * k + 1] ** 2])
        s = math.exp(mu * dt)
        K[2 * k:2 * k + 2, 2 * k:2 * k + 2] = s * np.array(
            [[math.cos(om * dt), -math.sin(om * dt)], [math.sin(om * dt), math.cos(om * dt)]]
        )
    for j in range(r):
        lam = _mlp(model.aux_reals[j], [y[2 * c + j]])[0]
        K[2 * c + j, 2 * c + j] = math.exp(lam * dt)
    return K


def brute_force_loss(model, X, w):
    """Term-by-term evaluation of the composite loss, one trajectory at a time."""
    B, T, n = X.shape
    recon = pred = lin = 0.0
    inf_a = inf_b = 0.0
    for traj in X:
        phi = [_mlp(model.encoder, x) for x in traj]
        xr = _mlp(model.decoder, phi[0])
        recon += np.mean((traj[0] - xr) ** 2) / B
        inf_a = max(inf_a, np.max(np.abs(traj[0] - xr)))
        # K^m phi(x_1) with K re-evaluated at the running latent state
        y = phi[0]
        ys = []
        for m in range(1, T):
            y = _K(model, y) @ y
            ys.append(y)
        for m in range(1, w.S_p + 1):
            xm = _mlp(model.decoder, ys[m - 1])
            pred += np.mean((traj[m] - xm) ** 2) / (B * w.S_p)
            if m == 1:
                inf_b = max(inf_b, np.max(np.abs(traj[1] - xm)))
        for m in range(1, T):
            lin += np.mean((phi[m] - ys[m - 1]) ** 2) / (B * (T - 1))
    reg = sum(np.sum(l.weight ** 2) for net in model.networks() for l in net.layers)
    inf = inf_a + inf_b
    total = w.alpha1 * (recon + pred) + lin + w.alpha2 * inf + w.alpha3 * reg
    return LossBreakdown(total, recon, pred, lin, inf, reg)


def random_instance(seed, spectrum=None, n=None):
    rng = np.random.default_rng(seed)
    if spectrum is None:
        spectrum = [kp.SpectrumConfig(0, 2), kp.SpectrumConfig(1, 0), kp.SpectrumConfig(1, 1),
                    kp.SpectrumConfig(2, 1)][seed % 4]
    n = n or int(rng.integers(2, 4))
    hidden = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(0, 3)))]
    aux = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(0, 3)))]
    model = kp.init_model(n, spectrum, hidden, aux, float(rng.uniform(0.02, 0.3)), seed)
    randomize_biases(model, rng)
    T = int(rng.integers(3, 7))
    X = rng.normal(scale=0.6, size=(int(rng.integers(1, 4)), T, n))
    return model, X, rng

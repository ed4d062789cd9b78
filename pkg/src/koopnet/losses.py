"""Composite training loss and its exact gradient.

For a batch of trajectories ``x_1 .. x_T`` (one per row)::

    total = a1 * (recon + pred) + lin + a2 * inf + a3 * sum(W**2)

``recon`` reconstructs ``x_1``; ``pred`` averages the decoded ``m``-step
predictions for ``m = 1 .. S_p``; ``lin`` averages the latent residuals
``phi(x_{m+1}) - K^m phi(x_1)`` for ``m = 1 .. T-1``, with ``K^m`` the stepwise
product of propagators whose eigenvalues are re-evaluated along the way.
Mean squared errors average over components first, then over trajectories.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nnet
from .koopman import KoopmanModel, _aux_grads, _new_aux_records, _step_backward, rollout

PREDICTED = "predicted"
ENCODED = "encoded"


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 1e-7
    alpha3: float = 1e-15
    S_p: int = 30

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise LossConfigError("loss weights must be nonnegative")
        if self.S_p < 1:
            raise LossConfigError("S_p must be at least 1")


@dataclass
class LossBreakdown:
    total: float
    recon: float
    pred: float
    lin: float
    inf: float
    reg: float

    def as_dict(self) -> dict:
        return asdict(self)


def weight_norm_sq(model: KoopmanModel) -> float:
    return float(sum(np.sum(p * p) for p, w in zip(model.params(), model.weight_mask()) if w))


def _as_states(batch) -> np.ndarray:
    states = getattr(batch, "states", batch)
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 3:
        raise LossConfigError("a batch must be shaped (trajectories, time, state)")
    return states


def loss_and_grad(
    model: KoopmanModel,
    batch,
    weights: LossWeights,
    *,
    need_grad: bool = True,
    autoencoder_only: bool = False,
    eigs_from: str = PREDICTED,
):
    """Returns ``(LossBreakdown, grads)``; grads align with ``model.params()``.

    With ``autoencoder_only`` the prediction and linearity terms are dropped
    and ``inf`` keeps only its reconstruction part.
    """
    X = _as_states(batch)
    B, T, n = X.shape
    if n != model.state_dim:
        raise LossConfigError(f"model expects {model.state_dim} state components, data has {n}")
    if eigs_from not in (PREDICTED, ENCODED):
        raise LossConfigError(f"eigs_from must be {PREDICTED!r} or {ENCODED!r}")
    S = 0 if autoencoder_only else weights.S_p
    M = 0 if autoencoder_only else T - 1
    if not autoencoder_only and T < weights.S_p + 1:
        raise LossConfigError(f"trajectories of length {T} are too short for S_p={weights.S_p}")
    p = model.latent_dim
    a1, a2, a3 = weights.alpha1, weights.alpha2, weights.alpha3

    # without the linearity term only the first snapshot is ever encoded
    Te = T if M else 1
    Yflat, enc_cache = nnet.forward(model.encoder, X[:, :Te].reshape(B * Te, n))
    Y = Yflat.reshape(B, Te, p)
    eig_src = np.swapaxes(Y[:, :M], 0, 1) if eigs_from == ENCODED else None
    zs, step_caches = rollout(model, Y[:, 0], M, eig_src, keep_cache=need_grad)

    dec_in = np.concatenate([Y[:, 0][None], zs[1:S + 1]]).reshape((S + 1) * B, p)
    Xhat_flat, dec_cache = nnet.forward(model.decoder, dec_in)
    Xhat = Xhat_flat.reshape(S + 1, B, n)

    r0 = X[:, 0] - Xhat[0]
    recon = float(np.mean(r0 * r0))
    if S:
        rp = np.swapaxes(X[:, 1:S + 1], 0, 1) - Xhat[1:]
        pred = float(np.mean(rp * rp))
        rl = np.swapaxes(Y[:, 1:], 0, 1) - zs[1:]
        lin = float(np.mean(rl * rl))
    else:
        pred = lin = 0.0
    i0 = np.unravel_index(np.argmax(np.abs(r0)), r0.shape)
    inf = float(abs(r0[i0]))
    if S:
        i1 = np.unravel_index(np.argmax(np.abs(rp[0])), rp[0].shape)
        inf += float(abs(rp[0][i1]))
    reg = weight_norm_sq(model)
    total = a1 * (recon + pred) + lin + a2 * inf + a3 * reg
    breakdown = LossBreakdown(total, recon, pred, lin, inf, reg)
    if not need_grad:
        return breakdown, None

    g_xhat = np.empty_like(Xhat)
    g_xhat[0] = (-2.0 * a1 / (B * n)) * r0
    g_xhat[0][i0] -= a2 * np.sign(r0[i0])
    if S:
        g_xhat[1:] = (-2.0 * a1 / (B * n * S)) * rp
        g_xhat[1][i1] -= a2 * np.sign(rp[0][i1])
    dec_grads, g_dec_in = nnet.backward(model.decoder, dec_cache, g_xhat.reshape(-1, n))
    g_dec_in = g_dec_in.reshape(S + 1, B, p)

    g_Y = np.zeros_like(Y)
    g_Y[:, 0] = g_dec_in[0]
    g_z = np.zeros_like(zs)
    g_z[1:S + 1] = g_dec_in[1:]
    aux_records = _new_aux_records(model)
    if M:
        c_lin = 2.0 / (B * p * M)
        g_Y[:, 1:] += c_lin * np.swapaxes(rl, 0, 1)
        g_z[1:] -= c_lin * rl
        for k in range(M, 0, -1):
            g_prev, g_src = _step_backward(model, step_caches[k - 1], g_z[k], aux_records)
            g_z[k - 1] += g_prev
            if eigs_from == PREDICTED:
                g_z[k - 1] += g_src
            else:
                g_Y[:, k - 1] += g_src
    g_Y[:, 0] += g_z[0]
    enc_grads, _ = nnet.backward(model.encoder, enc_cache, g_Y.reshape(B * Te, p))

    grads = enc_grads + dec_grads + _aux_grads(model, aux_records)
    for i, (prm, is_w) in enumerate(zip(model.params(), model.weight_mask())):
        if is_w:
            grads[i] = grads[i] + 2.0 * a3 * prm
    return breakdown, grads


def compute_loss(model: KoopmanModel, batch, weights: LossWeights, **kw) -> LossBreakdown:
    return loss_and_grad(model, batch, weights, need_grad=False, **kw)[0]


def compute_gradients(model: KoopmanModel, batch, weights: LossWeights, **kw) -> list[np.ndarray]:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            breakdown, grads = loss_and_grad(model, batch, weights, **kw)
    except FloatingPointError as exc:
        raise nnet.TrainingDivergenceError(str(exc)) from exc
    if not np.isfinite(breakdown.total) or not all(np.all(np.isfinite(g)) for g in grads):
        raise nnet.TrainingDivergenceError("non-finite loss or gradient")
    return grads

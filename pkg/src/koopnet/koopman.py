"""Autoencoder with a block-diagonal latent propagator.

Latent layout: complex pairs first as ``(y1, y2), (y3, y4), ...``, then one
coordinate per real eigenvalue.  Each pair has an auxiliary network mapping
``y_j**2 + y_{j+1}**2`` to ``(mu, omega)``; each real eigenvalue has one
mapping ``y_j`` to ``lambda``.  Over one step of length ``dt`` a pair is
advanced by ``exp(mu dt) R(omega dt)`` and a real coordinate by
``exp(lambda dt)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnet
from .nnet import DenseLayer, Mlp

MODEL_FORMAT_VERSION = 1


class RolloutDivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SpectrumConfig:
    complex_pairs: int = 1
    real_eigs: int = 0

    def __post_init__(self):
        if self.complex_pairs < 0 or self.real_eigs < 0 or self.latent_dim < 1:
            raise ValueError(f"invalid spectrum {self}")

    @property
    def latent_dim(self) -> int:
        return 2 * self.complex_pairs + self.real_eigs


SPECTRA = {
    "discrete_spectrum": SpectrumConfig(0, 2),
    "pendulum": SpectrumConfig(1, 0),
    "fluid1": SpectrumConfig(1, 0),
    "fluid2": SpectrumConfig(1, 1),
}


@dataclass
class Eigenvalues:
    pairs: np.ndarray  # (..., c, 2) holding (mu, omega)
    reals: np.ndarray  # (..., r)

    @property
    def mu(self) -> np.ndarray:
        return self.pairs[..., 0]

    @property
    def omega(self) -> np.ndarray:
        return self.pairs[..., 1]


@dataclass
class KoopmanModel:
    encoder: Mlp
    decoder: Mlp
    aux_pairs: list[Mlp]
    aux_reals: list[Mlp]
    spectrum: SpectrumConfig
    dt: float
    system: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.spectrum.latent_dim
        if self.encoder.out_dim != p or self.decoder.in_dim != p:
            raise nnet.ArchitectureError("encoder/decoder do not match the latent size")
        if self.encoder.in_dim != self.decoder.out_dim:
            raise nnet.ArchitectureError("decoder must return to the state dimension")
        if len(self.aux_pairs) != self.spectrum.complex_pairs or len(
            self.aux_reals
        ) != self.spectrum.real_eigs:
            raise nnet.ArchitectureError("number of auxiliary nets does not match spectrum")
        for net in self.aux_pairs:
            if (net.in_dim, net.out_dim) != (1, 2):
                raise nnet.ArchitectureError("pair aux nets map 1 -> 2")
        for net in self.aux_reals:
            if (net.in_dim, net.out_dim) != (1, 1):
                raise nnet.ArchitectureError("real aux nets map 1 -> 1")

    @property
    def state_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def latent_dim(self) -> int:
        return self.spectrum.latent_dim

    def networks(self) -> list[Mlp]:
        return [self.encoder, self.decoder, *self.aux_pairs, *self.aux_reals]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.params()]

    def weight_mask(self) -> list[bool]:
        return [w for net in self.networks() for w in net.weight_mask()]

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        i = 0
        for net in self.networks():
            n = 2 * len(net.layers)
            net.set_params(values[i:i + n])
            i += n
        if i != len(values):
            raise nnet.ShapeError("too many parameter arrays for this model")

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(
            self.encoder.copy(), self.decoder.copy(),
            [n.copy() for n in self.aux_pairs], [n.copy() for n in self.aux_reals],
            self.spectrum, self.dt, self.system, json.loads(json.dumps(self.metadata)),
        )


def init_model(
    state_dim: int,
    spectrum: SpectrumConfig,
    hidden: Sequence[int],
    aux_hidden: Sequence[int],
    dt: float,
    seed: int,
    system: str | None = None,
) -> KoopmanModel:
    """Random model; the decoder mirrors the encoder's hidden widths."""
    p = spectrum.latent_dim
    seeds = np.random.SeedSequence(int(seed)).spawn(
        2 + spectrum.complex_pairs + spectrum.real_eigs
    )
    hidden, aux_hidden = list(hidden), list(aux_hidden)
    enc = nnet.init_mlp([state_dim, *hidden, p], seeds[0])
    dec = nnet.init_mlp([p, *hidden[::-1], state_dim], seeds[1])
    c = spectrum.complex_pairs
    pairs = [nnet.init_mlp([1, *aux_hidden, 2], s) for s in seeds[2:2 + c]]
    reals = [nnet.init_mlp([1, *aux_hidden, 1], s) for s in seeds[2 + c:]]
    return KoopmanModel(enc, dec, pairs, reals, spectrum, float(dt), system)


def _as_batch(a: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != dim:
        raise nnet.ShapeError(f"{what} must have {dim} components, got shape {a.shape}")
    return a, single


def encode(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x, model.state_dim, "state")
    y = nnet.apply(model.encoder, xb)
    return y[0] if single else y


def decode(model: KoopmanModel, y: np.ndarray) -> np.ndarray:
    yb, single = _as_batch(y, model.latent_dim, "latent vector")
    x = nnet.apply(model.decoder, yb)
    return x[0] if single else x


# --- eigenvalues and the propagator -------------------------------------

@dataclass
class _EigCache:
    src: np.ndarray
    pair_caches: list
    real_caches: list


def _eigs_forward(model: KoopmanModel, src: np.ndarray) -> tuple[Eigenvalues, _EigCache]:
    c = model.spectrum.complex_pairs
    batch = src.shape[0]
    pairs = np.empty((batch, c, 2))
    reals = np.empty((batch, model.spectrum.real_eigs))
    pcs, rcs = [], []
    for k, net in enumerate(model.aux_pairs):
        r2 = src[:, 2 * k] ** 2 + src[:, 2 * k + 1] ** 2
        out, cache = nnet.forward(net, r2[:, None])
        pairs[:, k] = out
        pcs.append(cache)
    for j, net in enumerate(model.aux_reals):
        out, cache = nnet.forward(net, src[:, 2 * c + j][:, None])
        reals[:, j] = out[:, 0]
        rcs.append(cache)
    return Eigenvalues(pairs, reals), _EigCache(src, pcs, rcs)


def eigenvalues_at(model: KoopmanModel, y: np.ndarray) -> Eigenvalues:
    yb, single = _as_batch(y, model.latent_dim, "latent vector")
    eigs, _ = _eigs_forward(model, yb)
    if single:
        return Eigenvalues(eigs.pairs[0], eigs.reals[0])
    return eigs


def jordan_block(mu, omega, dt: float) -> np.ndarray:
    """``exp(mu dt) [[cos, -sin], [sin, cos]](omega dt)``, broadcasting over inputs."""
    mu, omega = np.broadcast_arrays(np.asarray(mu, float), np.asarray(omega, float))
    s = np.exp(mu * dt)
    cs, sn = np.cos(omega * dt), np.sin(omega * dt)
    return s[..., None, None] * np.stack(
        [np.stack([cs, -sn], -1), np.stack([sn, cs], -1)], -2
    )


def build_K(eigs: Eigenvalues, dt: float) -> np.ndarray:
    """Block-diagonal propagator; batched eigenvalues give a ``(B, p, p)`` stack."""
    pairs = np.asarray(eigs.pairs, dtype=np.float64)
    reals = np.asarray(eigs.reals, dtype=np.float64)
    lead = pairs.shape[:-2]
    c, r = pairs.shape[-2], reals.shape[-1]
    p = 2 * c + r
    K = np.zeros((*lead, p, p))
    for k in range(c):
        K[..., 2 * k:2 * k + 2, 2 * k:2 * k + 2] = jordan_block(
            pairs[..., k, 0], pairs[..., k, 1], dt
        )
    for j in range(r):
        K[..., 2 * c + j, 2 * c + j] = np.exp(reals[..., j] * dt)
    return K


@dataclass
class _StepCache:
    z: np.ndarray
    z_next: np.ndarray
    scale: np.ndarray  # (B, c)
    cos: np.ndarray
    sin: np.ndarray
    real_factor: np.ndarray  # (B, r)
    eig: _EigCache


def _step_forward(model: KoopmanModel, z: np.ndarray, src: np.ndarray):
    """Advance ``z`` with eigenvalues evaluated at ``src`` (usually ``src is z``)."""
    eigs, ecache = _eigs_forward(model, src)
    dt = model.dt
    c = model.spectrum.complex_pairs
    scale = np.exp(eigs.pairs[..., 0] * dt)
    cs = np.cos(eigs.pairs[..., 1] * dt)
    sn = np.sin(eigs.pairs[..., 1] * dt)
    real_factor = np.exp(eigs.reals * dt)
    z_next = np.empty_like(z)
    a, b = z[:, 0:2 * c:2], z[:, 1:2 * c:2]
    z_next[:, 0:2 * c:2] = scale * (cs * a - sn * b)
    z_next[:, 1:2 * c:2] = scale * (sn * a + cs * b)
    z_next[:, 2 * c:] = real_factor * z[:, 2 * c:]
    return z_next, _StepCache(z, z_next, scale, cs, sn, real_factor, ecache)


def _step_backward(model: KoopmanModel, cache: _StepCache, g_next: np.ndarray, aux_records):
    """Returns (d/dz, d/dsrc) for one propagator step.

    Aux-net layer inputs and deltas are appended to ``aux_records`` (one list
    per aux net, pairs first); ``_aux_grads`` turns them into parameter grads.
    """
    dt = model.dt
    c = model.spectrum.complex_pairs
    ga, gb = g_next[:, 0:2 * c:2], g_next[:, 1:2 * c:2]
    an, bn = cache.z_next[:, 0:2 * c:2], cache.z_next[:, 1:2 * c:2]
    s, cs, sn = cache.scale, cache.cos, cache.sin

    g_z = np.empty_like(g_next)
    g_z[:, 0:2 * c:2] = s * (cs * ga + sn * gb)
    g_z[:, 1:2 * c:2] = s * (cs * gb - sn * ga)
    g_z[:, 2 * c:] = cache.real_factor * g_next[:, 2 * c:]

    g_src = np.zeros_like(g_next)
    src = cache.eig.src
    g_mu = dt * (ga * an + gb * bn)
    g_om = dt * (gb * an - ga * bn)
    for k, net in enumerate(model.aux_pairs):
        pc = cache.eig.pair_caches[k]
        deltas, gin = nnet.backward_deltas(net, pc, np.stack([g_mu[:, k], g_om[:, k]], axis=1))
        aux_records[k].append((pc.inputs, deltas))
        g_src[:, 2 * k] += 2.0 * src[:, 2 * k] * gin[:, 0]
        g_src[:, 2 * k + 1] += 2.0 * src[:, 2 * k + 1] * gin[:, 0]
    g_lam = dt * cache.z_next[:, 2 * c:] * g_next[:, 2 * c:]
    for j, net in enumerate(model.aux_reals):
        rc = cache.eig.real_caches[j]
        deltas, gin = nnet.backward_deltas(net, rc, g_lam[:, j:j + 1])
        aux_records[c + j].append((rc.inputs, deltas))
        g_src[:, 2 * c + j] += gin[:, 0]
    return g_z, g_src


# above this many activations per layer, aux grads are summed step by step
_CONCAT_LIMIT = 1 << 20


def _aux_nets(model: KoopmanModel) -> list[Mlp]:
    return [*model.aux_pairs, *model.aux_reals]


def _aux_grads(model: KoopmanModel, aux_records) -> list[np.ndarray]:
    """Parameter grads of all aux nets, flattened in ``model.params()`` order."""
    out = []
    for net, records in zip(_aux_nets(model), aux_records):
        if not records:
            out.extend(np.zeros_like(p) for p in net.params())
            continue
        n_layers = len(net.layers)
        size = sum(r[0][0].shape[0] for r in records) * max(net.dims)
        if size <= _CONCAT_LIMIT:
            # small nets: one matmul over all steps beats many tiny ones
            inputs = [np.concatenate([r[0][l] for r in records]) for l in range(n_layers)]
            deltas = [np.concatenate([r[1][l] for r in records]) for l in range(n_layers)]
            out.extend(nnet.param_grads(inputs, deltas))
            continue
        acc = nnet.param_grads(*records[0])
        for r in records[1:]:
            for a, g in zip(acc, nnet.param_grads(*r)):
                a += g
        out.extend(acc)
    return out


def _new_aux_records(model: KoopmanModel) -> list[list]:
    return [[] for _ in _aux_nets(model)]


def advance(model: KoopmanModel, y: np.ndarray) -> np.ndarray:
    yb, single = _as_batch(y, model.latent_dim, "latent vector")
    out, _ = _step_forward(model, yb, yb)
    return out[0] if single else out


def advance_with_grad(model: KoopmanModel, y: np.ndarray, grad_out: np.ndarray):
    """Forward one step and pull ``grad_out`` back.

    Returns ``(y_next, param_grads, grad_y)`` with ``param_grads`` aligned with
    ``model.params()`` (encoder/decoder entries are zero).
    """
    yb, _ = _as_batch(y, model.latent_dim, "latent vector")
    y_next, cache = _step_forward(model, yb, yb)
    records = _new_aux_records(model)
    g_z, g_src = _step_backward(model, cache, np.atleast_2d(grad_out), records)
    grads = [np.zeros_like(p) for p in model.encoder.params() + model.decoder.params()]
    grads += _aux_grads(model, records)
    return y_next, grads, g_z + g_src


# --- rollouts ---------------------------------------------------------

def rollout(
    model: KoopmanModel,
    y0: np.ndarray,
    m: int,
    eig_src: np.ndarray | None = None,
    keep_cache: bool = False,
):
    """Batched latent rollout.

    Returns ``(zs, caches)`` with ``zs`` shaped ``(m + 1, B, p)`` and
    ``zs[0] == y0``.  By default step ``k`` uses eigenvalues at the predicted
    state ``zs[k - 1]``; passing ``eig_src`` (``(m, B, p)``) evaluates them at
    those latent states instead.
    """
    zs = np.empty((m + 1, *y0.shape))
    zs[0] = y0
    caches = []
    for k in range(m):
        src = zs[k] if eig_src is None else eig_src[k]
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            zs[k + 1], cache = _step_forward(model, zs[k], src)
        if not np.all(np.isfinite(zs[k + 1])):
            raise RolloutDivergenceError(f"latent rollout diverged at step {k + 1}")
        if keep_cache:
            caches.append(cache)
    return zs, caches


def latent_rollout(model: KoopmanModel, y0: np.ndarray, m: int) -> np.ndarray:
    """States ``y_1 .. y_m``; shape ``(m, p)`` or ``(B, m, p)`` for a batch."""
    if m < 1:
        raise ValueError("m must be at least 1")
    yb, single = _as_batch(y0, model.latent_dim, "latent vector")
    zs, _ = rollout(model, yb, m)
    out = np.swapaxes(zs[1:], 0, 1)
    return out[0] if single else out


def predict_states(model: KoopmanModel, x0: np.ndarray, m: int) -> np.ndarray:
    """Decoded predictions ``x_1 .. x_m`` from initial states alone."""
    if m < 1:
        raise ValueError("m must be at least 1")
    xb, single = _as_batch(x0, model.state_dim, "state")
    zs, _ = rollout(model, encode(model, xb), m)
    xs = nnet.apply(model.decoder, zs[1:].reshape(-1, model.latent_dim))
    out = np.swapaxes(xs.reshape(m, xb.shape[0], model.state_dim), 0, 1)
    return out[0] if single else out


# --- serialization ----------------------------------------------------

def _mlp_to_dict(net: Mlp) -> dict:
    return {
        "dims": net.dims,
        "layers": [
            {
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "activation": l.activation,
                "weight": [float(v) for v in l.weight.ravel()],
                "bias": [float(v) for v in l.bias],
            }
            for l in net.layers
        ],
    }


def _mlp_from_dict(d: dict) -> Mlp:
    layers = []
    for l in d["layers"]:
        w = np.array(l["weight"], dtype=np.float64).reshape(l["out_dim"], l["in_dim"])
        layers.append(DenseLayer(w, np.array(l["bias"], dtype=np.float64), l["activation"]))
    return Mlp(layers)


def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "system": model.system,
        "dt": model.dt,
        "spectrum": {
            "complex_pairs": model.spectrum.complex_pairs,
            "real_eigs": model.spectrum.real_eigs,
        },
        "networks": {
            "encoder": _mlp_to_dict(model.encoder),
            "decoder": _mlp_to_dict(model.decoder),
            "aux_pairs": [_mlp_to_dict(n) for n in model.aux_pairs],
            "aux_reals": [_mlp_to_dict(n) for n in model.aux_reals],
        },
        "metadata": model.metadata,
    }


def model_from_dict(d: dict) -> KoopmanModel:
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format {d.get('format_version')!r}")
    nets = d["networks"]
    return KoopmanModel(
        _mlp_from_dict(nets["encoder"]),
        _mlp_from_dict(nets["decoder"]),
        [_mlp_from_dict(n) for n in nets["aux_pairs"]],
        [_mlp_from_dict(n) for n in nets["aux_reals"]],
        SpectrumConfig(**d["spectrum"]),
        float(d["dt"]),
        d.get("system"),
        d.get("metadata", {}),
    )


def dumps_model(model: KoopmanModel) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model: KoopmanModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_model(model))
    tmp.replace(path)
    return path


def load_model(path) -> KoopmanModel:
    return model_from_dict(json.loads(Path(path).read_text()))

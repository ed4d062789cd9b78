"""Dense networks with hand-written reverse mode and an Adam optimizer.

Everything works on float64 arrays with one example per row.  A layer maps
``x -> act(x @ W.T + b)`` with ``W`` shaped ``(out_dim, in_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

RELU = "relu"
LINEAR = "linear"
ACTIVATIONS = (RELU, LINEAR)


class ArchitectureError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class CacheError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    """Raised when a gradient, loss or update stops being finite."""


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = LINEAR

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ArchitectureError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Dense layers with ReLU hidden activations and a linear output layer."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ArchitectureError("an Mlp needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ArchitectureError(
                    f"layer {k} outputs {a.out_dim} but layer {k + 1} expects {b.in_dim}"
                )
            if a.activation != RELU:
                raise ArchitectureError("hidden layers must use ReLU")
        if self.layers[-1].activation != LINEAR:
            raise ArchitectureError("the output layer must be linear")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order ``[W0, b0, W1, b1, ...]`` (not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def weight_mask(self) -> list[bool]:
        return [True, False] * len(self.layers)

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        if len(values) != 2 * len(self.layers):
            raise ShapeError("wrong number of parameter arrays")
        for k, layer in enumerate(self.layers):
            w, b = values[2 * k], values[2 * k + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"parameter shapes for layer {k} do not match")
            layer.weight = np.array(w, dtype=np.float64)
            layer.bias = np.array(b, dtype=np.float64)

    def copy(self) -> "Mlp":
        return Mlp(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


@dataclass
class ForwardCache:
    """Inputs and pre-activations of every layer for one forward call."""

    owner: int
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def init_mlp(dims: Sequence[int], seed) -> Mlp:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.

    ``seed`` may be an int, a sequence of ints or a ``np.random.SeedSequence``.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ArchitectureError(f"need at least input and output dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ArchitectureError(f"dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        s = 1.0 / np.sqrt(a)
        w = rng.uniform(-s, s, size=(b, a))
        act = LINEAR if k == len(dims) - 2 else RELU
        layers.append(DenseLayer(w, np.zeros(b), act))
    return Mlp(layers)


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ShapeError(f"expected (batch, {mlp.in_dim}) input, got {x.shape}")
    cache = ForwardCache(owner=id(mlp))
    h = x
    for layer in mlp.layers:
        cache.inputs.append(h)
        # one input column: an outer product, cheaper than a K=1 matmul
        z = h * layer.weight[:, 0] if layer.in_dim == 1 else h @ layer.weight.T
        z += layer.bias
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
    return h, cache


def apply(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    return forward(mlp, x)[0]


def backward(
    mlp: Mlp, cache: ForwardCache, grad_out: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass; returns grads aligned with ``mlp.params()`` and d/dx.

    Gradients are summed over the batch rows.
    """
    if cache.owner != id(mlp) or len(cache.pre) != len(mlp.layers):
        raise CacheError("cache was not produced by this network")
    batch = cache.inputs[0].shape[0]
    for layer, h, z in zip(mlp.layers, cache.inputs, cache.pre):
        if h.shape != (batch, layer.in_dim) or z.shape != (batch, layer.out_dim):
            raise CacheError("cache shapes do not match the network")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (batch, mlp.out_dim):
        raise ShapeError(f"grad_out has shape {g.shape}, expected {(batch, mlp.out_dim)}")
    deltas, g_in = backward_deltas(mlp, cache, g)
    return param_grads(cache.inputs, deltas), g_in


def backward_deltas(
    mlp: Mlp, cache: ForwardCache, g: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Unchecked backward pass returning per-layer output deltas and d/dx.

    Parameter gradients follow from ``param_grads(cache.inputs, deltas)``;
    keeping them apart lets callers batch many small passes into one matmul.
    """
    deltas: list[np.ndarray] = [None] * len(mlp.layers)  # type: ignore[list-item]
    for k in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[k]
        if layer.activation == RELU:
            # subgradient 0 at z == 0
            g = g * (cache.pre[k] > 0.0)
        deltas[k] = g
        g = g @ layer.weight
    return deltas, g


def param_grads(inputs: Sequence[np.ndarray], deltas: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    for h, d in zip(inputs, deltas):
        out.extend((d.T @ h, d.sum(axis=0)))
    return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            [a.copy() for a in self.m], [a.copy() for a in self.v],
            self.t, self.beta1, self.beta2, self.eps,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient passed to adam_step")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("parameter and gradient shapes differ")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def finite_diff_check(
    loss_and_grad: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    rel_floor: float = 1e-5,
) -> float:
    """Worst relative disagreement between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return ``(loss, grads)``.  The relative error
    for one coordinate is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = rel_floor * max(1, |loss|)``: central differences lose about
    ``eps * |loss| / step`` to cancellation, so coordinates far below the loss
    scale are compared on an absolute footing.  NaN anywhere yields ``nan``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss, analytic = loss_and_grad(params)
    floor = rel_floor * max(1.0, abs(float(loss)))
    worst = 0.0
    for i, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_and_grad(params)[0]
            p[idx] = orig - step
            down = loss_and_grad(params)[0]
            p[idx] = orig
            num = (up - down) / (2.0 * step)
            a = analytic[i][idx]
            if not (np.isfinite(num) and np.isfinite(a)):
                return float("nan")
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return float(worst)

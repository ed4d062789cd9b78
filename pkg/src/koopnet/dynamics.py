"""Benchmark ODE systems, RK4 integration and trajectory datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

DATASET_FORMAT_VERSION = 1
MAX_RESAMPLES = 10**6
SUBSTEPS = 10


class SamplingError(RuntimeError):
    pass


class IntegrationError(FloatingPointError):
    pass


class SystemKind(str, Enum):
    DISCRETE_SPECTRUM = "discrete_spectrum"
    PENDULUM = "pendulum"
    FLUID_ON_ATTRACTOR = "fluid1"
    FLUID_OFF_ATTRACTOR = "fluid2"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "val"
    TEST = "test"


_SPLIT_CODES = {Split.TRAIN: 0, Split.VALIDATION: 1, Split.TEST: 2}

_ALIASES = {
    "discrete": SystemKind.DISCRETE_SPECTRUM,
    "fluid_flow_on_attractor": SystemKind.FLUID_ON_ATTRACTOR,
    "fluid_on": SystemKind.FLUID_ON_ATTRACTOR,
    "fluid_flow_off_attractor": SystemKind.FLUID_OFF_ATTRACTOR,
    "fluid_off": SystemKind.FLUID_OFF_ATTRACTOR,
}


@dataclass(frozen=True)
class SystemSpec:
    kind: SystemKind
    dt: float
    traj_len: int
    state_dim: int
    params: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.kind.value


def get_system(name) -> SystemSpec:
    if isinstance(name, SystemSpec):
        return name
    try:
        kind = SystemKind(name)
    except ValueError:
        if name not in _ALIASES:
            raise ValueError(f"unknown system {name!r}") from None
        kind = _ALIASES[name]
    if kind is SystemKind.DISCRETE_SPECTRUM:
        return SystemSpec(kind, 0.02, 51, 2, {"mu": -0.05, "lam": -1.0})
    if kind is SystemKind.PENDULUM:
        return SystemSpec(kind, 0.02, 51, 2, {})
    fluid = {"mu": 0.1, "omega": 1.0, "A": -0.1, "lam": 10.0}
    if kind is SystemKind.FLUID_ON_ATTRACTOR:
        return SystemSpec(kind, 0.05, 121, 3, fluid)
    return SystemSpec(kind, 0.01, 101, 3, fluid)


def rhs(system: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Vector field; ``x`` may carry leading batch dimensions."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != system.state_dim:
        raise ValueError(f"{system.name} expects {system.state_dim} state components")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state passed to rhs")
    p = system.params
    out = np.empty_like(x)
    if system.kind is SystemKind.DISCRETE_SPECTRUM:
        x1, x2 = x[..., 0], x[..., 1]
        out[..., 0] = p["mu"] * x1
        out[..., 1] = p["lam"] * (x2 - x1**2)
    elif system.kind is SystemKind.PENDULUM:
        out[..., 0] = x[..., 1]
        out[..., 1] = -np.sin(x[..., 0])
    else:
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        mu, om, a, lam = p["mu"], p["omega"], p["A"], p["lam"]
        out[..., 0] = mu * x1 - om * x2 + a * x1 * x3
        out[..., 1] = om * x1 + mu * x2 + a * x2 * x3
        out[..., 2] = -lam * (x3 - x1**2 - x2**2)
    return out


def integrate_batch(
    system: SystemSpec, x0: np.ndarray, traj_len: int | None = None, substeps: int = SUBSTEPS
) -> np.ndarray:
    """Fixed-step RK4 from every row of ``x0``; returns ``(N, traj_len, n)``."""
    x = np.array(x0, dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial condition must be finite")
    traj_len = system.traj_len if traj_len is None else traj_len
    h = system.dt / substeps
    out = np.empty((x.shape[0], traj_len, system.state_dim))
    out[:, 0] = x
    for k in range(1, traj_len):
        for _ in range(substeps):
            k1 = rhs(system, x)
            k2 = rhs(system, x + 0.5 * h * k1)
            k3 = rhs(system, x + 0.5 * h * k2)
            k4 = rhs(system, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"state blew up at step {k}")
        out[:, k] = x
    return out


@dataclass
class Trajectory:
    states: np.ndarray
    dt: float


def integrate(system: SystemSpec, x0, substeps: int = SUBSTEPS) -> Trajectory:
    if not np.all(np.isfinite(np.asarray(x0, dtype=np.float64))):
        raise ValueError("initial condition must be finite")
    try:
        states = integrate_batch(system, np.asarray(x0)[None, :], substeps=substeps)[0]
    except ValueError as exc:  # rhs rejects non-finite intermediate states
        raise IntegrationError(str(exc)) from exc
    return Trajectory(states, system.dt)


def pendulum_energy(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x[..., 1] ** 2 - np.cos(x[..., 0])


def pendulum_admissible(x) -> np.ndarray | bool:
    """Initial-condition acceptance rule for the pendulum data."""
    return pendulum_energy(x) < 0.99


def slow_manifold_coefficient(mu: float = -0.05, lam: float = -1.0) -> float:
    return -lam / (2.0 * mu - lam)


def closed_form_discrete(x0, t, mu: float = -0.05, lam: float = -1.0) -> np.ndarray:
    """Exact solution of the discrete-spectrum system; ``t`` may be an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    b = slow_manifold_coefficient(mu, lam)
    x1 = x0[0] * np.exp(mu * t)
    x2 = (x0[1] - b * x0[0] ** 2) * np.exp(lam * t) + b * x0[0] ** 2 * np.exp(2 * mu * t)
    return np.stack([x1, x2], axis=-1)


def sample_ic(system: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    kind = system.kind
    if kind is SystemKind.DISCRETE_SPECTRUM:
        return rng.uniform(-0.5, 0.5, size=2)
    if kind is SystemKind.PENDULUM:
        for _ in range(MAX_RESAMPLES):
            x = np.array([rng.uniform(-3.1, 3.1), rng.uniform(-2.0, 2.0)])
            if pendulum_admissible(x):
                return x
        raise SamplingError("pendulum rejection sampling exceeded its cap")
    if kind is SystemKind.FLUID_ON_ATTRACTOR:
        r = rng.uniform(0.0, 1.1)
        theta = rng.uniform(0.0, 2 * np.pi)
        x1, x2 = r * np.cos(theta), r * np.sin(theta)
        return np.array([x1, x2, x1**2 + x2**2])
    return np.array(
        [rng.uniform(-1.1, 1.1), rng.uniform(-1.1, 1.1), rng.uniform(0.0, 2.42)]
    )


def trajectory_rng(seed: int, split: Split, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), _SPLIT_CODES[Split(split)], int(index)])
    )


def _keep(system: SystemSpec, states: np.ndarray) -> np.ndarray:
    if system.kind is SystemKind.FLUID_OFF_ATTRACTOR:
        return states[..., 2].max(axis=-1) <= 2.5
    return np.ones(states.shape[0], dtype=bool)


@dataclass
class Dataset:
    system: SystemSpec
    split: Split
    states: np.ndarray  # (n_traj, traj_len, state_dim)
    seed: int

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.system.dt)


def generate_dataset(system, split, n_traj: int, seed: int) -> Dataset:
    """``n_traj`` accepted trajectories, one RNG stream per trajectory index."""
    system = get_system(system)
    split = Split(split)
    if n_traj <= 0:
        raise ValueError("n_traj must be positive")
    rngs = [trajectory_rng(seed, split, i) for i in range(n_traj)]
    x0 = np.stack([sample_ic(system, r) for r in rngs])
    states = integrate_batch(system, x0)
    pending = np.flatnonzero(~_keep(system, states))
    tries = 0
    while pending.size:
        tries += 1
        if tries > MAX_RESAMPLES:
            raise SamplingError("too many rejected trajectories")
        redo = np.stack([sample_ic(system, rngs[i]) for i in pending])
        states[pending] = integrate_batch(system, redo)
        pending = pending[~_keep(system, states[pending])]
    return Dataset(system, split, states, int(seed))


def evenly_spaced_ics(system, n: int) -> np.ndarray:
    """Initial conditions spread along one line of the sampling domain (for plots)."""
    system = get_system(system)
    s = np.linspace(0.0, 1.0, n + 2)[1:-1]
    kind = system.kind
    if kind is SystemKind.PENDULUM:
        # released from rest; energy -cos(x1) stays under the 0.99 cap
        return np.stack([3.1 * s, np.zeros(n)], axis=1)
    if kind is SystemKind.DISCRETE_SPECTRUM:
        return np.stack([-0.5 + s, 0.5 - s], axis=1)
    r = 1.1 * s
    if kind is SystemKind.FLUID_ON_ATTRACTOR:
        return np.stack([r, np.zeros(n), r**2], axis=1)
    return np.stack([r, np.zeros(n), 2.42 * s], axis=1)


# --- on-disk format -------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sysm = ds.system
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "system": sysm.name,
        "params": sysm.params,
        "dt": sysm.dt,
        "traj_len": sysm.traj_len,
        "state_dim": sysm.state_dim,
        "n_traj": ds.n_traj,
        "split": ds.split.value,
        "seed": ds.seed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    header = ",".join(f"x{i + 1}" for i in range(sysm.state_dim))
    rows = ds.states.reshape(-1, sysm.state_dim)
    with open(directory / "data.csv", "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format in {directory}")
    system = get_system(meta["system"])
    data = np.loadtxt(directory / "data.csv", delimiter=",", skiprows=1, ndmin=2)
    states = data.reshape(meta["n_traj"], meta["traj_len"], meta["state_dim"])
    return Dataset(system, Split(meta["split"]), states, int(meta["seed"]))

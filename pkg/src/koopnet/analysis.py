"""Evaluation metrics and plot-ready exports (CSV tables, JSON reports)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dynamics
from .koopman import (
    KoopmanModel,
    _as_batch,
    encode,
    eigenvalues_at,
    predict_states,
    rollout,
)
from .losses import PREDICTED, LossWeights, compute_loss

HORIZON_FLOOR = 1e-12
DEFAULT_RESOLUTION = 100


@dataclass(frozen=True)
class GridSpec:
    axes: tuple[tuple[float, float, int], ...]

    def __post_init__(self):
        for lo, hi, res in self.axes:
            if not lo < hi or int(res) < 2:
                raise ValueError(f"bad grid axis ({lo}, {hi}, {res})")

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        """Grid points in lexicographic index order (last axis fastest)."""
        lines = [np.linspace(lo, hi, int(res)) for lo, hi, res in self.axes]
        mesh = np.meshgrid(*lines, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """``"lo:hi:res,lo:hi:res"``, one comma-separated field per axis."""
        axes = []
        for field in text.split(","):
            lo, hi, res = field.split(":")
            axes.append((float(lo), float(hi), int(res)))
        return cls(tuple(axes))

    def label(self) -> str:
        return "_".join(f"{lo:g}:{hi:g}:{res}" for lo, hi, res in self.axes)


@dataclass
class Table:
    columns: list[str]
    rows: np.ndarray

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as f:
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(format(float(v), ".17g") for v in row) + "\n")
        return path


# --- errors and horizons ------------------------------------------------

def split_errors(
    model: KoopmanModel, datasets: dict, weights: LossWeights, eigs_from: str = PREDICTED
) -> dict:
    """Full-split losses, each split evaluated as a single batch."""
    out = {}
    for split, data in datasets.items():
        key = getattr(split, "value", split)
        out[key] = compute_loss(model, data, weights, eigs_from=eigs_from)
    return out


def relative_errors(pred: np.ndarray, truth: np.ndarray, floor: float = HORIZON_FLOOR) -> np.ndarray:
    num = np.linalg.norm(pred - truth, axis=-1)
    return num / np.maximum(np.linalg.norm(truth, axis=-1), floor)


def horizon_from_errors(errors: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Count of leading steps with relative error below ``threshold`` (last axis = time)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ok = np.asarray(errors) < threshold
    return np.where(ok.all(axis=-1), ok.shape[-1], np.argmin(ok, axis=-1))


def prediction_horizon(
    model: KoopmanModel | Callable[[np.ndarray, int], np.ndarray],
    trajectory,
    threshold: float = 0.1,
) -> int:
    """Steps predicted from the first snapshot before the error reaches ``threshold``.

    ``model`` may also be any callable ``(x0, m) -> (m, n)`` predictions.
    """
    states = np.asarray(getattr(trajectory, "states", trajectory), dtype=np.float64)
    m = states.shape[0] - 1
    if callable(model) and not isinstance(model, KoopmanModel):
        pred = np.asarray(model(states[0], m))
    else:
        pred = predict_states(model, states[0], m)
    return int(horizon_from_errors(relative_errors(pred, states[1:]), threshold))


def prediction_horizons(model: KoopmanModel, states: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Vectorised ``prediction_horizon`` over trajectories ``(N, T, n)``."""
    states = np.asarray(getattr(states, "states", states), dtype=np.float64)
    pred = predict_states(model, states[:, 0], states.shape[1] - 1)
    if states.shape[0] == 1:
        pred = pred[None]
    return horizon_from_errors(relative_errors(pred, states[:, 1:]), threshold)


# --- grids ------------------------------------------------------------------

def default_state_grid(system, resolution: int = DEFAULT_RESOLUTION) -> GridSpec:
    kind = dynamics.get_system(system).kind
    K = dynamics.SystemKind
    if kind is K.DISCRETE_SPECTRUM:
        return GridSpec(((-0.5, 0.5, resolution),) * 2)
    if kind is K.PENDULUM:
        return GridSpec(((-3.1, 3.1, resolution), (-2.0, 2.0, resolution)))
    if kind is K.FLUID_ON_ATTRACTOR:
        return GridSpec(((-1.1, 1.1, resolution),) * 2)
    return GridSpec(((-1.1, 1.1, resolution), (-1.1, 1.1, resolution), (0.0, 2.42, resolution)))


def state_grid_points(system, grid: GridSpec) -> np.ndarray:
    """Grid points restricted to the region the system's data are drawn from.

    Pendulum points need ``energy < 0.99``; the on-attractor fluid grid is over
    ``(x1, x2)`` and is lifted to the bowl ``x3 = x1**2 + x2**2`` within radius 1.1.
    """
    sysm = dynamics.get_system(system)
    pts = grid.points()
    if sysm.kind is dynamics.SystemKind.PENDULUM:
        pts = pts[dynamics.pendulum_energy(pts) < 0.99]
    elif sysm.kind is dynamics.SystemKind.FLUID_ON_ATTRACTOR and grid.dim == 2:
        r2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        keep = r2 <= 1.1**2
        pts = np.column_stack([pts[keep], r2[keep]])
    return pts


def _pair_polar(model: KoopmanModel, y: np.ndarray) -> tuple[list[str], list[np.ndarray]]:
    names, cols = [], []
    for k in range(model.spectrum.complex_pairs):
        a, b = y[:, 2 * k], y[:, 2 * k + 1]
        names += [f"magnitude{k + 1}", f"phase{k + 1}"]
        cols += [np.hypot(a, b), np.arctan2(b, a)]
    return names, cols


def eigenfunction_grid(model: KoopmanModel, points: np.ndarray) -> Table:
    """Columns ``x.., y..`` then magnitude/phase for each complex pair."""
    xb, _ = _as_batch(points, model.state_dim, "grid point")
    y = encode(model, xb)
    names, cols = _pair_polar(model, y)
    columns = [f"x{i + 1}" for i in range(model.state_dim)]
    columns += [f"y{i + 1}" for i in range(model.latent_dim)] + names
    return Table(columns, np.column_stack([xb, y, *cols]))


def latent_bounds(model: KoopmanModel, states: np.ndarray, resolution: int = DEFAULT_RESOLUTION) -> GridSpec:
    """Bounding box of the encoded ``states`` as a latent-space grid."""
    y = encode(model, np.asarray(states).reshape(-1, model.state_dim))
    lo, hi = y.min(axis=0), y.max(axis=0)
    pad = np.maximum(1e-6, 1e-3 * (hi - lo))
    return GridSpec(tuple((float(a - pad_), float(b + pad_), resolution) for a, b, pad_ in zip(lo, hi, pad)))


def eigenvalue_field(model: KoopmanModel, points: np.ndarray) -> Table:
    yb, _ = _as_batch(points, model.latent_dim, "latent grid point")
    eigs = eigenvalues_at(model, yb)
    columns = [f"y{i + 1}" for i in range(model.latent_dim)]
    cols = [yb]
    for k in range(model.spectrum.complex_pairs):
        columns += [f"mu{k + 1}", f"omega{k + 1}"]
        cols += [eigs.pairs[:, k, 0:1], eigs.pairs[:, k, 1:2]]
    for j in range(model.spectrum.real_eigs):
        columns.append(f"lambda{j + 1}")
        cols.append(eigs.reals[:, j:j + 1])
    return Table(columns, np.column_stack(cols))


# --- linearity ----------------------------------------------------------

@dataclass
class LinearityDiagnostic:
    residuals: np.ndarray  # |phi(x_{m+1}) - K^m phi(x_1)|, m = 1 .. T-1
    radius: np.ndarray | None  # radius of the first pair along phi(x_k), k = 1 .. T

    def radius_cv(self) -> float:
        if self.radius is None:
            raise ValueError("model has no complex pair")
        return float(np.std(self.radius) / np.mean(self.radius))

    def table(self) -> Table:
        cols = [np.arange(1, self.residuals.size + 1), self.residuals]
        names = ["m", "residual"]
        if self.radius is not None:
            names.append("radius")
            cols.append(self.radius[1:])
        return Table(names, np.column_stack(cols))


def linearity_diagnostic(model: KoopmanModel, trajectory) -> LinearityDiagnostic:
    states = np.asarray(getattr(trajectory, "states", trajectory), dtype=np.float64)
    y = encode(model, states)
    zs, _ = rollout(model, y[:1], states.shape[0] - 1)
    residuals = np.linalg.norm(y[1:] - zs[1:, 0], axis=-1)
    radius = np.hypot(y[:, 0], y[:, 1]) if model.spectrum.complex_pairs else None
    return LinearityDiagnostic(residuals, radius)


def prediction_table(model: KoopmanModel, states: np.ndarray) -> Table:
    """Long-format true vs predicted states for each trajectory and step."""
    states = np.asarray(states, dtype=np.float64)
    N, T, n = states.shape
    pred = predict_states(model, states[:, 0], T - 1).reshape(N, T - 1, n)
    pred = np.concatenate([states[:, :1], pred], axis=1)
    err = relative_errors(pred, states)
    idx = np.repeat(np.arange(N), T)
    step = np.tile(np.arange(T), N)
    columns = ["trajectory", "step"] + [f"x{i + 1}" for i in range(n)]
    columns += [f"xhat{i + 1}" for i in range(n)] + ["relative_error"]
    rows = np.column_stack(
        [idx, step, states.reshape(-1, n), pred.reshape(-1, n), err.reshape(-1)]
    )
    return Table(columns, rows)


# --- summary report ----------------------------------------------------

def eigenvalue_summary(model: KoopmanModel, states: np.ndarray) -> dict:
    y = encode(model, np.asarray(states).reshape(-1, model.state_dim))
    eigs = eigenvalues_at(model, y)
    out = {}

    def stats(v):
        return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}

    for k in range(model.spectrum.complex_pairs):
        out[f"mu{k + 1}"] = stats(eigs.pairs[:, k, 0])
        out[f"omega{k + 1}"] = stats(eigs.pairs[:, k, 1])
    for j in range(model.spectrum.real_eigs):
        out[f"lambda{j + 1}"] = stats(eigs.reals[:, j])
    return out


def evaluate(
    model: KoopmanModel,
    datasets: dict,
    weights: LossWeights,
    horizon_split: str = "test",
    threshold: float = 0.1,
    eigs_from: str = PREDICTED,
) -> dict:
    """EvalReport as a JSON-ready dict."""
    errors = split_errors(model, datasets, weights, eigs_from)
    report = {
        "format_version": 1,
        "system": model.system,
        "splits": {k: v.as_dict() for k, v in errors.items()},
    }
    key = horizon_split if horizon_split in datasets else next(iter(datasets))
    states = np.asarray(getattr(datasets[key], "states", datasets[key]))
    h = prediction_horizons(model, states, threshold)
    report["horizon"] = {
        "split": key,
        "threshold": threshold,
        "per_trajectory": [int(v) for v in h],
        "median": float(np.median(h)),
        "mean": float(np.mean(h)),
        "max_possible": int(states.shape[1] - 1),
    }
    report["eigenvalues"] = eigenvalue_summary(model, states)
    return report


def energy_quartile_horizons(model: KoopmanModel, states: np.ndarray, threshold: float = 0.1) -> list[float]:
    """Median pendulum horizon in each quartile of initial energy, low to high."""
    e = dynamics.pendulum_energy(states[:, 0])
    h = prediction_horizons(model, states, threshold)
    edges = np.quantile(e, [0.25, 0.5, 0.75])
    q = np.searchsorted(edges, e, side="right")
    return [float(np.median(h[q == i])) for i in range(4)]


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)

"""Experiment configs, presets, end-to-end fitting and random search."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .dynamics import generate_dataset, get_system
from .koopman import SPECTRA, KoopmanModel, SpectrumConfig, init_model
from .losses import LossWeights
from .training import TrainConfig, TrainReport, pretrain, train

log = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1


@dataclass
class ExperimentConfig:
    system: str
    hidden_layers: int
    width: int
    aux_hidden_layers: int
    aux_width: int
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 1000
    n_val: int = 500
    n_test: int = 500
    spectrum: SpectrumConfig | None = None

    def __post_init__(self):
        self.system = get_system(self.system).name
        if self.spectrum is None:
            self.spectrum = SPECTRA[self.system]
        if self.hidden_layers < 0 or self.aux_hidden_layers < 0:
            raise ValueError("layer counts cannot be negative")
        if min(self.width, self.aux_width) <= 0:
            raise ValueError("widths must be positive")
        traj_len = get_system(self.system).traj_len
        if self.loss.S_p > traj_len - 1:
            raise ValueError(f"S_p={self.loss.S_p} exceeds trajectory length {traj_len}")

    @property
    def hidden(self) -> list[int]:
        return [self.width] * self.hidden_layers

    @property
    def aux_hidden(self) -> list[int]:
        return [self.aux_width] * self.aux_hidden_layers

    def build_model(self, seed: int | None = None) -> KoopmanModel:
        sysm = get_system(self.system)
        return init_model(
            sysm.state_dim, self.spectrum, self.hidden, self.aux_hidden, sysm.dt,
            self.train.seed if seed is None else seed, system=sysm.name,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = CONFIG_FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        version = d.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ValueError(f"unsupported config format {version!r}")
        d["loss"] = LossWeights(**d.get("loss", {}))
        d["train"] = TrainConfig(**d.get("train", {}))
        if d.get("spectrum") is not None:
            d["spectrum"] = SpectrumConfig(**d["spectrum"])
        return cls(**d)


def preset_names() -> list[str]:
    files = resources.files("koopnet") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_config(name_or_path) -> ExperimentConfig:
    """Load a config from a JSON path or by preset name (e.g. ``pendulum_desk``)."""
    path = Path(str(name_or_path))
    if path.is_file():
        text = path.read_text()
    else:
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        res = resources.files("koopnet") / "presets" / f"{name}.json"
        if not res.is_file():
            raise FileNotFoundError(
                f"no config file or preset named {name_or_path!r}; presets: {preset_names()}"
            )
        text = res.read_text()
    return ExperimentConfig.from_dict(json.loads(text))


def fit(
    config: ExperimentConfig, train_set, val_set, test_set=None, model: KoopmanModel | None = None
) -> tuple[KoopmanModel, TrainReport]:
    """Autoencoder pretraining followed by full training with early stopping."""
    model = config.build_model() if model is None else model
    model = pretrain(model, train_set, config.train, config.loss)
    best, report = train(model, train_set, val_set, config.train, config.loss, test_set)
    best.metadata["config"] = config.to_dict()
    return best, report


def make_datasets(config: ExperimentConfig, seed: int = 0) -> dict:
    """Train/val/test splits sized by ``config``, all from one data seed."""
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    return {split: generate_dataset(config.system, split, n, seed) for split, n in counts.items()}


# --- random search --------------------------------------------------------

@dataclass
class SearchSpace:
    hidden_layers: list[int] = field(default_factory=lambda: [1, 2])
    width: tuple[int, int] = (10, 40)
    aux_hidden_layers: list[int] = field(default_factory=lambda: [1, 2])
    aux_width: tuple[int, int] = (10, 40)
    log10_alpha1: tuple[float, float] = (-3.0, -1.0)
    log10_alpha2: tuple[float, float] = (-9.0, -7.0)
    log10_alpha3: tuple[float, float] = (-15.0, -13.0)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        d = {k: tuple(v) if k.startswith(("width", "aux_width", "log10")) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


def sample_candidate(space: SearchSpace, base: ExperimentConfig, rng: np.random.Generator) -> ExperimentConfig:
    def log_uniform(bounds):
        return float(10 ** rng.uniform(*bounds))

    loss = replace(
        base.loss,
        alpha1=log_uniform(space.log10_alpha1),
        alpha2=log_uniform(space.log10_alpha2),
        alpha3=log_uniform(space.log10_alpha3),
    )
    return replace(
        base,
        hidden_layers=int(rng.choice(space.hidden_layers)),
        width=int(rng.integers(space.width[0], space.width[1] + 1)),
        aux_hidden_layers=int(rng.choice(space.aux_hidden_layers)),
        aux_width=int(rng.integers(space.aux_width[0], space.aux_width[1] + 1)),
        loss=loss,
        train=replace(base.train, seed=int(rng.integers(0, 2**31 - 1))),
    )


def random_search(
    space: SearchSpace,
    budget: int,
    base: ExperimentConfig,
    train_set,
    val_set,
    seed: int = 0,
    test_set=None,
) -> tuple[KoopmanModel, ExperimentConfig, list[dict]]:
    """Train ``budget`` sampled candidates; keep the lowest validation loss.

    A candidate that diverges is logged with ``status: failed``.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    candidates = [sample_candidate(space, base, rng) for _ in range(budget)]
    log_rows: list[dict] = []
    best = None
    for i, cand in enumerate(candidates):
        row = {"index": i, "config": cand.to_dict()}
        try:
            model, report = fit(cand, train_set, val_set, test_set)
        except FloatingPointError as exc:
            row.update(status="failed", error=str(exc), val_loss=None)
            log_rows.append(row)
            log.warning("candidate %d failed: %s", i, exc)
            continue
        val = report.best_val_loss
        row.update(status="ok", val_loss=val, best_step=report.best_step, final=report.final)
        log_rows.append(row)
        if best is None or val < best[0]:
            best = (val, model, cand)
    if best is None:
        raise RuntimeError("every search candidate failed")
    return best[1], best[2], log_rows


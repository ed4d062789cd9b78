"""Adam training loop with autoencoder pretraining, early stopping and random search."""

from __future__ import annotations

import ctypes
import functools
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnet
from .koopman import KoopmanModel, save_model
from .losses import PREDICTED, LossBreakdown, LossWeights, compute_loss, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_steps: int = 20_000
    pretrain_steps: int = 2000
    validation_interval: int = 100
    seed: int = 0
    checkpoint_path: str | None = None
    max_retries: int = 3
    eigs_from: str = PREDICTED
    log_interval: int = 0
    # zero Adam's moment estimates every this many training steps (0: never)
    adam_restart_interval: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.validation_interval <= 0:
            raise ValueError("learning rate, batch size and validation interval must be positive")
        if self.max_steps < 0 or self.pretrain_steps < 0 or self.adam_restart_interval < 0:
            raise ValueError("step budgets cannot be negative")


@dataclass
class TrainReport:
    train_trace: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_trace: list[float] = field(default_factory=list)
    best_step: int = 0
    best_val_loss: float = float("inf")
    final: dict = field(default_factory=dict)
    retries: int = 0
    wall_time: float = 0.0

    def as_dict(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d


@functools.cache
def _keep_freed_memory() -> None:
    """Let glibc reuse freed blocks instead of unmapping them.

    Training allocates the same few hundred-kilobyte temporaries thousands of
    times; by default each one is a fresh mmap plus page faults, which costs
    more than the arithmetic.  Only affects how memory is recycled.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD
    libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD


def _states(data) -> np.ndarray:
    return np.asarray(getattr(data, "states", data), dtype=np.float64)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Endless stream of index batches; each epoch is a fresh permutation."""
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def _adam_loop(model, states, weights, config, steps, seed, loss_kw, on_step=None, restart=0):
    rng = np.random.default_rng(seed)
    batches = _batches(rng, states.shape[0], config.batch_size)
    adam = nnet.AdamState.zeros_like(model.params())
    for step in range(1, steps + 1):
        if restart and step > 1 and (step - 1) % restart == 0:
            # a gradient spike parks in the second moment for ~1/(1 - beta2)
            # steps per decade; a fresh state lets stalled parameters move again
            adam = nnet.AdamState.zeros_like(model.params())
        idx = next(batches)
        breakdown, grads = loss_and_grad(model, states[idx], weights, **loss_kw)
        if not np.isfinite(breakdown.total):
            raise nnet.TrainingDivergenceError(f"loss became {breakdown.total} at step {step}")
        new, adam = nnet.adam_step(model.params(), grads, adam, config.learning_rate)
        model.set_params(new)
        if on_step is not None:
            on_step(step, breakdown)


def pretrain(model: KoopmanModel, dataset, config: TrainConfig, weights: LossWeights) -> KoopmanModel:
    """Adam on the reconstruction terms only; returns a trained copy."""
    model = model.copy()
    if config.pretrain_steps == 0:
        return model
    _keep_freed_memory()
    seed = np.random.SeedSequence([config.seed, 1])
    _adam_loop(
        model, _states(dataset), weights, config, config.pretrain_steps, seed,
        {"autoencoder_only": True},
    )
    return model


def train(
    model: KoopmanModel,
    train_set,
    val_set,
    config: TrainConfig,
    weights: LossWeights,
    test_set=None,
) -> tuple[KoopmanModel, TrainReport]:
    """Train and return the checkpoint with the lowest validation loss."""
    t0 = time.perf_counter()
    _keep_freed_memory()
    X_train, X_val = _states(train_set), _states(val_set)
    if X_train.shape[1:] != X_val.shape[1:]:
        raise ValueError("training and validation trajectories differ in shape")
    loss_kw = {"eigs_from": config.eigs_from}
    model = model.copy()
    report = TrainReport()

    def validate(step: int) -> None:
        val = compute_loss(model, X_val, weights, **loss_kw).total
        report.val_steps.append(step)
        report.val_trace.append(val)
        if val < report.best_val_loss:
            report.best_val_loss = val
            report.best_step = step
            state["best"] = [p.copy() for p in model.params()]
            if config.checkpoint_path:
                save_model(model, Path(config.checkpoint_path))

    state: dict = {"best": [p.copy() for p in model.params()]}
    validate(0)

    def on_step(step: int, breakdown: LossBreakdown) -> None:
        report.train_trace.append(breakdown.total)
        if config.log_interval and step % config.log_interval == 0:
            log.info("step %d train %.3e best val %.3e", step, breakdown.total, report.best_val_loss)
        if step % config.validation_interval == 0 or step == config.max_steps:
            validate(step)

    done = 0
    while done < config.max_steps:
        # resume from wherever the last attempt stopped
        start = len(report.train_trace)
        try:
            _adam_loop(
                model, X_train, weights, config, config.max_steps - start,
                np.random.SeedSequence([config.seed, 2, report.retries]),
                loss_kw, lambda s, b: on_step(start + s, b), config.adam_restart_interval,
            )
            done = config.max_steps
        except FloatingPointError as exc:
            report.retries += 1
            log.warning("divergence (%s); restoring best checkpoint", exc)
            if report.retries > config.max_retries:
                raise nnet.TrainingDivergenceError(
                    f"training diverged {report.retries} times; last failure at step "
                    f"{len(report.train_trace) + 1}: {exc}"
                ) from exc
            model.set_params(state["best"])

    model.set_params(state["best"])
    model.metadata.update(
        {"seed": config.seed, "best_step": report.best_step, "best_val_loss": report.best_val_loss}
    )
    report.final = {"train": compute_loss(model, X_train, weights, **loss_kw).as_dict(),
                    "val": compute_loss(model, X_val, weights, **loss_kw).as_dict()}
    if test_set is not None:
        report.final["test"] = compute_loss(model, _states(test_set), weights, **loss_kw).as_dict()
    report.wall_time = time.perf_counter() - t0
    return model, report

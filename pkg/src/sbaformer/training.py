"""Adam optimization loop with early stopping, plus evaluation.

Training is bit-for-bit reproducible under a fixed seed: shuffling is a
seeded permutation per epoch, batches run in order, and the history file
carries only deterministic fields (wall times go to a separate timing list
so re-runs produce byte-identical histories).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, Normalizer, chrono_split, make_windows, metrics, window_arrays
from .errors import ConfigError, ContractError, NumericError
from .model import ModelParams, SbaTransformer, mae_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainState:
    """Optimizer moments keyed like the parameter manifest, plus progress."""

    epoch: int = 0
    step: int = 0
    best_val_mae: float = float("inf")
    epochs_since_improve: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams) -> "TrainState":
        state = cls()
        for name, t in params.named():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(params: ModelParams, state: TrainState, cfg: TrainConfig):
    """Standard Adam with bias correction; optional global-norm clipping first."""
    named = list(params.named())
    grads = []
    for name, t in named:
        if t.grad is None:
            raise ContractError(f"missing gradient for {name}")
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient in {name}")
        grads.append(t.grad)
    if cfg.grad_clip is not None:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            grads = [g * scale for g in grads]
    state.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for (name, t), g in zip(named, grads):
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        t.data = t.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _batched_mae(model: SbaTransformer, series_norm, windows, batch: int = 64) -> float:
    """Mean of per-window MAE over a window set, batched, no tape."""
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(windows), batch):
            sel = range(lo, min(lo + batch, len(windows)))
            xs, ys = window_arrays(series_norm, windows, at=sel)
            pred = model.forward(Tensor(xs)).data
            total += float(np.abs(pred - ys).mean()) * len(sel)
    return total / len(windows)


def train(model: SbaTransformer, dataset: Dataset, cfg: TrainConfig):
    """Optimize on the train split, early-stop on validation MAE.

    Returns (best_params, history, timings): history is one dict per epoch
    with deterministic fields only; timings is the per-epoch wall seconds.
    On divergence the loop aborts and the best checkpoint so far survives.
    """
    mc = model.config
    if dataset.n != mc.n or dataset.c != mc.c:
        raise ContractError(
            f"dataset ({dataset.n} nodes, {dataset.c} ch) does not match the model config"
        )
    splits = chrono_split(dataset.steps, min_len=mc.t + mc.f)
    normalizer = Normalizer.fit(dataset.series[:, splits[0][0] : splits[0][1]])
    series_norm = normalizer.apply(dataset.series)
    train_ws = make_windows(splits[0], mc.t, mc.f, split="train")
    val_ws = make_windows(splits[1], mc.t, mc.f, split="val")
    if not len(train_ws) or not len(val_ws):
        raise ConfigError("train/val splits yield no complete windows")

    rng = np.random.default_rng(cfg.seed)
    state = TrainState.for_params(model.params)
    best_params = model.params.clone()
    history, timings = [], []

    for epoch in range(cfg.max_epochs):
        tic = time.perf_counter()
        order = rng.permutation(len(train_ws))
        losses = []
        flops_before = ad.flops.total()
        aborted = False
        with ad.flops.counting():
            for lo in range(0, len(order), cfg.batch_size):
                sel = order[lo : lo + cfg.batch_size]
                xs, ys = window_arrays(series_norm, train_ws, at=sel)
                model.params.zero_grad()
                try:
                    loss = mae_loss(model.forward(Tensor(xs)), Tensor(ys))
                    loss.backward()
                    adam_step(model.params, state, cfg)
                except NumericError as exc:
                    log.error("aborting training at epoch %d: %s", epoch, exc)
                    aborted = True
                    break
                losses.append(loss.item())
        if aborted:
            history.append({"epoch": epoch, "aborted": True})
            timings.append(time.perf_counter() - tic)
            break
        val_mae = _batched_mae(model, series_norm, val_ws)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_mae": val_mae,
                "flops": ad.flops.total() - flops_before,
            }
        )
        timings.append(time.perf_counter() - tic)
        state.epoch = epoch
        if val_mae < state.best_val_mae:
            state.best_val_mae = val_mae
            state.epochs_since_improve = 0
            best_params = model.params.clone()
        else:
            state.epochs_since_improve += 1
            if state.epochs_since_improve >= cfg.patience:
                break
    return best_params, history, timings


def persistence_forecast(xs: np.ndarray, f: int) -> np.ndarray:
    """Repeat each window's last observation across the horizon."""
    return np.repeat(xs[..., -1:, :], f, axis=-2)


def evaluate(
    model: SbaTransformer,
    dataset: Dataset,
    split: str = "test",
    null_threshold: float = 1e-4,
    batch: int = 64,
) -> dict:
    """Metric report on de-normalized forecasts, with a persistence reference row.

    Forecasts come from the normalized pipeline and are inverted back to the
    raw scale before scoring; the persistence row goes through the exact
    same metric path.
    """
    mc = model.config
    if dataset.n != mc.n or dataset.c != mc.c:
        raise ContractError("checkpoint config does not match the dataset shapes")
    splits = chrono_split(dataset.steps, min_len=mc.t + mc.f)
    index = {"train": 0, "val": 1, "test": 2}
    if split not in index:
        raise ConfigError(f"unknown split {split!r}")
    normalizer = Normalizer.fit(dataset.series[:, splits[0][0] : splits[0][1]])
    series_norm = normalizer.apply(dataset.series)
    windows = make_windows(splits[index[split]], mc.t, mc.f, split=split)
    if not len(windows):
        raise ConfigError(f"{split} split yields no complete windows")

    preds, targets, naive = [], [], []
    with ad.no_grad():
        for lo in range(0, len(windows), batch):
            sel = range(lo, min(lo + batch, len(windows)))
            xs_n, _ = window_arrays(series_norm, windows, at=sel)
            xs_raw, ys_raw = window_arrays(dataset.series, windows, at=sel)
            preds.append(normalizer.invert(model.forward(Tensor(xs_n)).data))
            targets.append(ys_raw)
            naive.append(persistence_forecast(xs_raw, mc.f))
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    report = {
        "split": split,
        "windows": len(windows),
        "model": metrics(pred, target, null_threshold),
        "persistence": metrics(np.concatenate(naive), target, null_threshold),
    }
    return report

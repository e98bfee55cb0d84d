"""Training protocol: Adam, plateau LR decay, delayed early stopping,
failure-retrain rule, 5-fold cross validation and the 72-configuration grid.

Protocol constants follow the experiment setup: initial learning rate 1e-4
decayed by 0.9 after 5 epochs without improvement of more than 0.005,
floored at 1e-6; early stopping (patience 20, best-weights restore) only
becomes active after epoch 60; at most 300 epochs; a run whose best
validation loss ends at or above 0.4 counts as failed and is reinitialised
and retrained, at most max_retries times.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from itertools import product
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .corpus import collapse_to_binary, N_CLASSES
from .losses import LossSpec, make_loss
from .metrics import MetricReport, evaluate_testset, summarize_folds
from .tiling import Tile
from .unet import ModelConfig, WearUNet, build_unet, make_predictor, save_checkpoint
from . import reporting

MODES = ("binary", "multiclass")
TILE_EDGES = (512, 256)
AUG_LEVELS = ("none", "moderate", "full")
LOSS_KINDS = ("ce", "fce", "iou")
DEFAULT_BATCH_SIZES = {512: 16, 256: 32}


@dataclass(frozen=True)
class ExperimentConfig:
    """One cell of the experiment grid."""

    mode: str
    tile_edge: int
    aug_level: str
    loss_kind: str
    use_batch_norm: bool
    batch_size: Optional[int] = None
    seed: int = 0
    base_filters: int = 64

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return DEFAULT_BATCH_SIZES.get(self.tile_edge, 16)

    def label(self) -> str:
        bn = "bn" if self.use_batch_norm else "nobn"
        return f"{self.mode}-d{self.tile_edge}-{self.aug_level}-{self.loss_kind}-{bn}"

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]

    def model_config(self, channels_in: int = 3) -> ModelConfig:
        return ModelConfig(mode=self.mode, use_batch_norm=self.use_batch_norm,
                           input_edge=self.tile_edge, channels_in=channels_in,
                           base_filters=self.base_filters)

    def loss_spec(self) -> LossSpec:
        return LossSpec(kind=self.loss_kind, mode=self.mode)


def grid_configs(seed: int = 0, base_filters: int = 64) -> list[ExperimentConfig]:
    """All 72 combinations: mode x tile edge x augmentation x loss x BN."""
    return [
        ExperimentConfig(mode=m, tile_edge=d, aug_level=a, loss_kind=lk,
                         use_batch_norm=bn, seed=seed, base_filters=base_filters)
        for m, d, a, lk, bn in product(MODES, TILE_EDGES, AUG_LEVELS, LOSS_KINDS,
                                       (False, True))
    ]


@dataclass(frozen=True)
class TrainerSettings:
    initial_lr: float = 1e-4
    min_lr: float = 1e-6
    lr_factor: float = 0.9
    lr_patience: int = 5
    lr_min_delta: float = 0.005
    es_patience: int = 20
    es_start_epoch: int = 60
    max_epochs: int = 300
    fail_threshold: float = 0.4
    max_retries: int = 3
    n_folds: int = 5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-7


DEFAULT_SETTINGS = TrainerSettings()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float


@dataclass
class TrainState:
    """Mutable per-run protocol state driven one epoch at a time."""

    settings: TrainerSettings = field(default_factory=lambda: DEFAULT_SETTINGS)
    epoch: int = 0
    learning_rate: float = 0.0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    plateau_best: float = math.inf
    plateau_count: int = 0
    history: list[EpochRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate == 0.0:
            self.learning_rate = self.settings.initial_lr


def record_epoch(state: TrainState, train_loss: float, val_loss: float) -> bool:
    """Advance one epoch; track the all-time best val loss (strict improvement)."""
    state.epoch += 1
    new_best = val_loss < state.best_val_loss
    if new_best:
        state.best_val_loss = val_loss
        state.best_epoch = state.epoch
        state.epochs_since_improve = 0
    else:
        state.epochs_since_improve += 1
    state.history.append(EpochRecord(state.epoch, train_loss, val_loss,
                                     state.learning_rate))
    return new_best


def lr_schedule_step(state: TrainState, new_val_loss: float) -> float:
    """Plateau decay: after lr_patience epochs without improving the monitored
    best by more than lr_min_delta, multiply the rate by lr_factor (floored at
    min_lr) and reset the plateau counter."""
    s = state.settings
    if new_val_loss < state.plateau_best - s.lr_min_delta:
        state.plateau_best = new_val_loss
        state.plateau_count = 0
    else:
        state.plateau_count += 1
        if state.plateau_count >= s.lr_patience:
            state.learning_rate = max(s.lr_factor * state.learning_rate, s.min_lr)
            state.plateau_count = 0
    return state.learning_rate


def early_stop_check(state: TrainState) -> bool:
    """True when training should stop and the best weights be restored.

    Never before es_start_epoch; afterwards when es_patience epochs passed
    without improvement. Always at the max_epochs cap.
    """
    s = state.settings
    if state.epoch >= s.max_epochs:
        return True
    return (state.epoch >= s.es_start_epoch
            and state.epochs_since_improve >= s.es_patience)


def run_protocol(val_losses, settings: TrainerSettings) -> TrainState:
    """Drive the protocol with a scripted val-loss sequence (no model).

    Consumes losses until the stop rule fires or the sequence ends; useful
    for exercising schedule/stopping logic without training.
    """
    state = TrainState(settings=settings)
    for v in val_losses:
        record_epoch(state, train_loss=float("nan"), val_loss=v)
        lr_schedule_step(state, v)
        if early_stop_check(state):
            break
    return state


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> 1)


def tiles_to_arrays(tiles: list[Tile], mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack tiles into model-ready arrays: x (N,C,H,W), y per-mode target.

    binary: y (N,H,W) float32 with wear classes merged; multiclass: one-hot
    y (N,K,H,W) float32.
    """
    x = np.stack([t.pixels for t in tiles]).transpose(0, 3, 1, 2).astype(np.float32)
    masks = np.stack([t.mask for t in tiles])
    if mode == "binary":
        y = np.stack([collapse_to_binary(m) for m in masks]).astype(np.float32)
    else:
        y = np.zeros((masks.shape[0], N_CLASSES) + masks.shape[1:], dtype=np.float32)
        for k in range(N_CLASSES):
            y[:, k] = masks == k
    return x, y


def _forward_probs(model: WearUNet, xb: torch.Tensor) -> torch.Tensor:
    logits = model(xb)
    if model.config.mode == "binary":
        return torch.sigmoid(logits.squeeze(1))
    return torch.softmax(logits, dim=1)


def evaluate_loss(model: WearUNet, loss_fn, x: np.ndarray, y: np.ndarray,
                  batch_size: int) -> float:
    """Mean loss over a dataset, deterministically batched."""
    model.eval()
    total, n = 0.0, x.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch_size):
            xb = torch.from_numpy(x[i:i + batch_size])
            yb = torch.from_numpy(y[i:i + batch_size])
            nb = xb.shape[0]
            total += float(loss_fn(yb, _forward_probs(model, xb))) * nb
    return total / n


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_val_loss: float
    best_epoch: int
    stopped_epoch: int


def fit_model(model: WearUNet, loss_fn, train_xy, val_xy,
              settings: TrainerSettings, seed: int, batch_size: int) -> FitResult:
    """Run the full training protocol on one model; restores the best weights."""
    x_train, y_train = train_xy
    x_val, y_val = val_xy
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.initial_lr,
                                 betas=settings.adam_betas, eps=settings.adam_eps)
    state = TrainState(settings=settings)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5f1e]))
    best_weights = copy.deepcopy(model.state_dict())
    n = x_train.shape[0]
    while True:
        perm = rng.permutation(n)
        model.train()
        running, seen = 0.0, 0
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            xb = torch.from_numpy(x_train[idx])
            yb = torch.from_numpy(y_train[idx])
            loss = loss_fn(yb, _forward_probs(model, xb))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss) * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = evaluate_loss(model, loss_fn, x_val, y_val, batch_size)
        if record_epoch(state, train_loss, val_loss):
            best_weights = copy.deepcopy(model.state_dict())
        lr_schedule_step(state, val_loss)
        for group in optimizer.param_groups:
            group["lr"] = state.learning_rate
        if early_stop_check(state):
            break
    model.load_state_dict(best_weights)
    model.eval()
    return FitResult(history=state.history, best_val_loss=state.best_val_loss,
                     best_epoch=state.best_epoch, stopped_epoch=state.epoch)


def fit_with_retrain(fit_once: Callable[[int], object],
                     settings: TrainerSettings) -> tuple[object, int, bool]:
    """Apply the failure rule: retrain from scratch while best val loss >= 0.4.

    fit_once(attempt_index) must return an object with best_val_loss. Returns
    (last_result, attempts, failed); at most 1 + max_retries attempts.
    """
    attempts = 0
    while True:
        result = fit_once(attempts)
        attempts += 1
        if result.best_val_loss < settings.fail_threshold:
            return result, attempts, False
        if attempts > settings.max_retries:
            return result, attempts, True


@dataclass
class FoldResult:
    model: Optional[WearUNet]
    fit: FitResult
    report: Optional[MetricReport]
    attempts: int
    failed: bool


def train_fold(config: ExperimentConfig, train_tiles: list[Tile],
               val_tiles: list[Tile], test_tiles: Optional[list[Tile]] = None,
               settings: TrainerSettings = DEFAULT_SETTINGS,
               fold_seed: Optional[int] = None) -> FoldResult:
    """Train one fold with fresh weights, honoring the failure-retrain rule.

    The returned model carries the weights of its best validation epoch. When
    test tiles are given, the fold is evaluated on them (per-tile scores of
    the binary-collapsed predictions, averaged).
    """
    base_seed = config.seed if fold_seed is None else fold_seed
    channels = train_tiles[0].pixels.shape[2]
    loss_fn = make_loss(config.loss_spec())
    train_xy = tiles_to_arrays(train_tiles, config.mode)
    val_xy = tiles_to_arrays(val_tiles, config.mode)
    bs = config.resolved_batch_size()

    holder: dict = {}

    def fit_once(attempt: int) -> FitResult:
        seed = _derived_seed(base_seed, 0xa11e, attempt)
        model = build_unet(config.model_config(channels), seed=seed)
        result = fit_model(model, loss_fn, train_xy, val_xy, settings, seed, bs)
        holder["model"] = model
        return result

    fit, attempts, failed = fit_with_retrain(fit_once, settings)
    model = holder["model"]
    report = None
    if test_tiles:
        report = evaluate_testset(make_predictor(model, batch_size=bs),
                                  test_tiles, config.mode)
    return FoldResult(model=model, fit=fit, report=report,
                      attempts=attempts, failed=failed)


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffled partition of range(n) into k folds (sizes differ by <= 1)."""
    if n < k:
        raise ValueError(f"cannot split {n} tiles into {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xf01d]))
    return [np.sort(part) for part in np.array_split(rng.permutation(n), k)]


def cross_validate(config: ExperimentConfig, training_tiles: list[Tile],
                   test_tiles: Optional[list[Tile]] = None,
                   settings: TrainerSettings = DEFAULT_SETTINGS) -> list[FoldResult]:
    """5-fold CV: each fold trains fresh weights on k-1 folds, validates on
    the held-out fold for scheduling/stopping, and is scored on the external
    test tiles."""
    folds = kfold_indices(len(training_tiles), settings.n_folds, config.seed)
    results = []
    for f, val_idx in enumerate(folds):
        val_mask = np.zeros(len(training_tiles), dtype=bool)
        val_mask[val_idx] = True
        train = [t for i, t in enumerate(training_tiles) if not val_mask[i]]
        val = [t for i, t in enumerate(training_tiles) if val_mask[i]]
        results.append(train_fold(config, train, val, test_tiles, settings,
                                  fold_seed=_derived_seed(config.seed, 0xcf, f)))
    return results


def train_final(config: ExperimentConfig, training_tiles: list[Tile],
                settings: TrainerSettings = DEFAULT_SETTINGS) -> FoldResult:
    """Train on 90% of the training tiles; the other 10% only steer the LR
    schedule and early stopping."""
    n = len(training_tiles)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x90]))
    perm = rng.permutation(n)
    n_val = max(1, int(round(0.1 * n)))
    val_idx = set(perm[:n_val].tolist())
    train = [t for i, t in enumerate(training_tiles) if i not in val_idx]
    val = [t for i, t in enumerate(training_tiles) if i in val_idx]
    return train_fold(config, train, val, settings=settings,
                      fold_seed=_derived_seed(config.seed, 0xf1a1))


def _summary_row(config: ExperimentConfig, results: list[FoldResult]) -> dict:
    row = {"mode": config.mode, "loss": config.loss_kind, "aug": config.aug_level,
           "bn": config.use_batch_norm, "tile_edge": config.tile_edge,
           "label": config.label(), "hash": config.config_hash(),
           "failed_folds": sum(r.failed for r in results)}
    reports = [r.report for r in results if r.report is not None]
    row["fold_iou"] = [r.report.iou for r in results if r.report is not None]
    if len(reports) >= 2:
        for name, (med, iqr) in summarize_folds(reports).items():
            row[f"{name}_median"] = med
            row[f"{name}_iqr"] = iqr
        row["status"] = "ok" if row["failed_folds"] == 0 else "partial"
    else:
        row["status"] = "failed"
    return row


def run_grid(configs: list[ExperimentConfig],
             train_tilesets: dict, test_tilesets: dict,
             out_dir: str | Path,
             settings: TrainerSettings = DEFAULT_SETTINGS,
             resume: bool = True,
             cell_callback: Optional[Callable[[ExperimentConfig, dict], None]] = None,
             ) -> list[dict]:
    """Run every config cell with cross validation and persist all artifacts.

    train_tilesets maps (tile_edge, aug_level) -> tiles; test_tilesets maps
    tile_edge -> non-augmented test tiles. Layout per cell:
    <out>/runs/<hash>/fold<k>/{checkpoint.pt, history.csv, report.csv} plus
    config.json and a summary.json written last, which doubles as the
    completion marker for resuming. Individual cell failures are recorded and
    the grid continues. Returns the summary rows (also written as
    grid_summary.csv).
    """
    out_dir = Path(out_dir)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for config in configs:
        cell_dir = runs_dir / config.config_hash()
        summary_path = cell_dir / "summary.json"
        if resume and summary_path.exists():
            with open(summary_path) as fh:
                rows.append(json.load(fh))
            continue
        key = (config.tile_edge, config.aug_level)
        if key not in train_tilesets:
            raise ValueError(f"no prepared tile set for edge={key[0]} level={key[1]}")
        test_tiles = test_tilesets.get(config.tile_edge)
        results = cross_validate(config, train_tilesets[key], test_tiles, settings)
        cell_dir.mkdir(parents=True, exist_ok=True)
        with open(cell_dir / "config.json", "w") as fh:
            json.dump(asdict(config), fh, indent=2, sort_keys=True)
        for k, res in enumerate(results):
            fold_dir = cell_dir / f"fold{k}"
            fold_dir.mkdir(exist_ok=True)
            save_checkpoint(res.model, fold_dir / "checkpoint.pt")
            reporting.write_history_csv(fold_dir / "history.csv", res.fit.history)
            if res.report is not None:
                reporting.write_report_csv(fold_dir / "report.csv", res.report)
        row = _summary_row(config, results)
        with open(summary_path, "w") as fh:
            json.dump(row, fh, indent=2, sort_keys=True)
        rows.append(row)
        if cell_callback is not None:
            cell_callback(config, row)
    reporting.write_grid_summary_csv(out_dir / "grid_summary.csv", rows)
    return rows

"""Patch training: sample enumeration, splits, SGD loop, early stopping.

One epoch is a full seeded-shuffled pass over the training keys. Samples
are (station, hour) pairs; the estimation task regresses the withheld
station reading at hour t from the estimation-variant cube, the forecast
task regresses the next L readings from the forecast-variant cube (mean
squared error over the horizon). Losses are computed in normalized target
units; validation uses MAPE in physical units, matching the reported
metric. Early stopping keeps the parameters (and batch-norm statistics) of
the best validation epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import (
    GridCube,
    StationRegistry,
    extract_patch,
    fit_normalization,
    normalize,
)
from .inference import mape
from .layers import sgd_step
from .model import AirResConfig, DeepAirModel, LstmBaselineModel, LstmConfig
from .rng import Rng
from .synthcity import PlantedDataset
from .tensor import Tape, Tensor, add, backward, scale
from .layers import squared_error

REPORT_FORMAT = 1
SPLIT_FORMAT = 1


class NonFiniteLossError(RuntimeError):
    """Training hit a NaN/Inf loss; carries the offending sample key."""

    def __init__(self, key, value):
        super().__init__(f"non-finite loss {value!r} at sample {key!r}")
        self.key = key


@dataclass
class TrainConfig:
    patch_size: int = 15
    window: int = 48
    horizon: int = 0            # 0 = estimation, >=1 = forecast
    learning_rate: float = 1e-4
    lr_scale: float = 1.0       # explicit flag for scaled-rate experiments
    patience_epochs: int = 5    # 0 disables early stopping
    batch_size: int = 16        # 1 = fidelity mode (per-sample updates)
    max_epochs: int = 200
    max_steps: Optional[int] = None
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size % 2 != 1 or self.patch_size < 1:
            raise ValueError(f"patch_size must be odd, got {self.patch_size}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")
        # rate 0 is allowed so no-op training runs stay expressible in tests
        if self.learning_rate < 0 or self.lr_scale < 0:
            raise ValueError("learning_rate and lr_scale must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.patience_epochs < 0:
            raise ValueError(f"patience_epochs must be >= 0, got {self.patience_epochs}")


# ---------------------------------------------------------------------------
# sample keys and splits
# ---------------------------------------------------------------------------

def enumerate_samples(held: dict, registry: StationRegistry, channel: str,
                      hours: int, window: int, horizon: int) -> list:
    """Valid (station, t) keys: enough history and targets present.

    Estimation (horizon 0) needs the reading at t; forecast needs all of
    t+1 .. t+horizon.
    """
    keys = []
    for sid in registry.ids():
        for t in range(window - 1, hours):
            if horizon == 0:
                if (sid, channel, t) in held:
                    keys.append((sid, t))
            else:
                if t + horizon > hours - 1:
                    continue
                if all((sid, channel, t + h) in held for h in range(1, horizon + 1)):
                    keys.append((sid, t))
    if not keys:
        raise ValueError(
            f"no valid samples for channel {channel!r} with window {window} "
            f"and horizon {horizon} over {hours} hours"
        )
    return keys


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def all_keys(self) -> list:
        return list(self.train) + list(self.val) + list(self.test)


def split_keys(keys: list, seed: int,
               fractions: tuple = (0.8, 0.1, 0.1)) -> DatasetSplit:
    """Random split over sample keys (the published protocol)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    order = sorted(keys)
    Rng(seed).child("split").shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return DatasetSplit(order[:n_train], order[n_train:n_train + n_val],
                        order[n_train + n_val:], fractions, seed)


def save_split(path, split: DatasetSplit) -> None:
    with open(path, "w") as fh:
        fh.write(f"# split-format: {SPLIT_FORMAT}\n")
        fh.write(f"seed: {split.seed}\n")
        fh.write(f"fractions: {split.fractions[0]!r},{split.fractions[1]!r},"
                 f"{split.fractions[2]!r}\n")
        for name in ("train", "val", "test"):
            for sid, t in getattr(split, name):
                fh.write(f"{name},{sid},{t}\n")


def load_split(path) -> DatasetSplit:
    parts = {"train": [], "val": [], "test": []}
    seed = 0
    fractions = (0.8, 0.1, 0.1)
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("seed:"):
                seed = int(line.split(":", 1)[1])
                continue
            if line.startswith("fractions:"):
                fractions = tuple(float(x) for x in line.split(":", 1)[1].split(","))
                continue
            name, sid, t = line.split(",")
            parts[name].append((sid, int(t)))
    return DatasetSplit(parts["train"], parts["val"], parts["test"],
                        fractions, seed)


# ---------------------------------------------------------------------------
# sample sets
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Normalized cube plus targets, ready for the training loop.

    target_stats is the (mean, std) used to z-score targets; for station
    tasks it is the target channel's cube statistics, so de-normalized
    predictions land in physical units.
    """

    cube: GridCube                 # normalized
    registry: StationRegistry
    targets: dict                  # key -> float (estimation) or [L] array
    stats: dict                    # per-channel normalization
    target_stats: tuple            # (mean, std) for the regression target
    target_channel: Optional[str]
    patch_size: int
    window: int
    horizon: int

    def patch_values(self, key) -> np.ndarray:
        sid, t = key
        center = self.registry.cell(sid)
        return extract_patch(self.cube, center, self.patch_size, t,
                             self.window).values

    def target_phys(self, key) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.targets[key], dtype=np.float64))

    def target_norm(self, key) -> np.ndarray:
        mean, std = self.target_stats
        return (self.target_phys(key) - mean) / std

    def denormalize(self, pred: np.ndarray) -> np.ndarray:
        mean, std = self.target_stats
        return pred * std + mean


def _safe_std(std: float) -> float:
    return 1.0 if std < 1e-9 else std


def prepare_station_samples(cube: GridCube, registry: StationRegistry,
                            held: dict, target_channel: str,
                            config: TrainConfig) -> tuple[SampleSet, DatasetSplit]:
    """Station task: keys from held readings, stats fitted on train hours."""
    config.validate()
    keys = enumerate_samples(held, registry, target_channel, cube.hours,
                             config.window, config.horizon)
    split = split_keys(keys, config.seed)
    train_hours = sorted({t for _, t in split.train})
    stats = fit_normalization(cube, train_hours)
    norm_cube = normalize(cube, stats)
    mean, std = stats[target_channel]
    target_stats = (mean, _safe_std(std))
    targets = {}
    for sid, t in keys:
        if config.horizon == 0:
            targets[(sid, t)] = held[(sid, target_channel, t)]
        else:
            targets[(sid, t)] = np.array(
                [held[(sid, target_channel, t + h)]
                 for h in range(1, config.horizon + 1)]
            )
    return (
        SampleSet(norm_cube, registry, targets, stats, target_stats,
                  target_channel, config.patch_size, config.window,
                  config.horizon),
        split,
    )


def prepare_planted_samples(dataset: PlantedDataset,
                            config: TrainConfig) -> tuple[SampleSet, DatasetSplit]:
    """Planted oracle task: explicit targets, estimation-style (horizon 0)."""
    config.validate()
    if config.horizon != 0:
        raise ValueError("planted datasets train estimation-style models")
    if config.patch_size != dataset.patch_size:
        raise ValueError(
            f"config patch_size {config.patch_size} != dataset patch size "
            f"{dataset.patch_size}"
        )
    keys = sorted(k for k in dataset.targets if k[1] >= config.window - 1)
    if not keys:
        raise ValueError("no valid samples: window longer than the dataset")
    split = split_keys(keys, config.seed)
    train_hours = sorted({t for _, t in split.train})
    stats = fit_normalization(dataset.cube, train_hours)
    norm_cube = normalize(dataset.cube, stats)
    train_targets = np.array([dataset.targets[k] for k in split.train])
    target_stats = (float(train_targets.mean()),
                    _safe_std(float(train_targets.std())))
    return (
        SampleSet(norm_cube, dataset.registry, dict(dataset.targets), stats,
                  target_stats, None, dataset.patch_size, config.window, 0),
        split,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    seed: int
    epochs: list = field(default_factory=list)  # dicts: epoch/train_loss/val_mape
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val: float = math.nan
    steps: int = 0
    wall_clock_sec: float = 0.0

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# report-format: {REPORT_FORMAT}\n")
            fh.write(f"# wall_clock_sec: {self.wall_clock_sec!r}\n")
            fh.write(f"seed: {self.seed}\n")
            fh.write(f"stop_epoch: {self.stop_epoch}\n")
            fh.write(f"best_epoch: {self.best_epoch}\n")
            fh.write(f"best_val: {self.best_val!r}\n")
            fh.write(f"steps: {self.steps}\n")
            fh.write("epoch,train_loss,val_mape\n")
            for row in self.epochs:
                fh.write(f"{row['epoch']},{row['train_loss']!r},"
                         f"{row['val_mape']!r}\n")

    @classmethod
    def load(cls, path) -> "TrainReport":
        rep = cls(seed=0)
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("# wall_clock_sec:"):
                    rep.wall_clock_sec = float(line.split(":", 1)[1])
                    continue
                if not line or line.startswith("#") or line.startswith("epoch,"):
                    continue
                if ":" in line and "," not in line.split(":", 1)[0]:
                    key, value = line.split(":", 1)
                    value = value.strip()
                    if key == "seed":
                        rep.seed = int(value)
                    elif key == "stop_epoch":
                        rep.stop_epoch = int(value)
                    elif key == "best_epoch":
                        rep.best_epoch = int(value)
                    elif key == "best_val":
                        rep.best_val = float(value)
                    elif key == "steps":
                        rep.steps = int(value)
                    continue
                epoch, loss, val = line.split(",")
                rep.epochs.append({"epoch": int(epoch),
                                   "train_loss": float(loss),
                                   "val_mape": float(val)})
        return rep


def early_stop(best_epoch: int, epoch: int, patience: int) -> bool:
    """Stop once the best epoch sits at the left edge of the patience
    window (the window of `patience` epochs includes the best one)."""
    if patience <= 0:
        return False
    return epoch > best_epoch and epoch - best_epoch >= patience - 1


def run_early_stopping(errors: list, patience: int) -> tuple[int, int]:
    """Scan a validation-error stream; return (stop_epoch, best_epoch)."""
    best_epoch, best = 0, math.inf
    epoch = 0
    for epoch, err in enumerate(errors, start=1):
        if err < best:
            best, best_epoch = err, epoch
        if early_stop(best_epoch, epoch, patience):
            return epoch, best_epoch
    return epoch, best_epoch


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _snapshot(model):
    params = [p.tensor.data.copy() for p in model.parameters()]
    bn = [(s.running_mean.copy(), s.running_var.copy(), s.initialized)
          for _, s in model.bn_states()]
    return params, bn


def _restore(model, snap) -> None:
    params, bn = snap
    for p, data in zip(model.parameters(), params):
        p.tensor.data = data.copy()
    for (_, state), (rm, rv, init) in zip(model.bn_states(), bn):
        state.running_mean = rm.copy()
        state.running_var = rv.copy()
        state.initialized = init


def evaluate_pairs(model, samples: SampleSet, keys):
    """(predictions, truths) in physical units over the given keys."""
    preds, truths = [], []
    for key in keys:
        out = model.forward(samples.patch_values(key), "eval").data
        preds.append(samples.denormalize(out))
        truths.append(samples.target_phys(key))
    return np.array(preds), np.array(truths)


def validation_mape(model, samples: SampleSet, keys) -> float:
    preds, truths = evaluate_pairs(model, samples, keys)
    return mape(preds, truths).mape_percent


def evaluate_mse(model, samples: SampleSet, keys) -> float:
    """Mean squared error in normalized target units (oracle experiments)."""
    total = 0.0
    for key in keys:
        out = model.forward(samples.patch_values(key), "eval").data
        err = out - samples.target_norm(key)
        total += float((err ** 2).mean())
    return total / len(keys)


def train_model(model, samples: SampleSet, split: DatasetSplit,
                config: TrainConfig) -> TrainReport:
    """SGD over shuffled epochs with validation-MAPE early stopping."""
    config.validate()
    t_start = time.perf_counter()
    lr = config.learning_rate * config.lr_scale
    params = model.parameters()
    shuffle_rng = Rng(config.seed).child("shuffle")
    report = TrainReport(seed=config.seed)
    best = math.inf
    best_epoch = 0
    best_snap = None
    steps = 0
    done = False

    for epoch in range(1, config.max_epochs + 1):
        order = list(split.train)
        shuffle_rng.shuffle(order)
        losses = []
        for batch in _chunks(order, config.batch_size):
            with Tape() as tape:
                total = None
                for key in batch:
                    pred = model.forward(samples.patch_values(key), "train")
                    reduction = "sum" if config.horizon == 0 else "mean"
                    loss = squared_error(pred, samples.target_norm(key), reduction)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NonFiniteLossError(key, value)
                    losses.append(value)
                    total = loss if total is None else add(total, loss)
                batch_loss = scale(total, 1.0 / len(batch))
            backward(batch_loss, tape)
            sgd_step(params, lr)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                done = True
                break
        val = validation_mape(model, samples, split.val) if split.val else math.nan
        report.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else math.nan,
            "val_mape": val,
        })
        if not math.isnan(val) and val < best:
            best, best_epoch = val, epoch
            best_snap = _snapshot(model)
        if done or early_stop(best_epoch, epoch, config.patience_epochs):
            report.stop_epoch = epoch
            break
        report.stop_epoch = epoch

    if best_snap is None:  # no usable validation: keep the final parameters
        best_epoch = report.stop_epoch
        best = report.epochs[-1]["val_mape"] if report.epochs else math.nan
    else:
        _restore(model, best_snap)
    report.best_epoch = best_epoch
    report.best_val = best if best_snap is not None else best
    report.steps = steps
    report.wall_clock_sec = time.perf_counter() - t_start
    return report


# ---------------------------------------------------------------------------
# task wrappers
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    report: TrainReport
    split: DatasetSplit
    samples: SampleSet


def _build_model(kind: str, channels: int, airres: AirResConfig,
                 lstm: LstmConfig, config: TrainConfig, variant: str):
    rng = Rng(config.seed).child("init")
    if kind == "deepair":
        return DeepAirModel(channels, airres, lstm, config.window, variant,
                            config.horizon, rng)
    if kind == "lstm_baseline":
        return LstmBaselineModel(channels, lstm, config.window, variant,
                                 config.horizon, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def train_estimation(cube: GridCube, registry: StationRegistry, held: dict,
                     target_channel: str, config: TrainConfig,
                     airres: AirResConfig, lstm: LstmConfig,
                     kind: str = "deepair") -> TrainResult:
    """Fit the current-hour estimator on the estimation-variant cube."""
    if cube.variant != "estimation":
        raise ValueError(f"estimation training needs an estimation-variant cube, "
                         f"got {cube.variant!r}")
    if config.horizon != 0:
        raise ValueError("estimation training requires horizon 0")
    samples, split = prepare_station_samples(cube, registry, held,
                                             target_channel, config)
    model = _build_model(kind, len(cube.schema), airres, lstm, config,
                         "estimation")
    report = train_model(model, samples, split, config)
    return TrainResult(model, report, split, samples)


def train_forecast(cube: GridCube, registry: StationRegistry, held: dict,
                   target_channel: str, config: TrainConfig,
                   airres: AirResConfig, lstm: LstmConfig,
                   kind: str = "deepair") -> TrainResult:
    """Fit the L-hour forecaster on the forecast-variant cube."""
    if cube.variant != "forecast":
        raise ValueError(f"forecast training needs a forecast-variant cube, "
                         f"got {cube.variant!r}")
    if config.horizon < 1:
        raise ValueError("forecast training requires horizon >= 1")
    samples, split = prepare_station_samples(cube, registry, held,
                                             target_channel, config)
    model = _build_model(kind, len(cube.schema), airres, lstm, config,
                         "forecast")
    report = train_model(model, samples, split, config)
    return TrainResult(model, report, split, samples)


def hyperparam_search(samples: SampleSet, split: DatasetSplit,
                      config: TrainConfig, channels: int,
                      airres: AirResConfig, variant: str,
                      grid=((1, 128), (2, 128), (1, 256), (2, 256),
                            (1, 512), (2, 512)),
                      kind: str = "deepair"):
    """Train every (layers, hidden) cell on the same split and seed; the
    best validation error wins, ties break toward fewer parameters."""
    results = []
    for num_layers, hidden in grid:
        lstm = LstmConfig(num_layers, hidden,
                          airres.feature_width if kind == "deepair" else channels)
        model = _build_model(kind, channels, airres, lstm, config, variant)
        n_params = sum(p.tensor.data.size for p in model.parameters())
        report = train_model(model, samples, split, config)
        results.append({
            "num_layers": num_layers,
            "hidden_size": hidden,
            "val_error": report.best_val,
            "n_params": n_params,
            "model": model,
            "report": report,
        })
    return select_best(results), results


def select_best(results: list[dict]) -> dict:
    """Lowest validation error wins; ties go to the smaller model."""
    if not results:
        raise ValueError("no grid cells to select from")
    return min(results, key=lambda r: (r["val_error"], r["n_params"]))

"""City-wide estimation maps, station forecasts, MAPE tables, exports.

Predictions leave this module in physical units: de-normalization happens
here, at the inference boundary, using the per-channel statistics stored
with the checkpoint. The error metric is the mean absolute percentage
error over all (sample, horizon-step) pairs, with near-zero truths
excluded and counted rather than silently dropped; the corresponding
"accuracy" is 100 - MAPE.

Exports are delimited text plus a plain-text grayscale raster (P2
portable graymap with the value range declared in a header comment).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import GridCube, StationRegistry, denormalize_value, extract_patch

TABLE_FORMAT = 1
RASTER_FORMAT = 1

MAPE_EPSILON = 1.0  # near-zero-truth guard, physical units


@dataclass
class EvalResult:
    mape_percent: float
    n_pairs: int
    n_excluded: int
    per_step: Optional[list] = None  # forecast: one MAPE per horizon step

    @property
    def accuracy_percent(self) -> float:
        return 100.0 - self.mape_percent


def mape(predictions, truths, epsilon: float = MAPE_EPSILON) -> EvalResult:
    """Mean of |truth - pred| / truth * 100 over all pairs.

    Pairs with truth below epsilon are excluded from the mean and counted.
    Inputs are [n] or [n, L] arrays in physical units.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    tr = np.asarray(truths, dtype=np.float64)
    if preds.shape != tr.shape:
        raise ValueError(f"prediction shape {preds.shape} != truth shape {tr.shape}")
    if preds.size == 0:
        raise ValueError("mape needs at least one (prediction, truth) pair")
    keep = tr >= epsilon
    n_excluded = int((~keep).sum())
    if not keep.any():
        raise ValueError(
            f"all {preds.size} pairs have truth below epsilon={epsilon}; "
            "the metric is undefined"
        )
    pct = np.abs(tr[keep] - preds[keep]) / tr[keep] * 100.0
    per_step = None
    if preds.ndim == 2:
        per_step = []
        for h in range(preds.shape[1]):
            k = keep[:, h]
            if k.any():
                per_step.append(float(
                    (np.abs(tr[k, h] - preds[k, h]) / tr[k, h] * 100.0).mean()
                ))
            else:
                per_step.append(math.nan)
    return EvalResult(float(pct.mean()), int(keep.sum()), n_excluded, per_step)


# ---------------------------------------------------------------------------
# Algorithm-level prediction
# ---------------------------------------------------------------------------

@dataclass
class EstimationMap:
    timestamp: datetime
    channel: str
    values: np.ndarray  # [H, W] physical units
    checkpoint_ref: str = ""


@dataclass
class ForecastTable:
    timestamp: datetime
    channel: str
    horizon: int
    rows: dict = field(default_factory=dict)  # station_id -> [L] physical
    checkpoint_ref: str = ""


def estimate_city(model, cube: GridCube, stats: dict, target_channel: str,
                  t_star: int, patch_size: int,
                  checkpoint_ref: str = "") -> EstimationMap:
    """Current-hour value for every grid cell (estimation variant cube,
    already normalized)."""
    if t_star < model.window - 1:
        raise ValueError(
            f"insufficient history: t*={t_star} needs {model.window - 1} prior hours"
        )
    h, w = cube.spec.rows, cube.spec.cols
    values = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            patch = extract_patch(cube, (r, c), patch_size, t_star, model.window)
            out = model.forward(patch.values, "eval").data
            values[r, c] = denormalize_value(stats, target_channel, float(out[0]))
    return EstimationMap(cube.hour_at(t_star), target_channel, values,
                         checkpoint_ref)


def forecast_stations(model, cube: GridCube, registry: StationRegistry,
                      stats: dict, target_channel: str, t_star: int,
                      patch_size: int, checkpoint_ref: str = "") -> ForecastTable:
    """L-hour-ahead values for every registry station, one forward pass
    per station (direct multi-output, not iterated single steps)."""
    if model.variant != "forecast":
        raise ValueError("forecast_stations requires a forecast-variant model")
    if t_star < model.window - 1:
        raise ValueError(
            f"insufficient history: t*={t_star} needs {model.window - 1} prior hours"
        )
    table = ForecastTable(cube.hour_at(t_star), target_channel, model.horizon,
                          checkpoint_ref=checkpoint_ref)
    for sid in registry.ids():
        patch = extract_patch(cube, registry.cell(sid), patch_size, t_star,
                              model.window)
        out = model.forward(patch.values, "eval").data
        table.rows[sid] = np.array(
            [denormalize_value(stats, target_channel, float(v)) for v in out]
        )
    return table


def per_pollutant_eval(pairs_by_channel: dict,
                       epsilon: float = MAPE_EPSILON) -> list[dict]:
    """MAPE table rows from {channel: (predictions, truths)} in physical
    units; one row per pollutant."""
    rows = []
    for channel in sorted(pairs_by_channel):
        preds, truths = pairs_by_channel[channel]
        result = mape(preds, truths, epsilon)
        rows.append({
            "channel": channel,
            "mape_percent": result.mape_percent,
            "accuracy_percent": result.accuracy_percent,
            "n_pairs": result.n_pairs,
            "n_excluded": result.n_excluded,
        })
    return rows


def seasonal_mean_maps(maps: list[EstimationMap]):
    """Per-cell mean of the hourly maps in each season bucket.

    Returns (dict season -> raster, warnings); seasons with no maps are
    omitted and reported in warnings.
    """
    from .grid import season_of_month

    if not maps:
        raise ValueError("seasonal_mean_maps needs at least one map")
    buckets: dict[str, list] = {"spring": [], "summer": [], "autumn": [],
                                "winter": []}
    for m in maps:
        buckets[season_of_month(m.timestamp.month)].append(m.values)
    rasters = {}
    warnings = []
    for season in ("spring", "summer", "autumn", "winter"):
        if buckets[season]:
            rasters[season] = np.mean(buckets[season], axis=0)
        else:
            warnings.append(f"season {season}: no maps in range, raster omitted")
    return rasters, warnings


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def save_estimation_map_csv(path, emap: EstimationMap) -> None:
    with open(path, "w") as fh:
        fh.write(f"# table-format: {TABLE_FORMAT}\n")
        fh.write(f"# channel: {emap.channel} at {emap.timestamp.isoformat()}\n")
        fh.write("row,col,value\n")
        h, w = emap.values.shape
        for r in range(h):
            for c in range(w):
                fh.write(f"{r},{c},{float(emap.values[r, c])!r}\n")


def save_raster_pgm(path, values: np.ndarray, comment: str = "") -> None:
    """P2 portable graymap; values scaled linearly onto 0..255 with the
    source range declared in the header."""
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span < 1e-12:
        scaled = np.zeros(values.shape, dtype=int)
    else:
        scaled = np.rint((values - lo) / span * 255.0).astype(int)
    h, w = values.shape
    with open(path, "w") as fh:
        fh.write("P2\n")
        fh.write(f"# raster-format {RASTER_FORMAT} min={lo!r} max={hi!r} {comment}\n")
        fh.write(f"{w} {h}\n255\n")
        for r in range(h):
            fh.write(" ".join(str(v) for v in scaled[r]) + "\n")


def load_raster_pgm(path) -> tuple[np.ndarray, float, float]:
    """Read back a P2 raster; returns (0..255 ints, declared min, declared max)."""
    lines = Path(path).read_text().splitlines()
    if lines[0].strip() != "P2":
        raise ValueError(f"{path}: not a P2 graymap")
    header = lines[1]
    items = dict(
        kv.split("=") for kv in header.split() if "=" in kv
    )
    lo, hi = float(items["min"]), float(items["max"])
    w, h = (int(x) for x in lines[2].split())
    pixels = []
    for row in lines[4:4 + h]:
        pixels.append([int(x) for x in row.split()])
    arr = np.array(pixels, dtype=int)
    if arr.shape != (h, w):
        raise ValueError(f"{path}: raster shape {arr.shape} != declared {(h, w)}")
    return arr, lo, hi


def save_forecast_table(path, table: ForecastTable, t_star: int) -> None:
    with open(path, "w") as fh:
        fh.write(f"# table-format: {TABLE_FORMAT}\n")
        fh.write(f"# channel: {table.channel} from t*={t_star}\n")
        fh.write("station_id,horizon_hour,value\n")
        for sid in sorted(table.rows):
            for h, v in enumerate(table.rows[sid], start=1):
                fh.write(f"{sid},{t_star + h},{float(v)!r}\n")


def save_eval_table(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(f"# table-format: {TABLE_FORMAT}\n")
        fh.write("channel,mape_percent,accuracy_percent,n_pairs,n_excluded\n")
        for row in rows:
            fh.write(f"{row['channel']},{row['mape_percent']!r},"
                     f"{row['accuracy_percent']!r},{row['n_pairs']},"
                     f"{row['n_excluded']}\n")


def save_pairs(path, predictions, truths) -> None:
    """(prediction, truth) dump for scatter plotting by external tools."""
    preds = np.asarray(predictions, dtype=np.float64).reshape(-1)
    tr = np.asarray(truths, dtype=np.float64).reshape(-1)
    if preds.shape != tr.shape:
        raise ValueError("predictions and truths differ in length")
    with open(path, "w") as fh:
        fh.write(f"# table-format: {TABLE_FORMAT}\n")
        fh.write("prediction,truth\n")
        for p, t in zip(preds, tr):
            fh.write(f"{float(p)!r},{float(t)!r}\n")

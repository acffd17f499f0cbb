"""Raster grids: point observations to complete n-channel cubes and patches.

The preprocessing pipeline is

    rasterize (hourly averaging, missing = NaN)
    -> temporal linear interpolation per (channel, cell) series
    -> spatial inverse-distance-squared fill for pollutant and meteorology
       channels (with a leave-own-cell-out pass for the estimation variant)
    -> the two time-label channels appended last.

Traffic and morphology channels are never spatially interpolated: cells
still missing after the temporal stage mean "no road / no building there"
and become zero. Distances are Euclidean center-to-center in cell units.

Cube persistence is a JSON manifest plus a raw little-endian float64 blob
in (t, channel, row, col) order plus a bit-packed imputed mask.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

CUBE_FORMAT = 1

GROUPS = ("pollutant", "meteorology", "traffic", "morphology", "time")

SEASON_VALUES = {"winter": 0.0, "spring": 1.0 / 3.0, "summer": 2.0 / 3.0,
                 "autumn": 1.0}

# channels handed to the model as-is (no z-scoring)
PASSTHROUGH_CHANNEL_NAMES = ("street_canyon",)


def season_of_month(month: int) -> str:
    if month in (12, 1, 2):
        return "winter"
    if month in (3, 4, 5):
        return "spring"
    if month in (6, 7, 8):
        return "summer"
    return "autumn"


def default_calendar(when: datetime) -> tuple[str, bool]:
    """Hour -> (season label, is-workday). Workdays are Monday-Friday."""
    return season_of_month(when.month), when.weekday() < 5


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    cell_size_km: float
    origin: tuple[float, float]  # (lat, lon) of the northwest cell corner

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.cell_size_km <= 0:
            raise ValueError(f"cell_size_km must be positive, got {self.cell_size_km}")

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols


@dataclass(frozen=True)
class Channel:
    name: str
    group: str
    units: str = ""
    static: bool = False

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"channel {self.name!r}: unknown group {self.group!r}")


class ChannelSchema:
    """Ordered channel descriptors. Pollutants come first, the two
    time-label channels (season, workday), when present, come last."""

    def __init__(self, channels: Iterable[Channel]):
        self.channels = tuple(channels)
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names in schema: {names}")
        if not any(c.group == "pollutant" for c in self.channels):
            raise ValueError("schema needs at least one pollutant channel")
        time_idx = [i for i, c in enumerate(self.channels) if c.group == "time"]
        if time_idx:
            if len(time_idx) != 2 or time_idx != [len(self.channels) - 2,
                                                  len(self.channels) - 1]:
                raise ValueError(
                    "exactly two time channels are allowed and they must be last"
                )
        self._index = {c.name: i for i, c in enumerate(self.channels)}

    def __len__(self) -> int:
        return len(self.channels)

    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    def index(self, name: str) -> int:
        if name not in self._index:
            raise ValueError(f"unknown channel {name!r}; schema has {self.names()}")
        return self._index[name]

    def group_of(self, name: str) -> str:
        return self.channels[self.index(name)].group

    def in_group(self, group: str) -> list[str]:
        return [c.name for c in self.channels if c.group == group]

    def has_time_channels(self) -> bool:
        return any(c.group == "time" for c in self.channels)

    def with_time_channels(self) -> "ChannelSchema":
        if self.has_time_channels():
            raise ValueError("schema already has time channels")
        return ChannelSchema(
            self.channels
            + (Channel("season", "time", "fraction"), Channel("workday", "time", "flag"))
        )

    def digest(self) -> str:
        import hashlib
        text = ";".join(
            f"{c.name}|{c.group}|{c.units}|{int(c.static)}" for c in self.channels
        )
        return hashlib.sha256(text.encode()).hexdigest()

    def to_json(self) -> list[dict]:
        return [
            {"name": c.name, "group": c.group, "units": c.units, "static": c.static}
            for c in self.channels
        ]

    @classmethod
    def from_json(cls, items: list[dict]) -> "ChannelSchema":
        return cls(Channel(i["name"], i["group"], i.get("units", ""),
                           bool(i.get("static", False))) for i in items)


@dataclass(frozen=True)
class StationEntry:
    row: int
    col: int
    channels: frozenset[str]


class StationRegistry:
    def __init__(self, entries: dict[str, StationEntry]):
        self.entries = dict(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return sorted(self.entries)

    def cell(self, sid: str) -> tuple[int, int]:
        e = self.entries[sid]
        return e.row, e.col

    def stations_for(self, channel: str) -> list[str]:
        return sorted(s for s, e in self.entries.items() if channel in e.channels)

    def validate_bounds(self, spec: GridSpec) -> None:
        for sid, e in self.entries.items():
            if not spec.contains(e.row, e.col):
                raise ValueError(
                    f"station {sid!r} cell ({e.row},{e.col}) outside "
                    f"{spec.rows}x{spec.cols} grid"
                )


@dataclass
class Observation:
    source_id: str
    time: datetime
    channel: str
    value: float


@dataclass
class Patch:
    """N x N x C window over `window` consecutive hours, centered on a cell."""

    center: tuple[int, int]
    t: int
    window: int
    values: np.ndarray  # [window, C, N, N]
    boundary_padded: bool


class GridCube:
    """Time-ordered stack of n-channel rasters [T, C, H, W]."""

    VARIANTS = ("raw", "estimation", "forecast", "truth")

    def __init__(self, spec: GridSpec, schema: ChannelSchema, start_time: datetime,
                 values: np.ndarray, imputed_mask: Optional[np.ndarray] = None,
                 variant: str = "raw"):
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown cube variant {variant!r}")
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 4 or values.shape[1] != len(schema) or \
                values.shape[2] != spec.rows or values.shape[3] != spec.cols:
            raise ValueError(
                f"values shape {values.shape} inconsistent with schema "
                f"({len(schema)} channels) and grid {spec.rows}x{spec.cols}"
            )
        self.spec = spec
        self.schema = schema
        self.start_time = start_time
        self.values = values
        self.imputed_mask = (
            np.zeros(values.shape, dtype=bool) if imputed_mask is None
            else np.asarray(imputed_mask, dtype=bool)
        )
        if self.imputed_mask.shape != values.shape:
            raise ValueError("imputed_mask shape differs from values")
        self.variant = variant

    @property
    def hours(self) -> int:
        return self.values.shape[0]

    def hour_at(self, t: int) -> datetime:
        return self.start_time + timedelta(hours=int(t))

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.schema.index(name)]

    def copy(self, variant: Optional[str] = None) -> "GridCube":
        return GridCube(self.spec, self.schema, self.start_time,
                        self.values.copy(), self.imputed_mask.copy(),
                        variant or self.variant)

    def missing_count(self) -> int:
        return int(np.isnan(self.values).sum())

    # -- persistence --------------------------------------------------------

    def save(self, base: str | Path) -> None:
        base = Path(base)
        base.parent.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": CUBE_FORMAT,
            "variant": self.variant,
            "start_time": self.start_time.isoformat(),
            "hours": self.hours,
            "spec": {
                "rows": self.spec.rows,
                "cols": self.spec.cols,
                "cell_size_km": self.spec.cell_size_km,
                "origin": list(self.spec.origin),
            },
            "schema": self.schema.to_json(),
        }
        with open(base.with_suffix(".json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(base.with_suffix(".f64"), "wb") as fh:
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        with open(base.with_suffix(".mask"), "wb") as fh:
            fh.write(np.packbits(self.imputed_mask.reshape(-1)).tobytes())

    @classmethod
    def load(cls, base: str | Path) -> "GridCube":
        base = Path(base)
        with open(base.with_suffix(".json")) as fh:
            manifest = json.load(fh)
        if manifest.get("format_version") != CUBE_FORMAT:
            raise ValueError(f"unsupported cube format {manifest.get('format_version')!r}")
        spec = GridSpec(
            manifest["spec"]["rows"], manifest["spec"]["cols"],
            manifest["spec"]["cell_size_km"], tuple(manifest["spec"]["origin"]),
        )
        schema = ChannelSchema.from_json(manifest["schema"])
        shape = (manifest["hours"], len(schema), spec.rows, spec.cols)
        values = np.frombuffer(
            base.with_suffix(".f64").read_bytes(), dtype="<f8"
        ).reshape(shape).astype(np.float64)
        nbits = int(np.prod(shape))
        mask = np.unpackbits(
            np.frombuffer(base.with_suffix(".mask").read_bytes(), dtype=np.uint8),
            count=nbits,
        ).astype(bool).reshape(shape)
        return cls(spec, schema, datetime.fromisoformat(manifest["start_time"]),
                   values, mask, manifest["variant"])


# ---------------------------------------------------------------------------
# observation / registry files
# ---------------------------------------------------------------------------

def save_observations(path: str | Path, observations: Iterable[Observation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for o in observations:
            w.writerow([o.source_id, o.time.isoformat(), o.channel,
                        repr(float(o.value))])


def load_observations(path: str | Path) -> list[Observation]:
    out = []
    with open(path, newline="") as fh:
        for line_no, fields in enumerate(csv.reader(fh), start=1):
            if not fields:
                continue
            if len(fields) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields, got {fields}")
            out.append(Observation(fields[0], datetime.fromisoformat(fields[1]),
                                   fields[2], float(fields[3])))
    return out


def save_registry(path: str | Path, registry: StationRegistry) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for sid in registry.ids():
            e = registry.entries[sid]
            w.writerow([sid, e.row, e.col, ";".join(sorted(e.channels))])


def load_registry(path: str | Path) -> StationRegistry:
    entries = {}
    with open(path, newline="") as fh:
        for line_no, fields in enumerate(csv.reader(fh), start=1):
            if not fields:
                continue
            if len(fields) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields, got {fields}")
            sid = fields[0]
            if sid in entries:
                raise ValueError(f"{path}:{line_no}: duplicate station id {sid!r}")
            chans = frozenset(c for c in fields[3].split(";") if c)
            entries[sid] = StationEntry(int(fields[1]), int(fields[2]), chans)
    return StationRegistry(entries)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _cell_of(source_id: str, registry: StationRegistry,
             spec: GridSpec) -> tuple[int, int]:
    if source_id in registry.entries:
        return registry.cell(source_id)
    if source_id.startswith("cell:"):
        parts = source_id.split(":")
        if len(parts) == 3:
            r, c = int(parts[1]), int(parts[2])
            if not spec.contains(r, c):
                raise ValueError(
                    f"observation source {source_id!r} outside "
                    f"{spec.rows}x{spec.cols} grid"
                )
            return r, c
    raise ValueError(f"observation references unknown source id {source_id!r}")


def rasterize(observations: Iterable[Observation], spec: GridSpec,
              schema: ChannelSchema, registry: StationRegistry,
              start_time: datetime, hours: int) -> GridCube:
    """Place hourly-averaged observations on the grid; missing cells are NaN.

    Sub-hourly readings are averaged into their hour. Static channels are
    averaged over all their observations and replicated across every hour.
    Source ids are station ids or direct cells spelled ``cell:<row>:<col>``
    (used for road segments and morphology rasters).
    """
    if schema.has_time_channels():
        raise ValueError("rasterize expects a schema without time channels")
    registry.validate_bounds(spec)
    c = len(schema)
    sums = np.zeros((hours, c, spec.rows, spec.cols))
    counts = np.zeros((hours, c, spec.rows, spec.cols))
    static_sums = np.zeros((c, spec.rows, spec.cols))
    static_counts = np.zeros((c, spec.rows, spec.cols))
    static_flags = [ch.static for ch in schema.channels]

    for o in observations:
        ci = schema.index(o.channel)
        r, col = _cell_of(o.source_id, registry, spec)
        if static_flags[ci]:
            static_sums[ci, r, col] += o.value
            static_counts[ci, r, col] += 1
            continue
        t = int((o.time - start_time).total_seconds() // 3600)
        if not (0 <= t < hours):
            raise ValueError(
                f"observation at {o.time.isoformat()} outside the cube period "
                f"({start_time.isoformat()} + {hours}h) for source {o.source_id!r}"
            )
        sums[t, ci, r, col] += o.value
        counts[t, ci, r, col] += 1

    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        static_vals = np.where(
            static_counts > 0, static_sums / np.maximum(static_counts, 1), np.nan
        )
    for ci, is_static in enumerate(static_flags):
        if is_static:
            values[:, ci] = static_vals[ci][None]
    return GridCube(spec, schema, start_time, values, variant="raw")


# ---------------------------------------------------------------------------
# temporal stage
# ---------------------------------------------------------------------------

def temporal_interpolate(cube: GridCube) -> GridCube:
    """Fill interior gaps linearly per (channel, cell) series; extend the
    nearest value over leading/trailing gaps. Series with zero observations
    stay missing for the spatial stage."""
    out = cube.copy()
    t_axis = np.arange(cube.hours, dtype=np.float64)
    for ci in range(len(cube.schema)):
        plane = out.values[:, ci].reshape(cube.hours, -1)
        mask = out.imputed_mask[:, ci].reshape(cube.hours, -1)
        missing = np.isnan(plane)
        fillable = missing.any(axis=0) & ~missing.all(axis=0)
        for cell in np.nonzero(fillable)[0]:
            series = plane[:, cell]
            known = ~np.isnan(series)
            filled = np.interp(t_axis, t_axis[known], series[known])
            plane[:, cell] = filled
            mask[:, cell] |= ~known
    return out


# ---------------------------------------------------------------------------
# spatial stage
# ---------------------------------------------------------------------------

def _source_and_target_cells(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """plane [T, H, W] -> (complete cells mask [H,W], empty cells mask).

    After the temporal stage every series is complete or fully missing;
    anything in between means the stages ran out of order.
    """
    missing = np.isnan(plane)
    complete = ~missing.any(axis=0)
    empty = missing.all(axis=0)
    partial = ~(complete | empty)
    if partial.any():
        raise ValueError(
            "spatial fill found a partially observed series; run the "
            "temporal stage first"
        )
    return complete, empty


def _idw_weights(targets: np.ndarray, sources: np.ndarray,
                 power: int) -> tuple[np.ndarray, np.ndarray]:
    """targets [M,2], sources [K,2] -> (weights [M,K], exact-hit index [M]).

    A target coincident with a source (distance 0) copies that source:
    the hit index is >= 0 there and the weight row is unused.
    """
    d2 = ((targets[:, None, :] - sources[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(d2.astype(np.float64))
    hit = np.full(len(targets), -1, dtype=int)
    zero_rows, zero_cols = np.nonzero(dist == 0.0)
    hit[zero_rows] = zero_cols
    with np.errstate(divide="ignore"):
        w = 1.0 / np.where(dist == 0.0, np.inf, dist) ** power
    return w, hit


def spatial_idw(cube: GridCube, registry: StationRegistry, power: int = 2,
                exclude_cell_per_channel: Optional[dict] = None) -> GridCube:
    """Inverse-distance-power fill of pollutant and meteorology channels.

    Traffic and morphology channels get zero where still missing. The
    optional `exclude_cell_per_channel` mapping is used by tests to rebuild
    a channel without one source cell.
    """
    out = cube.copy()
    for ci, ch in enumerate(cube.schema.channels):
        plane = out.values[:, ci]
        missing = np.isnan(plane)
        if not missing.any():
            continue
        if ch.group in ("traffic", "morphology"):
            out.imputed_mask[:, ci] |= missing
            plane[missing] = 0.0
            continue
        if ch.group == "time":
            continue
        complete, empty = _source_and_target_cells(plane)
        excluded = None
        if exclude_cell_per_channel and ch.name in exclude_cell_per_channel:
            excluded = exclude_cell_per_channel[ch.name]
            if complete[excluded]:
                complete = complete.copy()
                complete[excluded] = False
                empty = empty.copy()
                empty[excluded] = True
        if not complete.any():
            raise ValueError(
                f"channel {ch.name!r} has no source cells at hour 0; "
                "cannot interpolate spatially"
            )
        if not empty.any():
            continue
        src_rc = np.argwhere(complete)
        tgt_rc = np.argwhere(empty)
        weights, hits = _idw_weights(tgt_rc, src_rc, power)
        src_vals = plane[:, src_rc[:, 0], src_rc[:, 1]]  # [T, K]
        wsum = weights.sum(axis=1)
        filled = src_vals @ (weights / wsum[:, None]).T  # [T, M]
        exact = hits >= 0
        if exact.any():
            filled[:, exact] = src_vals[:, hits[exact]]
        plane[:, tgt_rc[:, 0], tgt_rc[:, 1]] = filled
        out.imputed_mask[:, ci, tgt_rc[:, 0], tgt_rc[:, 1]] = True
    return out


# ---------------------------------------------------------------------------
# estimation-variant masking
# ---------------------------------------------------------------------------

class MaskedObservations:
    """Pollutant readings held out per station, for the estimation variant.

    `held[(station, channel, hour_datetime)]` is the hourly-averaged
    withheld reading (the ground truth the estimation model trains on).
    """

    def __init__(self, observations: list[Observation], registry: StationRegistry,
                 schema: ChannelSchema):
        self.observations = list(observations)
        self.registry = registry
        pollutants = set(schema.in_group("pollutant"))
        self.pollutants = pollutants
        for ch in sorted(pollutants):
            if len(registry.stations_for(ch)) < 2:
                raise ValueError(
                    f"pollutant {ch!r} has fewer than 2 reporting stations; "
                    "cross-station reconstruction is impossible"
                )
        sums: dict = {}
        counts: dict = {}
        for o in self.observations:
            if o.channel in pollutants and o.source_id in registry.entries:
                key = (o.source_id, o.channel,
                       o.time.replace(minute=0, second=0, microsecond=0))
                sums[key] = sums.get(key, 0.0) + o.value
                counts[key] = counts.get(key, 0) + 1
        self.held = {k: sums[k] / counts[k] for k in sums}

    def without_station(self, sid: str) -> list[Observation]:
        """All observations minus the pollutant readings of one station."""
        return [
            o for o in self.observations
            if not (o.source_id == sid and o.channel in self.pollutants)
        ]


def mask_local_station(observations: list[Observation],
                       registry: StationRegistry,
                       schema: ChannelSchema) -> MaskedObservations:
    return MaskedObservations(observations, registry, schema)


def _leave_out_fill(tcube: GridCube, registry: StationRegistry,
                    power: int = 2) -> GridCube:
    """Estimation-variant spatial fill: every pollutant source cell is
    reconstructed from the other source cells (own readings removed)."""
    est = spatial_idw(tcube, registry, power)
    for ci, ch in enumerate(tcube.schema.channels):
        if ch.group != "pollutant":
            continue
        plane = tcube.values[:, ci]
        complete, _ = _source_and_target_cells(plane)
        src_rc = np.argwhere(complete)
        if len(src_rc) == 0:
            raise ValueError(f"channel {ch.name!r} has no source cells at hour 0")
        src_vals = plane[:, src_rc[:, 0], src_rc[:, 1]]  # [T, K]
        for k, (r, c) in enumerate(src_rc):
            others = np.arange(len(src_rc)) != k
            if not others.any():
                raise ValueError(
                    f"pollutant {ch.name!r}: cell ({r},{c}) is the only source; "
                    "cannot reconstruct it from other stations"
                )
            w, hits = _idw_weights(src_rc[k:k + 1], src_rc[others], power)
            if hits[0] >= 0:
                rec = src_vals[:, np.nonzero(others)[0][hits[0]]]
            else:
                rec = src_vals[:, others] @ (w[0] / w[0].sum())
            est.values[:, ci, r, c] = rec
            est.imputed_mask[:, ci, r, c] = True
    return est


# ---------------------------------------------------------------------------
# time channels
# ---------------------------------------------------------------------------

def append_time_channels(cube: GridCube,
                         calendar: Callable[[datetime], tuple[str, bool]] = None
                         ) -> GridCube:
    """Add the season and workday constant-field channels (always last).

    Season is encoded {0, 1/3, 2/3, 1} for winter/spring/summer/autumn and
    workday as {0, 1}; one channel each keeps the channel count at
    "observed channels + 2".
    """
    calendar = calendar or default_calendar
    schema = cube.schema.with_time_channels()
    t, c, h, w = cube.values.shape
    values = np.empty((t, c + 2, h, w))
    values[:, :c] = cube.values
    for ti in range(t):
        season, workday = calendar(cube.hour_at(ti))
        if season not in SEASON_VALUES:
            raise ValueError(f"calendar returned unknown season {season!r}")
        values[ti, c] = SEASON_VALUES[season]
        values[ti, c + 1] = 1.0 if workday else 0.0
    mask = np.zeros(values.shape, dtype=bool)
    mask[:, :c] = cube.imputed_mask
    return GridCube(cube.spec, schema, cube.start_time, values, mask, cube.variant)


# ---------------------------------------------------------------------------
# full preprocessing
# ---------------------------------------------------------------------------

def build_cubes(observations: list[Observation], spec: GridSpec,
                schema: ChannelSchema, registry: StationRegistry,
                start_time: datetime, hours: int,
                calendar: Callable = None, power: int = 2):
    """Observations -> (estimation cube, forecast cube, held station truths).

    Returns held truths keyed by (station_id, channel, hour_index) in
    physical units; both cubes are complete (no missing values) and carry
    the two time channels.
    """
    masked = mask_local_station(observations, registry, schema)
    raw = rasterize(observations, spec, schema, registry, start_time, hours)
    tcube = temporal_interpolate(raw)
    forecast = spatial_idw(tcube, registry, power)
    forecast.variant = "forecast"
    estimation = _leave_out_fill(tcube, registry, power)
    estimation.variant = "estimation"
    forecast = append_time_channels(forecast, calendar)
    estimation = append_time_channels(estimation, calendar)
    held = {}
    for (sid, ch, when), value in masked.held.items():
        t = int((when - start_time).total_seconds() // 3600)
        if 0 <= t < hours:
            held[(sid, ch, t)] = value
    return estimation, forecast, held


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def extract_patch(cube: GridCube, center: tuple[int, int], n: int, t: int,
                  window: int) -> Patch:
    """N x N patch sequence ending at hour t (frames t-window+1 .. t).

    Cells beyond the grid edge are filled by edge replication and the
    patch is flagged boundary_padded.
    """
    if n % 2 != 1 or n < 1:
        raise ValueError(f"patch size must be odd and positive, got {n}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if t < window - 1:
        raise ValueError(
            f"insufficient history: t={t} needs at least {window - 1} prior hours"
        )
    if t >= cube.hours:
        raise ValueError(f"t={t} beyond cube length {cube.hours}")
    r, c = center
    if not cube.spec.contains(r, c):
        raise ValueError(f"patch center ({r},{c}) outside grid")
    half = n // 2
    rows = np.clip(np.arange(r - half, r + half + 1), 0, cube.spec.rows - 1)
    cols = np.clip(np.arange(c - half, c + half + 1), 0, cube.spec.cols - 1)
    padded = (r - half < 0 or r + half >= cube.spec.rows
              or c - half < 0 or c + half >= cube.spec.cols)
    frames = cube.values[t - window + 1: t + 1]
    values = frames[:, :, rows[:, None], cols[None, :]].copy()
    return Patch((r, c), t, window, values, padded)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def passthrough_channels(schema: ChannelSchema) -> set[str]:
    out = set(schema.in_group("time"))
    out.update(n for n in PASSTHROUGH_CHANNEL_NAMES if n in schema.names())
    return out


def fit_normalization(cube: GridCube, hours: Iterable[int]) -> dict:
    """Per-channel mean/std over the given (training) hours."""
    idx = np.asarray(sorted(set(int(h) for h in hours)), dtype=int)
    if idx.size == 0:
        raise ValueError("fit_normalization needs at least one hour")
    stats = {}
    for ci, ch in enumerate(cube.schema.channels):
        sel = cube.values[idx, ci]
        stats[ch.name] = (float(sel.mean()), float(sel.std()))
    return stats


def normalize(cube: GridCube, stats: dict) -> GridCube:
    """Z-score all channels except time labels and the street-canyon flag.

    A standard deviation below 1e-9 is treated as 1 (constant channels map
    to zero).
    """
    if set(stats) != set(cube.schema.names()):
        raise ValueError(
            f"normalization stats channels {sorted(stats)} do not match "
            f"schema {cube.schema.names()}"
        )
    skip = passthrough_channels(cube.schema)
    out = cube.copy()
    for ci, ch in enumerate(cube.schema.channels):
        if ch.name in skip:
            continue
        mean, std = stats[ch.name]
        if std < 1e-9:
            std = 1.0
        out.values[:, ci] = (out.values[:, ci] - mean) / std
    return out


def denormalize_value(stats: dict, channel: str, value):
    mean, std = stats[channel]
    if std < 1e-9:
        std = 1.0
    return value * std + mean


def normalize_value(stats: dict, channel: str, value):
    mean, std = stats[channel]
    if std < 1e-9:
        std = 1.0
    return (value - mean) / std

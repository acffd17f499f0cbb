"""Deterministic synthetic city: pollution dynamics with planted structure.

The pollutant field follows

    p(t+1) = (1 - decay) * shift(p(t), wind(t))
             + emission * traffic(t) * (1 + amplification * canyon)
             + gaussian noise,

where traffic has a two-peak diurnal cycle scaled by a static road-density
field, wind direction performs a slow walk over the eight compass points,
and the street-canyon flag is planted on a seeded subset of cells.
Everything is a pure function of the config, so a seed reproduces the city
bit for bit.

Two planted oracle datasets live here as well: a cross-channel interaction
target (patch mean of a product of two zero-mean fields, invisible to any
channelwise-only predictor) and a linear target with known per-channel
coefficients (a ground truth for gradient attribution).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

import numpy as np

from .grid import (
    Channel,
    ChannelSchema,
    GridCube,
    GridSpec,
    Observation,
    StationEntry,
    StationRegistry,
    append_time_channels,
)
from .rng import Rng

# compass order indexed by angle/45deg: E=0deg, going counter-clockwise
DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
# (row, col) offsets; rows grow southward
DIRECTION_OFFSETS = {
    "E": (0, 1), "NE": (-1, 1), "N": (-1, 0), "NW": (-1, -1),
    "W": (0, -1), "SW": (1, -1), "S": (1, 0), "SE": (1, 1),
}


def wind_direction_value(name: str) -> float:
    """Single-channel encoding angle/2pi in {0, 0.125, ..., 0.875}."""
    return DIRECTIONS.index(name) / 8.0


@dataclass
class SynthConfig:
    rows: int = 12
    cols: int = 12
    hours: int = 400
    n_stations: int = 8
    start_time: datetime = field(default_factory=lambda: datetime(2021, 1, 1))
    emission_rate: float = 3.0
    canyon_amplification: float = 1.0
    decay: float = 0.08
    advection_cells_per_hour: int = 1
    noise_std: float = 0.3
    missing_rate: float = 0.15
    background: float = 25.0
    boundary: str = "inflow"  # "toroidal" only for conservation tests
    seed: int = 0

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.hours < 1:
            raise ValueError(f"hours must be >= 1, got {self.hours}")
        if self.n_stations < 1 or self.n_stations > self.rows * self.cols:
            raise ValueError(f"n_stations out of range: {self.n_stations}")
        for name in ("emission_rate", "canyon_amplification", "noise_std",
                     "background"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0.0 <= self.decay < 1.0):
            raise ValueError(f"decay must lie in [0,1), got {self.decay}")
        if abs(self.advection_cells_per_hour) >= min(self.rows, self.cols) / 4:
            raise ValueError(
                f"advection_cells_per_hour must stay below "
                f"{min(self.rows, self.cols) / 4:g} for this grid, got "
                f"{self.advection_cells_per_hour}"
            )
        if not (0.0 <= self.missing_rate < 1.0):
            raise ValueError(f"missing_rate must lie in [0,1), got {self.missing_rate}")
        if self.boundary not in ("inflow", "toroidal"):
            raise ValueError(f"boundary must be 'inflow' or 'toroidal', got {self.boundary!r}")


def shift_field(p: np.ndarray, offset: tuple[int, int], boundary: str,
                background: float) -> np.ndarray:
    """Move the field by (dy, dx) cells; vacated edges take the background
    value in inflow mode, wrap around in toroidal mode."""
    dy, dx = offset
    out = np.roll(p, (dy, dx), axis=(0, 1))
    if boundary == "toroidal":
        return out
    if dy > 0:
        out[:dy, :] = background
    elif dy < 0:
        out[dy:, :] = background
    if dx > 0:
        out[:, :dx] = background
    elif dx < 0:
        out[:, dx:] = background
    return out


def step_field(p: np.ndarray, traffic_frame: np.ndarray, offset: tuple[int, int],
               *, decay: float, emission: float, amplification: float,
               canyon: np.ndarray, boundary: str = "inflow",
               background: float = 0.0,
               noise: Optional[np.ndarray] = None) -> np.ndarray:
    """One hour of pollutant dynamics."""
    moved = shift_field(p, offset, boundary, background)
    out = (1.0 - decay) * moved + emission * traffic_frame * (
        1.0 + amplification * canyon
    )
    if noise is not None:
        out = out + noise
    return np.maximum(out, 0.0)


def diurnal_profile(hour_of_day: np.ndarray) -> np.ndarray:
    """Two-peak traffic cycle (morning and evening rush)."""
    h = np.asarray(hour_of_day, dtype=np.float64)
    return (0.2 + np.exp(-((h - 8.0) ** 2) / 8.0)
            + np.exp(-((h - 18.0) ** 2) / 8.0))


def _smooth(plane: np.ndarray) -> np.ndarray:
    """3x3 box smoothing with edge replication."""
    padded = np.pad(plane, 1, mode="edge")
    out = np.zeros_like(plane)
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + plane.shape[0], dj:dj + plane.shape[1]]
    return out / 9.0


def synth_schema() -> ChannelSchema:
    return ChannelSchema([
        Channel("pm25", "pollutant", "ug/m3"),
        Channel("wind_dir", "meteorology", "angle_frac"),
        Channel("wind_speed", "meteorology", "km/h"),
        Channel("temperature", "meteorology", "C"),
        Channel("congestion", "traffic", "level"),
        Channel("road_density", "morphology", "segments", static=True),
        Channel("building_density", "morphology", "count", static=True),
        Channel("building_height", "morphology", "m", static=True),
        Channel("street_canyon", "morphology", "flag", static=True),
    ])


def _place_stations(rng: Rng, rows: int, cols: int, count: int,
                    channels: frozenset) -> StationRegistry:
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    rng.shuffle(cells)
    entries = {}
    for i in range(count):
        r, c = cells[i]
        entries[f"st{i + 1:02d}"] = StationEntry(r, c, channels)
    return StationRegistry(entries)


def generate(config: SynthConfig):
    """Build the city. Returns (truth cube, registry, observations).

    The truth cube holds every channel at every cell (variant "truth",
    no time channels); observations sample it the way real feeds would:
    station readings with missing-at-random gaps, traffic on road cells,
    morphology everywhere.
    """
    config.validate()
    schema = synth_schema()
    rng = Rng(config.seed)
    morph_rng = rng.child("morph")
    wind_rng = rng.child("wind")
    met_rng = rng.child("met")
    noise_rng = rng.child("noise")
    miss_rng = rng.child("missing")

    rows, cols, hours = config.rows, config.cols, config.hours
    road = _smooth(morph_rng.uniform(0.0, 1.0, (rows, cols)))
    bdens = _smooth(morph_rng.uniform(0.0, 1.0, (rows, cols)))
    bheight = 10.0 + 40.0 * _smooth(morph_rng.uniform(0.0, 1.0, (rows, cols)))
    canyon = (morph_rng.uniform(0.0, 1.0, (rows, cols)) < 0.2).astype(np.float64)

    # wind: slow walk over the compass ring
    dir_idx = np.empty(hours, dtype=int)
    dir_idx[0] = int(wind_rng.integers(0, 8))
    for t in range(1, hours):
        u = wind_rng.uniform(0.0, 1.0)
        stepd = -1 if u < 0.2 else (1 if u > 0.8 else 0)
        dir_idx[t] = (dir_idx[t - 1] + stepd) % 8

    temp = np.empty(hours)
    temp[0] = 20.0
    wspeed = np.empty(hours)
    wspeed[0] = 10.0
    for t in range(1, hours):
        temp[t] = temp[t - 1] + met_rng.normal(0.0, 0.3)
        wspeed[t] = min(max(wspeed[t - 1] + met_rng.normal(0.0, 0.5), 0.0), 30.0)

    hour_of_day = np.array([
        (config.start_time.hour + t) % 24 for t in range(hours)
    ])
    diurnal = diurnal_profile(hour_of_day)

    values = np.empty((hours, len(schema), rows, cols))
    ci = {name: schema.index(name) for name in schema.names()}
    values[:, ci["road_density"]] = road[None]
    values[:, ci["building_density"]] = bdens[None]
    values[:, ci["building_height"]] = bheight[None]
    values[:, ci["street_canyon"]] = canyon[None]
    values[:, ci["temperature"]] = temp[:, None, None]
    values[:, ci["wind_speed"]] = wspeed[:, None, None]
    values[:, ci["wind_dir"]] = (dir_idx / 8.0)[:, None, None]

    p = np.full((rows, cols), config.background)
    adv = config.advection_cells_per_hour
    for t in range(hours):
        traffic_frame = road * diurnal[t]
        values[t, ci["congestion"]] = traffic_frame
        values[t, ci["pm25"]] = p
        name = DIRECTIONS[dir_idx[t]]
        dy, dx = DIRECTION_OFFSETS[name]
        offset = (dy * adv, dx * adv)
        noise = (noise_rng.normal(0.0, config.noise_std, (rows, cols))
                 if config.noise_std > 0 else None)
        p = step_field(
            p, traffic_frame, offset,
            decay=config.decay, emission=config.emission_rate,
            amplification=config.canyon_amplification, canyon=canyon,
            boundary=config.boundary, background=config.background,
            noise=noise,
        )

    spec = GridSpec(rows, cols, 1.0, (0.0, 0.0))
    truth = GridCube(spec, schema, config.start_time, values, variant="truth")
    station_channels = frozenset({"pm25", "wind_dir", "wind_speed", "temperature"})
    registry = _place_stations(rng.child("stations"), rows, cols,
                               config.n_stations, station_channels)

    observations: list[Observation] = []
    for sid in registry.ids():
        r, c = registry.cell(sid)
        for t in range(hours):
            when = truth.hour_at(t)
            for ch in ("pm25", "wind_dir", "wind_speed", "temperature"):
                if miss_rng.uniform(0.0, 1.0) >= config.missing_rate:
                    observations.append(
                        Observation(sid, when, ch, float(values[t, ci[ch], r, c]))
                    )
    road_cells = [(r, c) for r in range(rows) for c in range(cols)
                  if road[r, c] > 0.35]
    for t in range(hours):
        when = truth.hour_at(t)
        for r, c in road_cells:
            observations.append(
                Observation(f"cell:{r}:{c}", when, "congestion",
                            float(values[t, ci["congestion"], r, c]))
            )
    when0 = truth.hour_at(0)
    for r in range(rows):
        for c in range(cols):
            for ch in ("road_density", "building_density", "building_height",
                       "street_canyon"):
                observations.append(
                    Observation(f"cell:{r}:{c}", when0, ch,
                                float(values[0, ci[ch], r, c]))
                )
    return truth, registry, observations


# ---------------------------------------------------------------------------
# planted oracle datasets
# ---------------------------------------------------------------------------

@dataclass
class PlantedDataset:
    cube: GridCube          # complete, time channels appended
    registry: StationRegistry
    targets: dict           # (station_id, t) -> float, one target per hour
    patch_size: int


def _patch_mean(plane: np.ndarray, r: int, c: int, n: int) -> float:
    """Mean over an n x n window with edge replication (matches patches)."""
    half = n // 2
    rows = np.clip(np.arange(r - half, r + half + 1), 0, plane.shape[0] - 1)
    cols = np.clip(np.arange(c - half, c + half + 1), 0, plane.shape[1] - 1)
    return float(plane[rows[:, None], cols[None, :]].mean())


def _random_fields(rng: Rng, hours: int, rows: int, cols: int) -> np.ndarray:
    """Smooth zero-mean unit-scale field sequence [T, H, W]."""
    out = np.empty((hours, rows, cols))
    for t in range(hours):
        out[t] = _smooth(rng.normal(0.0, 1.0, (rows, cols)))
    out -= out.mean()
    out /= out.std()
    return out


def _planted_cube(config: SynthConfig, field_stack: np.ndarray,
                  groups: list[str]) -> GridCube:
    channels = []
    for i, group in enumerate(groups):
        channels.append(Channel(f"field_{chr(ord('a') + i)}", group))
    schema = ChannelSchema(channels)
    spec = GridSpec(config.rows, config.cols, 1.0, (0.0, 0.0))
    cube = GridCube(spec, schema, config.start_time,
                    np.swapaxes(field_stack, 0, 1).copy(), variant="forecast")
    return append_time_channels(cube)


def planted_interaction_dataset(config: SynthConfig) -> PlantedDataset:
    """Target = patch mean of field_a * field_b at the final frame.

    Both fields are zero-mean, so any model blind to cross-channel
    interaction sees pure noise.
    """
    config.validate()
    rng = Rng(config.seed)
    a = _random_fields(rng.child("field_a"), config.hours, config.rows, config.cols)
    b = _random_fields(rng.child("field_b"), config.hours, config.rows, config.cols)
    cube = _planted_cube(config, np.stack([a, b]), ["pollutant", "meteorology"])
    registry = _place_stations(rng.child("stations"), config.rows, config.cols,
                               config.n_stations, frozenset({"field_a"}))
    n = 9
    noise_rng = rng.child("target_noise")
    targets = {}
    for sid in registry.ids():
        r, c = registry.cell(sid)
        for t in range(config.hours):
            val = _patch_mean(a[t] * b[t], r, c, n)
            if config.noise_std > 0:
                val += float(noise_rng.normal(0.0, config.noise_std))
            targets[(sid, t)] = val
    return PlantedDataset(cube, registry, targets, n)


def planted_linear_dataset(config: SynthConfig, coefficients,
                           patch_size: int = 5) -> PlantedDataset:
    """Target = sum_c coeff_c * patch-mean(channel c) at the final frame."""
    config.validate()
    coefficients = [float(c) for c in coefficients]
    rng = Rng(config.seed)
    fields = np.stack([
        _random_fields(rng.child(f"field_{i}"), config.hours, config.rows,
                       config.cols)
        for i in range(len(coefficients))
    ])
    group_cycle = ["pollutant", "meteorology", "traffic"]
    groups = [group_cycle[i % 3] for i in range(len(coefficients))]
    cube = _planted_cube(config, fields, groups)
    registry = _place_stations(rng.child("stations"), config.rows, config.cols,
                               config.n_stations, frozenset({"field_a"}))
    noise_rng = rng.child("target_noise")
    targets = {}
    for sid in registry.ids():
        r, c = registry.cell(sid)
        for t in range(config.hours):
            val = sum(
                coeff * _patch_mean(fields[i, t], r, c, patch_size)
                for i, coeff in enumerate(coefficients)
            )
            if config.noise_std > 0:
                val += float(noise_rng.normal(0.0, config.noise_std))
            targets[(sid, t)] = val
    return PlantedDataset(cube, registry, targets, patch_size)

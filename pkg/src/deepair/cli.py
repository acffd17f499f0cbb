"""Command-line pipeline driver.

One YAML config file carries a section per subcommand plus a global seed;
every run copies its resolved section into the output directory as an
audit trail. Commands:

    synth          generate the synthetic city (observations, registry, truth cube)
    preprocess     observations -> estimation/forecast cubes + held truths
    train          fit a model (estimate or forecast task, optional grid search)
    evaluate       test-split MAPE table and (prediction, truth) pairs
    estimate-map   city-wide map at one hour (CSV + PGM raster)
    forecast       per-station L-hour forecasts at one hour
    saliency       per-channel input-gradient scores over the training split
    seasonal-maps  per-season mean rasters over a range of hours

Exit codes: 0 success, 2 configuration/validation error, 3 runtime
numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import yaml

from . import FORMAT_VERSIONS, __version__
from .grid import (
    Channel,
    ChannelSchema,
    GridCube,
    build_cubes,
    load_observations,
    load_registry,
    normalize,
    save_observations,
    save_registry,
)
from .inference import (
    estimate_city,
    forecast_stations,
    mape,
    per_pollutant_eval,
    save_estimation_map_csv,
    save_eval_table,
    save_forecast_table,
    save_pairs,
    save_raster_pgm,
    seasonal_mean_maps,
)
from .model import AirResConfig, LstmConfig, load_checkpoint, save_checkpoint
from .rng import Rng
from .saliency import saliency_scores, save_saliency
from .synthcity import SynthConfig, generate
from .training import (
    NonFiniteLossError,
    TrainConfig,
    hyperparam_search,
    evaluate_pairs,
    load_split,
    prepare_station_samples,
    save_split,
    train_estimation,
    train_forecast,
)


class ConfigError(ValueError):
    pass


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(p) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"config root must be a mapping, got {type(cfg).__name__}")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg or not isinstance(cfg[name], dict):
        raise ConfigError(f"config section {name!r} is missing")
    return cfg[name]


def _out_dir(cfg: dict, args) -> Path:
    out = args.out or cfg.get("output_dir")
    if not out:
        raise ConfigError("no output directory: set output_dir in the config "
                          "or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(out: Path, command: str, section: dict, seed: int) -> None:
    resolved = {"command": command, "seed": seed, command.replace("-", "_"): section}
    with open(out / f"resolved_{command.replace('-', '_')}.yaml", "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)


def _seed(cfg: dict, section: dict) -> int:
    seed = section.get("seed", cfg.get("seed"))
    if seed is None:
        raise ConfigError("no seed: set a top-level seed or one in the section")
    return int(seed)


def _parse_time(value) -> datetime:
    if isinstance(value, datetime):
        return value
    return datetime.fromisoformat(str(value))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    section = dict(_section(cfg, "synth"))
    seed = _seed(cfg, section)
    section["seed"] = seed
    out = _out_dir(cfg, args)
    if "start_time" in section:
        section["start_time"] = _parse_time(section["start_time"])
    try:
        config = SynthConfig(**section)
        config.validate()
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    truth, registry, observations = generate(config)
    save_observations(out / "observations.csv", observations)
    save_registry(out / "registry.csv", registry)
    truth.save(out / "truth")
    _write_resolved(out, "synth", _yamlable(section), seed)
    print(f"synth: {len(observations)} observations, {len(registry)} stations, "
          f"{truth.hours}h truth cube -> {out}")
    return 0


def _yamlable(section: dict) -> dict:
    out = {}
    for k, v in section.items():
        out[k] = v.isoformat() if isinstance(v, datetime) else v
    return out


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def _schema_from_config(section: dict) -> ChannelSchema:
    if "channels" not in section:
        from .synthcity import synth_schema
        return synth_schema()
    channels = []
    for item in section["channels"]:
        channels.append(Channel(item["name"], item["group"],
                                item.get("units", ""),
                                bool(item.get("static", False))))
    return ChannelSchema(channels)


def cmd_preprocess(cfg: dict, args) -> int:
    section = _section(cfg, "preprocess")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    data_dir = Path(section.get("data_dir", out))
    observations = load_observations(data_dir / "observations.csv")
    registry = load_registry(data_dir / "registry.csv")
    schema = _schema_from_config(section)
    truth_base = data_dir / "truth"
    if truth_base.with_suffix(".json").exists():
        truth = GridCube.load(truth_base)
        spec = truth.spec
        start_time = truth.start_time
        hours = truth.hours
    else:
        from .grid import GridSpec
        spec = GridSpec(int(section["rows"]), int(section["cols"]),
                        float(section.get("cell_size_km", 1.0)),
                        tuple(section.get("origin", (0.0, 0.0))))
        start_time = _parse_time(section["start_time"])
        hours = int(section["hours"])
    est, fc, held = build_cubes(observations, spec, schema, registry,
                                start_time, hours)
    est.save(out / "cube_estimation")
    fc.save(out / "cube_forecast")
    with open(out / "held.csv", "w") as fh:
        for (sid, channel, t), value in sorted(held.items()):
            fh.write(f"{sid},{channel},{t},{value!r}\n")
    _write_resolved(out, "preprocess", _yamlable(dict(section)), seed)
    print(f"preprocess: estimation+forecast cubes ({est.hours}h, "
          f"{len(est.schema)} channels), {len(held)} held readings -> {out}")
    return 0


def load_held(path) -> dict:
    held = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, channel, t, value = line.split(",")
            held[(sid, channel, int(t))] = float(value)
    return held


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_configs(section: dict, seed: int):
    train_cfg = TrainConfig(
        patch_size=int(section.get("patch_size", 15)),
        window=int(section.get("window", 48)),
        horizon=int(section.get("horizon", 0)),
        learning_rate=float(section.get("learning_rate", 1e-4)),
        lr_scale=float(section.get("lr_scale", 1.0)),
        patience_epochs=int(section.get("patience_epochs", 5)),
        batch_size=int(section.get("batch_size", 16)),
        max_epochs=int(section.get("max_epochs", 200)),
        max_steps=(int(section["max_steps"]) if section.get("max_steps")
                   else None),
        seed=seed,
    )
    train_cfg.validate()
    airres = AirResConfig(
        num_units=int(section.get("num_units", 4)),
        feature_width=int(section.get("feature_width", 64)),
        use_1x1=bool(section.get("use_1x1", True)),
    )
    airres.validate()
    return train_cfg, airres


def cmd_train(cfg: dict, args) -> int:
    section = _section(cfg, "train")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    data_dir = Path(section.get("data_dir", out))
    task = section.get("task", "estimate")
    if task not in ("estimate", "forecast"):
        raise ConfigError(f"train.task must be 'estimate' or 'forecast', got {task!r}")
    kind = section.get("model", "deepair")
    if kind not in ("deepair", "lstm_baseline"):
        raise ConfigError(f"train.model must be 'deepair' or 'lstm_baseline', "
                          f"got {kind!r}")
    target = section.get("target_channel", "pm25")
    train_cfg, airres = _train_configs(section, seed)
    cube_base = data_dir / ("cube_estimation" if task == "estimate"
                            else "cube_forecast")
    cube = GridCube.load(cube_base)
    registry = load_registry(data_dir / "registry.csv")
    held = load_held(data_dir / "held.csv")

    input_size = (airres.feature_width if kind == "deepair" else len(cube.schema))
    lstm = LstmConfig(int(section.get("lstm_layers", 1)),
                      int(section.get("hidden_size", 128)), input_size)
    lstm.validate()

    if section.get("grid_search"):
        grid = [tuple(cell) for cell in section["grid_search"]]
        samples, split = prepare_station_samples(cube, registry, held, target,
                                                 train_cfg)
        variant = "estimation" if task == "estimate" else "forecast"
        best, results = hyperparam_search(samples, split, train_cfg,
                                          len(cube.schema), airres, variant,
                                          grid=grid, kind=kind)
        with open(out / "grid_results.csv", "w") as fh:
            fh.write("num_layers,hidden_size,val_error,n_params\n")
            for row in results:
                fh.write(f"{row['num_layers']},{row['hidden_size']},"
                         f"{row['val_error']!r},{row['n_params']}\n")
        model, report = best["model"], best["report"]
    else:
        runner = train_estimation if task == "estimate" else train_forecast
        result = runner(cube, registry, held, target, train_cfg, airres, lstm,
                        kind=kind)
        model, report, split, samples = (result.model, result.report,
                                         result.split, result.samples)

    save_checkpoint(
        model, out / "checkpoint",
        schema_hash=cube.schema.digest(),
        normalization=samples.stats,
        seed=seed,
        target_channel=target,
        extra={
            "patch_size": train_cfg.patch_size,
            "task": task,
            "use_1x1": airres.use_1x1 if kind == "deepair" else None,
            "lr_scale": train_cfg.lr_scale,
        },
    )
    report.save(out / "report.txt")
    save_split(out / "split.csv", split)
    _write_resolved(out, "train", _yamlable(dict(section)), seed)
    print(f"train[{task}/{kind}]: best epoch {report.best_epoch} "
          f"(val {report.best_val:.3f}) after {report.stop_epoch} epochs -> {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluation and prediction commands
# ---------------------------------------------------------------------------

def _load_run(section: dict, out: Path):
    """Checkpoint + matching cube/registry/held from a finished train run."""
    run_dir = Path(section.get("run_dir", out))
    data_dir = Path(section.get("data_dir", run_dir))
    model, manifest = load_checkpoint(run_dir / "checkpoint")
    task = manifest["extra"]["task"]
    cube_base = data_dir / ("cube_estimation" if task == "estimate"
                            else "cube_forecast")
    cube = GridCube.load(cube_base)
    if cube.schema.digest() != manifest["schema_hash"]:
        raise ConfigError(
            "checkpoint was trained on a different channel schema than the cube"
        )
    stats = {k: tuple(v) for k, v in manifest["normalization"].items()}
    norm_cube = normalize(cube, stats)
    registry = load_registry(data_dir / "registry.csv")
    return model, manifest, norm_cube, stats, registry, run_dir, data_dir


def cmd_evaluate(cfg: dict, args) -> int:
    section = _section(cfg, "evaluate")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    model, manifest, norm_cube, stats, registry, run_dir, data_dir = \
        _load_run(section, out)
    held = load_held(data_dir / "held.csv")
    split = load_split(run_dir / "split.csv")
    target = manifest["target_channel"]
    train_cfg = TrainConfig(
        patch_size=manifest["extra"]["patch_size"],
        window=model.window, horizon=model.horizon, seed=manifest["seed"],
    )
    samples, _ = prepare_station_samples(
        GridCube.load(data_dir / ("cube_estimation"
                                  if manifest["extra"]["task"] == "estimate"
                                  else "cube_forecast")),
        registry, held, target, train_cfg,
    )
    keys = split.test if section.get("split", "test") == "test" else \
        getattr(split, section["split"])
    preds, truths = evaluate_pairs(model, samples, keys)
    rows = per_pollutant_eval({target: (preds, truths)})
    save_eval_table(out / "eval.csv", rows)
    save_pairs(out / "pairs.csv", preds, truths)
    result = mape(preds, truths)
    _write_resolved(out, "evaluate", _yamlable(dict(section)), seed)
    print(f"evaluate[{target}]: MAPE {result.mape_percent:.2f}% "
          f"(accuracy {result.accuracy_percent:.2f}%, n={result.n_pairs}, "
          f"excluded={result.n_excluded}) -> {out}")
    return 0


def cmd_estimate_map(cfg: dict, args) -> int:
    section = _section(cfg, "estimate_map")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    model, manifest, norm_cube, stats, registry, _, _ = _load_run(section, out)
    if manifest["extra"]["task"] != "estimate":
        raise ConfigError("estimate-map needs an estimation checkpoint")
    t_star = int(section.get("t_star", norm_cube.hours - 1))
    patch = manifest["extra"]["patch_size"]
    emap = estimate_city(model, norm_cube, stats, manifest["target_channel"],
                         t_star, patch, checkpoint_ref=str(manifest["seed"]))
    save_estimation_map_csv(out / "map.csv", emap)
    save_raster_pgm(out / "map.pgm", emap.values,
                    comment=f"channel={emap.channel}")
    _write_resolved(out, "estimate-map", _yamlable(dict(section)), seed)
    print(f"estimate-map: {emap.values.shape[0]}x{emap.values.shape[1]} cells "
          f"at t*={t_star} -> {out}")
    return 0


def cmd_forecast(cfg: dict, args) -> int:
    section = _section(cfg, "forecast")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    model, manifest, norm_cube, stats, registry, _, _ = _load_run(section, out)
    if manifest["extra"]["task"] != "forecast":
        raise ConfigError("forecast needs a forecast checkpoint")
    t_star = int(section.get("t_star", norm_cube.hours - 1))
    patch = manifest["extra"]["patch_size"]
    table = forecast_stations(model, norm_cube, registry, stats,
                              manifest["target_channel"], t_star, patch)
    save_forecast_table(out / "forecast.csv", table, t_star)
    _write_resolved(out, "forecast", _yamlable(dict(section)), seed)
    print(f"forecast: {len(table.rows)} stations x {table.horizon}h "
          f"from t*={t_star} -> {out}")
    return 0


def cmd_saliency(cfg: dict, args) -> int:
    section = _section(cfg, "saliency")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    model, manifest, norm_cube, stats, registry, run_dir, data_dir = \
        _load_run(section, out)
    held = load_held(data_dir / "held.csv")
    split = load_split(run_dir / "split.csv")
    target = manifest["target_channel"]
    train_cfg = TrainConfig(
        patch_size=manifest["extra"]["patch_size"],
        window=model.window, horizon=model.horizon, seed=manifest["seed"],
    )
    cube = GridCube.load(data_dir / ("cube_estimation"
                                     if manifest["extra"]["task"] == "estimate"
                                     else "cube_forecast"))
    samples, _ = prepare_station_samples(cube, registry, held, target, train_cfg)
    keys = list(split.train)
    max_samples = section.get("max_samples")
    if max_samples and len(keys) > int(max_samples):
        Rng(seed).child("saliency_subsample").shuffle(keys)
        keys = sorted(keys[: int(max_samples)])
    patches = (samples.patch_values(k) for k in keys)
    scores = saliency_scores(model, patches, cube.schema,
                             model_ref=str(run_dir / "checkpoint"),
                             dataset_ref=str(data_dir))
    save_saliency(out / "saliency.csv", scores)
    _write_resolved(out, "saliency", _yamlable(dict(section)), seed)
    top = max(scores.scores, key=scores.scores.get)
    print(f"saliency[{target}]: {scores.sample_count} samples, "
          f"top channel {top} -> {out}")
    return 0


def cmd_seasonal_maps(cfg: dict, args) -> int:
    section = _section(cfg, "seasonal_maps")
    seed = _seed(cfg, section)
    out = _out_dir(cfg, args)
    model, manifest, norm_cube, stats, registry, _, _ = _load_run(section, out)
    if manifest["extra"]["task"] != "estimate":
        raise ConfigError("seasonal-maps needs an estimation checkpoint")
    patch = manifest["extra"]["patch_size"]
    t_start = int(section.get("t_start", model.window - 1))
    t_end = int(section.get("t_end", norm_cube.hours - 1))
    stride = int(section.get("stride", 1))
    maps = []
    for t in range(t_start, t_end + 1, stride):
        maps.append(estimate_city(model, norm_cube, stats,
                                  manifest["target_channel"], t, patch))
    rasters, warnings = seasonal_mean_maps(maps)
    for season, raster in rasters.items():
        save_raster_pgm(out / f"season_{season}.pgm", raster,
                        comment=f"season={season}")
        from .inference import EstimationMap
        save_estimation_map_csv(
            out / f"season_{season}.csv",
            EstimationMap(maps[0].timestamp, manifest["target_channel"], raster),
        )
    with open(out / "seasonal_warnings.txt", "w") as fh:
        for w in warnings:
            fh.write(w + "\n")
    _write_resolved(out, "seasonal-maps", _yamlable(dict(section)), seed)
    print(f"seasonal-maps: {len(maps)} hourly maps -> {len(rasters)} season "
          f"rasters, {len(warnings)} empty -> {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "estimate-map": cmd_estimate_map,
    "forecast": cmd_forecast,
    "saliency": cmd_saliency,
    "seasonal-maps": cmd_seasonal_maps,
}


def _version_string() -> str:
    stamps = " ".join(f"{k}=v{v}" for k, v in sorted(FORMAT_VERSIONS.items()))
    return f"deepair {__version__} (formats: {stamps})"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="deepair",
        description="gridded air-quality estimation and forecasting pipeline",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None,
                       help="output directory (overrides config output_dir)")
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

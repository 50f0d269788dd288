"""Command-line entry point: ``windcast <command> [options]``.

Exit codes: 0 success, 1 validation or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from windcast.abed import build_model, load_model, save_model
from windcast.config import RunConfig, load_config, override
from windcast.errors import ConfigError, InputError, NumericError, WindcastError
from windcast.evaluator import (
    MAP_HORIZONS_MIN,
    cell_points,
    correlation_map,
    export_area_forecast,
    obs3_frame,
    station_points,
    stratified_report,
    write_area_forecast,
    write_report,
)
from windcast.featurecube import FeatureCube, WindowConfig, make_samples, read_cube, write_cube
from windcast.geogrid import bin_points, make_grid
from windcast.ingest import parse_catalog, parse_observations, parse_time, write_csv_atomic
from windcast.pipeline import build_cube_from_dir
from windcast.trainer import predict, predict_batch, train, write_metrics_json

logger = logging.getLogger("windcast")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"usage error: {message}")


def _parser():
    p = _Parser(prog="windcast", description="Gridded wind forecasting pipeline.")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="input data directory (overrides paths.data_dir)")
    common.add_argument("--cube", help="cube file (overrides paths.cube)")
    common.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic scenario bundle")
    cube = sub.add_parser("cube", help="feature cube commands")
    cube_sub = cube.add_subparsers(dest="cube_command", required=True, parser_class=_Parser)
    cube_sub.add_parser("build", parents=[common], help="assemble the feature cube from input CSVs")
    sub.add_parser("train", parents=[common], help="train a model on the cube's training split")
    for name, text in (("predict", "forecast fields for one window"),
                       ("export-area", "plot-ready table for one forecast instant")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--t0", required=True, help="window start, ISO-8601 UTC")
        sp.add_argument("--horizon", type=int, help="horizon in minutes after the issue time")
    sub.add_parser("eval", parents=[common], help="stratified metrics on the test split")
    sub.add_parser("correlate", parents=[common], help="correlation map against 3 m station winds")
    sub.add_parser("selfcheck", parents=[common], help="64-bit finite-difference gradient suite")
    return p


# helpers


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"missing input: {p}")
    return p


def _out_dir(args, cfg: RunConfig) -> Path:
    if not args.out:
        raise UsageError("usage error: --out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run_config.yaml")
    return out


def _merged_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = override(cfg, "train", seed=args.seed)
    paths = {k: v for k, v in (("data_dir", args.data), ("cube", args.cube),
                               ("checkpoint", args.checkpoint)) if v is not None}
    if paths:
        cfg = override(cfg, "paths", **paths)
    return cfg


def _load_cube(cfg: RunConfig) -> FeatureCube:
    cube = read_cube(_require(cfg.paths.cube))
    if cube.grid.spec != cfg.grid:
        raise ConfigError(f"cube grid {cube.grid.spec} does not match config grid {cfg.grid}")
    return cube


def _load_checkpoint(cfg: RunConfig):
    model, meta = load_model(_require(cfg.paths.checkpoint), expect=cfg.model)
    saved = meta.get("window")
    if saved is not None and WindowConfig(**saved) != cfg.window:
        raise ConfigError(f"checkpoint was trained with window {saved}, config has "
                          f"{dataclasses.asdict(cfg.window)}")
    return model, meta


def _horizon_steps(cfg: RunConfig, minutes):
    max_steps = cfg.window.F + cfg.window.M
    if minutes is None:
        return max_steps
    if minutes % 15 or not 15 <= minutes <= 15 * max_steps:
        raise InputError(f"--horizon must be a multiple of 15 between 15 and {15 * max_steps} minutes, got {minutes}")
    return minutes // 15


def _single_prediction(cfg, args):
    model, _ = _load_checkpoint(cfg)
    cube = _load_cube(cfg)
    return cube, predict(model, cube, cfg.window, [parse_time(args.t0)])[0]


# commands


def cmd_synth(args, cfg):
    out = _out_dir(args, cfg)
    from windcast.synthgen import generate

    scenario = cfg.scenario(cfg.train.seed)
    scenario.check_window(cfg.window)
    generate(scenario, out)
    print(f"scenario written to {out}")


def cmd_cube_build(args, cfg):
    out = _out_dir(args, cfg)
    grid = make_grid(cfg.grid)
    cube = build_cube_from_dir(_require(cfg.paths.data_dir), grid, cfg.paths.corrections)
    write_cube(cube, out / "cube.wcub")
    print(f"cube {cube.data.shape} with {len(cube.label_stations)} label stations -> {out / 'cube.wcub'}")


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    cube = _load_cube(cfg)
    samples = make_samples(cube, cfg.window, "train")
    model = build_model(cfg.model, seed=cfg.train.seed)
    result = train(model, samples, cfg.train, log_path=out / "train_log.csv")
    meta = {"window": dataclasses.asdict(cfg.window), "grid": cfg.grid.to_dict(),
            "train": dataclasses.asdict(cfg.train), "summary": result.log.summary()}
    save_model(result.model, out / "model.wabd", meta=meta)
    write_metrics_json(result.log, out / "metrics.json", {"n_train_samples": len(samples)})
    s = result.log.summary()
    print(f"trained {s['steps']} steps, best epoch {s['best_epoch']} "
          f"(val {s['best_val_loss']:.6g}), stop: {s['stop_reason']}")


def cmd_predict(args, cfg):
    out = _out_dir(args, cfg)
    cube, pred = _single_prediction(cfg, args)
    keep = (pred.horizons >= 1) & (pred.horizons <= _horizon_steps(cfg, args.horizon))
    grid = cube.grid
    lat, lon = np.meshgrid(grid.lat, grid.lon, indexing="ij")
    frames = []
    for k in np.flatnonzero(keep):
        frames.append(pd.DataFrame({
            "issue_time": str(pred.issue_time) + "Z", "time": str(pred.times[k]) + "Z",
            "horizon_min": int(pred.horizons[k]) * 15, "lat": lat.ravel(), "lon": lon.ravel(),
            "u": pred.values[0, k].astype(np.float64).ravel(), "v": pred.values[1, k].astype(np.float64).ravel()}))
    write_csv_atomic(pd.concat(frames, ignore_index=True), out / "forecast.csv", float_format="%.9g")
    print(f"{int(keep.sum())} forecast frames issued {pred.issue_time}Z -> {out / 'forecast.csv'}")


def _test_predictions(cfg):
    model, _ = _load_checkpoint(cfg)
    cube = _load_cube(cfg)
    samples = make_samples(cube, cfg.window, "test", dtype=model.dtype)
    if len(samples) == 0:
        raise InputError("the cube has no test samples for this window")
    return cube, samples, predict_batch(model, samples, np.arange(len(samples)), cfg.train.batch_size)


def _oracle_metrics(cfg, cube, samples, preds):
    data = Path(cfg.paths.data_dir)
    if not (data / "truth.csv").is_file() or not (data / "scenario.json").is_file():
        return None
    from windcast.synthgen import TruthOracle, load_scenario, oracle_eval

    oracle = TruthOracle(load_scenario(data))
    ev = cfg.window.eval_slice()
    tick = samples.starts[:, None] + cfg.window.M + np.arange(cfg.window.length)[ev][None, :]
    truth = oracle.truth_cube(cube.grid, cube.times[tick].ravel())
    truth = truth.reshape((2,) + tick.shape + cube.grid.shape)
    return oracle_eval(np.moveaxis(preds[:, :, ev], 1, 0), truth)


def cmd_eval(args, cfg):
    cube, samples, preds = _test_predictions(cfg)
    out = _out_dir(args, cfg)
    points = pd.concat([station_points(samples, preds, "model"), station_points(samples, None, "ecmwf")],
                       ignore_index=True)
    report = stratified_report(points, cfg.strata)
    write_report(report, out / "metrics.csv")
    oracle = _oracle_metrics(cfg, cube, samples, preds)
    if oracle is not None:
        tmp = out / "oracle_metrics.json.tmp"
        tmp.write_text(json.dumps(oracle, indent=2, sort_keys=True) + "\n")
        tmp.replace(out / "oracle_metrics.json")
    top = report[(report.season == "all") & (report.daypart == "all") & (report.horizon_min == "all")
                 & (report.station == "all") & (report.metric == "MAE") & report.quantity.isin(["u", "v"])]
    for _, r in top.iterrows():
        print(f"{r.source:6s} MAE {r.quantity} = {r.value:.4f} over {r['count']} points")
    print(f"{len(report)} metric rows -> {out / 'metrics.csv'}")


def cmd_correlate(args, cfg):
    cube, samples, preds = _test_predictions(cfg)
    out = _out_dir(args, cfg)
    data = _require(cfg.paths.data_dir)
    stations = parse_catalog(_require(data / "stations.csv")).records
    inside = [s for s in stations if cube.grid.contains(s.lat, s.lon)]
    if not inside:
        raise InputError("no catalog station lies inside the grid")
    rows, cols = bin_points([s.lat for s in inside], [s.lon for s in inside], cube.grid)
    cells = {s.station_id: (int(r), int(c)) for s, r, c in zip(inside, rows, cols)}
    obs = parse_observations(_require(data / "observations.csv")).records
    max_h = 15 * (cfg.window.F + cfg.window.M)
    horizons = [h for h in MAP_HORIZONS_MIN if h <= max_h]
    cmap = correlation_map(cell_points(samples, preds, cells), obs3_frame(obs), inside, horizons)
    write_csv_atomic(cmap, out / "correlation_map.csv", float_format="%.12g")
    print(f"{len(cmap)} station/horizon rows -> {out / 'correlation_map.csv'}")


def cmd_export_area(args, cfg):
    out = _out_dir(args, cfg)
    cube, pred = _single_prediction(cfg, args)
    h = _horizon_steps(cfg, args.horizon)
    k = int(np.flatnonzero(pred.horizons == h)[0])
    tick = int(np.searchsorted(cube.times, pred.times[k]))
    truth = []
    for j, s in enumerate(cube.label_stations):
        if cube.label_mask[0, tick, j] and cube.label_mask[1, tick, j]:
            truth.append((s.station_id, s.lat, s.lon, cube.labels[0, tick, j], cube.labels[1, tick, j]))
    cells, st = export_area_forecast(pred.values[:, k], cube.grid, truth)
    write_area_forecast(cells, st, out / "area_forecast.csv", out / "area_stations.csv")
    print(f"area forecast valid {pred.times[k]}Z (+{h * 15} min) -> {out / 'area_forecast.csv'}")


def cmd_selfcheck(args, cfg):
    from windcast.selfcheck import TOLERANCE, run

    if args.out:
        _out_dir(args, cfg)
    rows = run()
    worst = 0.0
    for name, err, secs in rows:
        flag = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:45s} max rel err {err:.3e}  {secs:6.2f}s  {flag}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst > TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} > {TOLERANCE:g}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "correlate": cmd_correlate, "export-area": cmd_export_area, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _merged_config(args)
        fn = cmd_cube_build if args.command == "cube" else COMMANDS[args.command]
        if args.threads is not None and args.threads < 1:
            raise UsageError(f"usage error: --threads must be positive, got {args.threads}")
        with threadpool_limits(limits=args.threads):
            fn(args, cfg)
        return 0
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except WindcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

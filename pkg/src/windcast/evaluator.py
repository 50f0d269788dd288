"""Forecast verification: MAE/RMSE/correlation, stratified reports,
station correlation maps and area-forecast export.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from windcast.errors import InputError, ShapeError
from windcast.featurecube import FEATURE_NAMES, SampleSet
from windcast.geogrid import Grid
from windcast.ingest import Observations, uv_to_wind, wind_to_uv, write_csv_atomic

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["quantity", "metric", "season", "daypart", "horizon_min", "station", "source", "value", "count"]
CORRELATION_COLUMNS = ["station_id", "lat", "lon", "horizon_min", "r_u", "r_v", "count"]
QUANTITIES = ("u", "v", "speed", "sin", "cos")
MAP_HORIZONS_MIN = (30, 120, 240, 480)
ALL = "all"


# scalar metrics


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.size != y_hat.size:
        raise ShapeError(f"lengths differ: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise InputError("metric undefined for empty input")
    return y, y_hat


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def correlation(x, y) -> float:
    """Pearson r with population moments."""
    x, y = _pair(x, y)
    if x.size < 2:
        raise InputError("correlation needs at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = np.mean(dx * dx), np.mean(dy * dy)
    if vx == 0 or vy == 0:
        raise InputError("correlation undefined for constant input")
    return float(np.mean(dx * dy) / np.sqrt(vx * vy))


def derived_quantities(u, v):
    """Speed and FROM-direction sine/cosine; ``valid`` is False for calm points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    speed = np.hypot(u, v)
    valid = speed > 0
    safe = np.where(valid, speed, 1.0)
    return speed, np.where(valid, -u / safe, 0.0), np.where(valid, -v / safe, 0.0), valid


# strata


def _minutes(text):
    h, m = text.split(":")
    return int(h) * 60 + int(m)


@dataclass(frozen=True)
class StrataConfig:
    winter_months: tuple = (6, 7, 8, 9)
    summer_months: tuple = (11, 12, 1, 2)
    local_utc_offset_hours: float = 8.0
    summer_day: tuple = ("05:00", "19:30")
    winter_day: tuple = ("07:15", "17:30")
    other_day: tuple = ("06:00", "18:30")

    def __post_init__(self):
        object.__setattr__(self, "winter_months", tuple(int(m) for m in self.winter_months))
        object.__setattr__(self, "summer_months", tuple(int(m) for m in self.summer_months))
        if set(self.winter_months) & set(self.summer_months):
            raise InputError("winter and summer month sets overlap")
        for name in ("summer_day", "winter_day", "other_day"):
            lo, hi = (_minutes(x) for x in getattr(self, name))
            if not 0 <= lo < hi <= 24 * 60:
                raise InputError(f"{name} window {getattr(self, name)} must satisfy 00:00 <= start < end <= 24:00")


def local_times(times, cfg: StrataConfig):
    offset = np.timedelta64(int(round(cfg.local_utc_offset_hours * 3600)), "s")
    return np.asarray(times, dtype="datetime64[s]") + offset


def season_of(times, cfg: StrataConfig = StrataConfig()):
    """``winter``, ``summer`` or ``other`` by local calendar month."""
    month = pd.DatetimeIndex(local_times(times, cfg)).month.to_numpy()
    return np.where(np.isin(month, cfg.winter_months), "winter",
                    np.where(np.isin(month, cfg.summer_months), "summer", "other"))


def daypart_of(times, cfg: StrataConfig = StrataConfig()):
    """``day`` inside the season's half-open local clock window, else ``night``."""
    local = pd.DatetimeIndex(local_times(times, cfg))
    minute = local.hour.to_numpy() * 60 + local.minute.to_numpy() + local.second.to_numpy() / 60
    season = season_of(times, cfg)
    lo = np.zeros(minute.shape)
    hi = np.zeros(minute.shape)
    for name, window in (("summer", cfg.summer_day), ("winter", cfg.winter_day), ("other", cfg.other_day)):
        sel = season == name
        lo[sel], hi[sel] = _minutes(window[0]), _minutes(window[1])
    return np.where((minute >= lo) & (minute < hi), "day", "night")


# point collection


def station_points(samples: SampleSet, predictions=None, source="model"):
    """Long table of positive-horizon points at labelled stations.

    ``predictions`` is ``(n, 2, L, h, w)`` aligned with ``samples``; when None
    the coarse ``u10f``/``v10f`` channels of the cube are used instead.
    Columns: time, horizon_min, station, source, u_pred, v_pred, u_true, v_true.
    """
    cube, cfg = samples.cube, samples.cfg
    stations = cube.label_stations
    ev = np.arange(cfg.length)[cfg.eval_slice()]
    horizons = cfg.y_horizons()[ev]
    step_min = int((cube.times[1] - cube.times[0]) / np.timedelta64(1, "m")) if cube.n_times > 1 else 15
    n = len(samples)
    if predictions is not None and predictions.shape[0] != n:
        raise ShapeError(f"{predictions.shape[0]} predictions for {n} samples")
    if n == 0 or not stations:
        return pd.DataFrame(columns=["time", "horizon_min", "station", "source",
                                     "u_pred", "v_pred", "u_true", "v_true"])
    rows = np.array([s.row for s in stations])
    cols = np.array([s.col for s in stations])
    tick = samples.starts[:, None] + cfg.M + ev[None, :]  # (n, E)
    truth = cube.labels[:, tick]  # (2, n, E, S)
    valid = cube.label_mask[0][tick] & cube.label_mask[1][tick]  # (n, E, S)
    if predictions is None:
        iu, iv = FEATURE_NAMES.index("u10f"), FEATURE_NAMES.index("v10f")
        pred = np.stack([cube.data[iu][tick][..., rows, cols], cube.data[iv][tick][..., rows, cols]])
    else:
        pred = np.moveaxis(predictions[:, :, ev][..., rows, cols], 1, 0)  # (2, n, E, S)
    shape = valid.shape
    frame = pd.DataFrame({
        "time": np.broadcast_to(cube.times[tick][..., None], shape)[valid],
        "horizon_min": np.broadcast_to((horizons * step_min)[None, :, None], shape)[valid],
        "station": np.broadcast_to(np.array([s.station_id for s in stations])[None, None, :], shape)[valid],
        "u_pred": pred[0][valid].astype(np.float64), "v_pred": pred[1][valid].astype(np.float64),
        "u_true": truth[0][valid].astype(np.float64), "v_true": truth[1][valid].astype(np.float64),
    })
    frame.insert(3, "source", source)
    return frame


def _long_quantities(points):
    parts = []
    sp, sinp, cosp, okp = derived_quantities(points["u_pred"], points["v_pred"])
    st, sint, cost, okt = derived_quantities(points["u_true"], points["v_true"])
    ok = okp & okt
    qs = {"u": (points["u_pred"].to_numpy(), points["u_true"].to_numpy(), None),
          "v": (points["v_pred"].to_numpy(), points["v_true"].to_numpy(), None),
          "speed": (sp, st, None), "sin": (sinp, sint, ok), "cos": (cosp, cost, ok)}
    for q, (p, t, sel) in qs.items():
        f = points[["season", "daypart", "horizon_min", "station", "source"]].copy()
        f["quantity"], f["p"], f["t"] = q, p, t
        parts.append(f if sel is None else f[sel])
    return pd.concat(parts, ignore_index=True)


def stratified_report(points: pd.DataFrame, strata: StrataConfig = StrataConfig()) -> pd.DataFrame:
    """MAE, RMSE and r for every bucket of season x daypart x horizon x station (with ``all`` levels)."""
    if points.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    if (points["horizon_min"] <= 0).any():
        raise InputError("report points must have positive horizons")
    pts = points.copy()
    pts["season"] = season_of(pts["time"].to_numpy(), strata)
    pts["daypart"] = daypart_of(pts["time"].to_numpy(), strata)
    pts["horizon_min"] = pts["horizon_min"].astype(int).astype(str)
    long = _long_quantities(pts)
    keys = ["season", "daypart", "horizon_min", "station"]
    out = []
    for agg in itertools.product((False, True), repeat=len(keys)):
        f = long.copy()
        for k, a in zip(keys, agg):
            if a:
                f[k] = ALL
        by = ["quantity", "source"] + keys
        f["e"] = f["p"] - f["t"]
        f["ae"] = f["e"].abs()
        f["se"] = f["e"] ** 2
        g = f.groupby(by, sort=True)
        stats = g.agg(count=("e", "size"), mae=("ae", "mean"), mse=("se", "mean"))
        dp = f["p"] - g["p"].transform("mean")
        dt = f["t"] - g["t"].transform("mean")
        mom = pd.DataFrame({"xy": dp * dt, "xx": dp * dp, "yy": dt * dt})
        for b in by:
            mom[b] = f[b]
        m = mom.groupby(by, sort=True)[["xy", "xx", "yy"]].sum()
        stats = stats.join(m)
        stats = stats.reset_index()
        for metric, vals, ok in (
                ("MAE", stats["mae"], stats["count"] > 0),
                ("RMSE", np.sqrt(stats["mse"]), stats["count"] > 0),
                ("r", stats["xy"] / np.sqrt(stats["xx"] * stats["yy"]),
                 (stats["count"] >= 2) & (stats["xx"] > 0) & (stats["yy"] > 0))):
            rows = stats.loc[ok, by + ["count"]].copy()
            rows["metric"] = metric
            rows["value"] = np.asarray(vals)[ok.to_numpy()]
            out.append(rows)
    rep = pd.concat(out, ignore_index=True)[REPORT_COLUMNS]
    rep = rep[np.isfinite(rep["value"])]
    qorder = {q: i for i, q in enumerate(QUANTITIES)}
    rep = rep.assign(_q=rep["quantity"].map(qorder)).sort_values(
        ["_q", "metric", "source", "season", "daypart", "horizon_min", "station"], kind="mergesort")
    return rep.drop(columns="_q").reset_index(drop=True)


def write_report(report: pd.DataFrame, path):
    write_csv_atomic(report, path, float_format="%.12g")


# correlation map


def obs3_frame(obs: Observations) -> pd.DataFrame:
    """``station_id, time, u3, v3`` for rows with both 3 m speed and direction."""
    f = obs.frame
    ok = f["wind3_speed_kmh"].notna() & f["wind3_dir_deg"].notna()
    u3, v3 = wind_to_uv(f.loc[ok, "wind3_speed_kmh"].to_numpy(), f.loc[ok, "wind3_dir_deg"].to_numpy())
    return pd.DataFrame({"station_id": f.loc[ok, "station_id"].to_numpy(),
                         "time": f.loc[ok, "timestamp"].to_numpy(), "u3": u3, "v3": v3})


def cell_points(samples: SampleSet, predictions, cells):
    """Predicted ``u, v`` at arbitrary station cells for every positive horizon.

    ``cells`` maps station id to ``(row, col)``.
    """
    cube, cfg = samples.cube, samples.cfg
    ev = np.arange(cfg.length)[cfg.eval_slice()]
    step_min = int((cube.times[1] - cube.times[0]) / np.timedelta64(1, "m")) if cube.n_times > 1 else 15
    horizons = cfg.y_horizons()[ev] * step_min
    ids = sorted(cells)
    if not ids or len(samples) == 0:
        return pd.DataFrame(columns=["station_id", "time", "horizon_min", "u_pred", "v_pred"])
    rows = np.array([cells[i][0] for i in ids])
    cols = np.array([cells[i][1] for i in ids])
    tick = samples.starts[:, None] + cfg.M + ev[None, :]
    pred = predictions[:, :, ev][..., rows, cols]  # (n, 2, E, S)
    shape = (len(samples), ev.size, len(ids))
    return pd.DataFrame({
        "station_id": np.broadcast_to(np.array(ids)[None, None, :], shape).ravel(),
        "time": np.broadcast_to(cube.times[tick][..., None], shape).ravel(),
        "horizon_min": np.broadcast_to(horizons[None, :, None], shape).ravel(),
        "u_pred": pred[:, 0].astype(np.float64).ravel(), "v_pred": pred[:, 1].astype(np.float64).ravel(),
    })


def correlation_map(pred_points: pd.DataFrame, obs3: pd.DataFrame, stations,
                    horizons_min=MAP_HORIZONS_MIN, min_count: int = 100) -> pd.DataFrame:
    """Per-station, per-horizon r(u_pred, u3) and r(v_pred, v3).

    Stations with fewer than ``min_count`` matched points or a constant
    series keep a row with blank r and the matched count.
    """
    coords = {s.station_id: (s.lat, s.lon) for s in stations}
    joined = pred_points.merge(obs3, on=["station_id", "time"], how="inner")
    rows = []
    for sid in sorted(set(pred_points["station_id"]) | set(obs3["station_id"])):
        if sid not in coords:
            continue
        for h in horizons_min:
            sel = joined[(joined["station_id"] == sid) & (joined["horizon_min"] == h)]
            r_u = r_v = np.nan
            if len(sel) >= min_count:
                try:
                    r_u = correlation(sel["u_pred"], sel["u3"])
                    r_v = correlation(sel["v_pred"], sel["v3"])
                except InputError:
                    logger.warning("station %s horizon %d min: constant series, correlation skipped", sid, h)
                    r_u = r_v = np.nan
            else:
                logger.info("station %s horizon %d min: %d points < %d, skipped", sid, h, len(sel), min_count)
            rows.append({"station_id": sid, "lat": coords[sid][0], "lon": coords[sid][1], "horizon_min": h,
                         "r_u": r_u, "r_v": r_v, "count": len(sel)})
    return pd.DataFrame(rows, columns=CORRELATION_COLUMNS)


# area export


def export_area_forecast(frame, grid: Grid, station_truth=None):
    """Plot-ready tables for one forecast instant.

    ``frame`` is ``(2, h, w)``; ``station_truth`` an iterable of
    ``(station_id, lat, lon, u, v)``. Returns ``(cells, stations)`` frames.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (2,) + grid.shape:
        raise ShapeError(f"frame {frame.shape} does not match (2,) + {grid.shape}")
    lat, lon = np.meshgrid(grid.lat, grid.lon, indexing="ij")
    u, v = frame[0].ravel(), frame[1].ravel()
    speed, direction = uv_to_wind(u, v)
    cells = pd.DataFrame({"lat": lat.ravel(), "lon": lon.ravel(), "u": u, "v": v,
                          "speed": np.atleast_1d(speed), "dir": np.atleast_1d(direction)})
    st = pd.DataFrame(list(station_truth or []), columns=["station_id", "lat", "lon", "u", "v"])
    s_speed, s_dir = uv_to_wind(st["u"].to_numpy(dtype=float), st["v"].to_numpy(dtype=float))
    st["speed"], st["dir"] = np.atleast_1d(s_speed), np.atleast_1d(s_dir)
    return cells, st


def write_area_forecast(cells, stations, path, station_path):
    write_csv_atomic(cells, path, float_format="%.9g")
    write_csv_atomic(stations, station_path, float_format="%.9g")


__all__ = ["StrataConfig", "cell_points", "correlation", "correlation_map", "daypart_of", "derived_quantities",
           "export_area_forecast", "mae", "obs3_frame", "rmse", "season_of", "station_points",
           "stratified_report", "write_area_forecast", "write_report"]

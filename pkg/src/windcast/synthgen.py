"""Analytic synthetic scenarios used as an end-to-end oracle.

The truth is a smooth diurnal wind field

    u3 = A sin(2 pi lon / lam + w t + g lat)
    v3 = A cos(2 pi lat / lam + w t + g lon)

with ``w = 2 pi / 24 h`` and ``t`` in hours since midnight UTC of the start
day. The 10 m wind is ``alpha * (u3, v3)`` plus optional Gaussian noise at
stations. Stations sit exactly on distinct cell centres so that a cube built
from the bundle can be compared with the oracle without binning error.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from windcast.errors import ConfigError, ShapeError
from windcast.featurecube import WindowConfig
from windcast.geogrid import Grid, GridSpec, make_grid
from windcast.ingest import STEP, iso, uv_to_wind, write_csv_atomic

FLOAT17 = "%.17g"
BUNDLE_FILES = ("stations.csv", "observations.csv", "u10f.csv", "v10f.csv", "msl.csv", "dem.csv",
                "truth.csv", "scenario.json")
COARSE_DEG = 0.25
HOUR = np.timedelta64(1, "h")


@dataclass(frozen=True)
class FieldSpec:
    amplitude: float = 10.0  # km/h
    wavelength_deg: float = 10.0
    diurnal_amplitude: float = 5.0  # temperature swing, deg C
    phase_gradient: float = 0.0  # extra phase, rad per degree

    def __post_init__(self):
        if self.amplitude <= 0 or self.wavelength_deg <= 0:
            raise ConfigError("amplitude and wavelength_deg must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(-32.0, -33.2, 115.0, 116.2, 0.1))
    n_stations: int = 5
    n_label_stations: int = 2
    days: int = 8
    seed: int = 0
    start: str = "2022-01-21T00:00"
    field_spec: FieldSpec = field(default_factory=FieldSpec)
    alpha: float = 1.2
    noise_sd: float = 0.0

    def __post_init__(self):
        g = make_grid(self.grid)
        if not 1 <= self.n_label_stations <= self.n_stations:
            raise ConfigError(f"need 1 <= n_label_stations <= n_stations, got {self.n_label_stations}"
                              f" and {self.n_stations}")
        if self.n_stations > g.n_lat * g.n_lon:
            raise ConfigError(f"{self.n_stations} stations do not fit on distinct cells of a {g.shape} grid")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")
        if np.datetime64(self.start, "s") != np.datetime64(self.start, "D"):
            raise ConfigError(f"start {self.start} must be midnight UTC")

    def check_window(self, win: WindowConfig):
        need = math.ceil(win.span * 15 / (24 * 60)) + 1
        if self.days < need:
            raise ConfigError(f"days={self.days} is too short for a {win.span}-tick window (need >= {need})")

    @property
    def start_time(self):
        return np.datetime64(self.start, "s")

    @property
    def times(self):
        return self.start_time + np.arange(self.days * 96) * STEP

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridSpec(**d["grid"])
        d["field_spec"] = FieldSpec(**d["field_spec"])
        return cls(**d)


class TruthOracle:
    """Closed-form fields of a scenario; ``t`` is datetime64 and broadcasts against lat/lon."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.f = cfg.field_spec

    def hours(self, t):
        return (np.asarray(t, dtype="datetime64[s]") - self.cfg.start_time) / HOUR

    def _phase(self, t):
        return 2 * np.pi * self.hours(t) / 24.0

    def u3(self, lat, lon, t):
        f = self.f
        return f.amplitude * np.sin(2 * np.pi * np.asarray(lon) / f.wavelength_deg + self._phase(t)
                                    + f.phase_gradient * np.asarray(lat))

    def v3(self, lat, lon, t):
        f = self.f
        return f.amplitude * np.cos(2 * np.pi * np.asarray(lat) / f.wavelength_deg + self._phase(t)
                                    + f.phase_gradient * np.asarray(lon))

    def u10(self, lat, lon, t):
        return self.cfg.alpha * self.u3(lat, lon, t)

    def v10(self, lat, lon, t):
        return self.cfg.alpha * self.v3(lat, lon, t)

    def temp(self, lat, lon, t):
        return 20.0 + self.f.diurnal_amplitude * np.sin(self._phase(t) - np.pi / 2) + 0.5 * (np.asarray(lat) + 32.0)

    def humidity(self, lat, lon, t):
        return 60.0 + 15.0 * np.cos(self._phase(t)) + 0.0 * np.asarray(lon)

    def msl(self, lat, lon, t):
        w = self.f.wavelength_deg
        return 1013.0 + 3.0 * np.sin(2 * np.pi * (np.asarray(lat) + np.asarray(lon)) / w + self._phase(t) / 2)

    def dem(self, lat, lon):
        return 100.0 + 40.0 * np.sin(np.asarray(lat) * 3.0) * np.cos(np.asarray(lon) * 2.0)

    def truth_cube(self, grid: Grid, times):
        """``(2, n_t, h, w)`` array of (u10, v10) at cell centres."""
        t = np.asarray(times, dtype="datetime64[s]")[:, None, None]
        lat, lon = grid.lat[None, :, None], grid.lon[None, None, :]
        return np.stack([self.u10(lat, lon, t), self.v10(lat, lon, t)])


def theoretical_r(cfg: ScenarioConfig) -> float:
    """Correlation of station u10 with u3 over whole days (var(u3) = A^2 / 2)."""
    s = cfg.alpha * cfg.field_spec.amplitude / math.sqrt(2)
    return s / math.sqrt(s * s + cfg.noise_sd ** 2)


def sigma_for_r(r: float, alpha: float = 1.2, amplitude: float = 10.0) -> float:
    if not 0 < r <= 1:
        raise ConfigError(f"target r must lie in (0, 1], got {r}")
    return alpha * amplitude / math.sqrt(2) * math.sqrt(1 / r ** 2 - 1)


def place_stations(cfg: ScenarioConfig, grid: Grid):
    """Distinct cell centres drawn uniformly with the scenario seed."""
    rng = np.random.default_rng([cfg.seed, 1])
    cells = rng.choice(grid.n_lat * grid.n_lon, size=cfg.n_stations, replace=False)
    rows, cols = np.divmod(cells, grid.n_lon)
    return pd.DataFrame({
        "station_id": [f"SYN{k:03d}" for k in range(cfg.n_stations)],
        "lat": grid.lat[rows], "lon": grid.lon[cols],
        "has_10m": (np.arange(cfg.n_stations) < cfg.n_label_stations).astype(int),
    })


def coarse_grid(spec: GridSpec):
    """0.25-degree lattice covering the target grid with one node of margin on every side."""
    north = math.ceil(spec.lat_start / COARSE_DEG) * COARSE_DEG + COARSE_DEG
    south = math.floor(spec.lat_end / COARSE_DEG) * COARSE_DEG - COARSE_DEG
    west = math.floor(spec.lon_start / COARSE_DEG) * COARSE_DEG - COARSE_DEG
    east = math.ceil(spec.lon_end / COARSE_DEG) * COARSE_DEG + COARSE_DEG
    lats = north - COARSE_DEG * np.arange(round((north - south) / COARSE_DEG) + 1)
    lons = west + COARSE_DEG * np.arange(round((east - west) / COARSE_DEG) + 1)
    return lats, lons


def _dem_points(grid: Grid, oracle: TruthOracle):
    # half-cell lattice; cell centres are included exactly so binning is lossless
    half = grid.spec.cell_deg / 2
    lats = np.sort(np.concatenate([grid.lat, grid.lat + half]))[::-1]
    lons = np.sort(np.concatenate([grid.lon, grid.lon + half]))
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    return pd.DataFrame({"lat": la.ravel(), "lon": lo.ravel(), "elevation_m": oracle.dem(la, lo).ravel()})


def generate(cfg: ScenarioConfig, out_dir) -> dict:
    """Write a scenario bundle; returns ``{file name: path}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = make_grid(cfg.grid)
    oracle = TruthOracle(cfg)
    times = cfg.times
    stamps = np.array([iso(t) for t in times])
    paths = {name: out / name for name in BUNDLE_FILES}

    st = place_stations(cfg, grid)
    write_csv_atomic(st, paths["stations.csv"], FLOAT17)

    # observations, station-major then time
    n_s, n_t = len(st), times.size
    lat = st["lat"].to_numpy()[:, None]
    lon = st["lon"].to_numpy()[:, None]
    t = times[None, :]
    u3, v3 = oracle.u3(lat, lon, t), oracle.v3(lat, lon, t)
    s3, d3 = uv_to_wind(u3, v3)
    rng = np.random.default_rng([cfg.seed, 2])
    eps = rng.normal(scale=cfg.noise_sd, size=(2, n_s, n_t)) if cfg.noise_sd > 0 else np.zeros((2, n_s, n_t))
    s10, d10 = uv_to_wind(cfg.alpha * u3 + eps[0], cfg.alpha * v3 + eps[1])
    lab = st["has_10m"].to_numpy()[:, None].astype(bool) & np.ones((1, n_t), bool)
    obs = pd.DataFrame({
        "station_id": np.repeat(st["station_id"].to_numpy(), n_t),
        "timestamp": np.tile(stamps, n_s),
        "temp_c": (oracle.temp(lat, lon, t) + 0 * u3).ravel(),
        "humidity_pct": (oracle.humidity(lat, lon, t) + 0 * u3).ravel(),
        "wind3_speed_kmh": s3.ravel(), "wind3_dir_deg": d3.ravel(),
        "wind10_speed_kmh": np.where(lab, s10, np.nan).ravel(),
        "wind10_dir_deg": np.where(lab, d10, np.nan).ravel(),
    })
    write_csv_atomic(obs, paths["observations.csv"], FLOAT17)

    # coarse fields: hourly, covering the last tick
    clats, clons = coarse_grid(cfg.grid)
    hours = cfg.start_time + np.arange(cfg.days * 24 + 1) * HOUR
    ht, hl, ho = np.meshgrid(hours, clats, clons, indexing="ij")
    base = {"timestamp": np.repeat(np.array([iso(h) for h in hours]), clats.size * clons.size),
            "lat": hl.ravel(), "lon": ho.ravel()}
    for name, fn in (("u10f", oracle.u10), ("v10f", oracle.v10), ("msl", oracle.msl)):
        write_csv_atomic(pd.DataFrame({**base, name: fn(hl, ho, ht).ravel()}), paths[f"{name}.csv"], FLOAT17)

    write_csv_atomic(_dem_points(grid, oracle), paths["dem.csv"], FLOAT17)

    truth = oracle.truth_cube(grid, times)
    tl, tg = np.meshgrid(grid.lat, grid.lon, indexing="ij")
    write_csv_atomic(pd.DataFrame({
        "timestamp": np.repeat(stamps, tl.size),
        "lat": np.tile(tl.ravel(), n_t), "lon": np.tile(tg.ravel(), n_t),
        "u10": truth[0].ravel(), "v10": truth[1].ravel(),
    }), paths["truth.csv"], FLOAT17)

    tmp = paths["scenario.json"].with_suffix(".json.tmp")
    tmp.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    tmp.replace(paths["scenario.json"])
    return paths


def load_scenario(bundle_dir) -> ScenarioConfig:
    return ScenarioConfig.from_dict(json.loads((Path(bundle_dir) / "scenario.json").read_text()))


def read_truth(path, grid: Grid):
    """Parse ``truth.csv`` into ``(times, values (2, n_t, h, w))``."""
    df = pd.read_csv(path)
    times = pd.to_datetime(df["timestamp"].str.rstrip("Z")).to_numpy().astype("datetime64[s]")
    ut = np.unique(times)
    ti = np.searchsorted(ut, times)
    ri = np.argmin(np.abs(df["lat"].to_numpy()[:, None] - grid.lat[None]), axis=1)
    ci = np.argmin(np.abs(df["lon"].to_numpy()[:, None] - grid.lon[None]), axis=1)
    vals = np.full((2, ut.size) + grid.shape, np.nan)
    vals[0, ti, ri, ci] = df["u10"].to_numpy()
    vals[1, ti, ri, ci] = df["v10"].to_numpy()
    if np.isnan(vals).any():
        raise ShapeError(f"{path}: truth does not cover every cell and tick")
    return ut, vals


# oracle evaluation


def oracle_eval(predictions, truth) -> dict:
    """Grid-wide MAE and RMSE of ``predictions`` against ``truth`` (same shape, leading axis u/v)."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and truth {y.shape} are not aligned")
    if p.shape[0] != 2:
        raise ShapeError(f"leading axis must hold (u, v), got {p.shape[0]}")
    e = p - y
    out = {}
    for k, name in enumerate(("u", "v")):
        out[f"mae_{name}"] = float(np.mean(np.abs(e[k])))
        out[f"rmse_{name}"] = float(np.sqrt(np.mean(e[k] ** 2)))
    out["mae"] = float(np.mean(np.abs(e)))
    out["rmse"] = float(np.sqrt(np.mean(e ** 2)))
    return out


def persistence_forecast(truth, issue_index: int, n_ahead: int):
    """Repeat the field at ``issue_index`` for the next ``n_ahead`` ticks; returns (forecast, target)."""
    truth = np.asarray(truth)
    if not 0 <= issue_index < truth.shape[1] - n_ahead:
        raise ShapeError(f"issue index {issue_index} + {n_ahead} exceeds {truth.shape[1]} ticks")
    target = truth[:, issue_index + 1:issue_index + 1 + n_ahead]
    return np.broadcast_to(truth[:, issue_index:issue_index + 1], target.shape), target

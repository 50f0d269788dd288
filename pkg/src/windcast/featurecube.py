"""Gridded 14-channel feature cube, calendar split and training windows.

Cube layout is ``(feature, time, lat, lon)`` on a uniform 15-minute UTC index.
Within a sample the last observed tick is local index ``D - 1``; every later
index is a forecast instant and the observation channels are zeroed there.
"""

from __future__ import annotations

import calendar
import json
import logging
import os
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from windcast.errors import FormatError, InputError, ShapeError
from windcast.geogrid import (
    Grid,
    GriddedField,
    GridSpec,
    TimeSeriesField,
    bin_points,
    interp_bilinear_series,
    make_grid,
    resample_time_linear,
)
from windcast.ingest import STEP, Observations, StationMeta, time_feature_array, wind_to_uv

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("T", "H", "u3", "v3", "u10f", "v10f", "msl", "dem",
                 "sin_month", "cos_month", "sin_hour", "cos_hour", "sin_doy", "cos_doy")
OBS_CHANNELS = (0, 1, 2, 3)
COARSE_NAMES = ("u10f", "v10f", "msl")
N_FEATURES = len(FEATURE_NAMES)

MAGIC = b"WCUB"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class LabelStation:
    station_id: str
    lat: float
    lon: float
    row: int
    col: int


@dataclass
class FeatureCube:
    """Feature array plus the 10 m labels at labelled stations.

    ``labels`` is ``(2, n_t, n_stations)`` holding ``(u10, v10)``; entries
    without a valid observation are NaN and ``label_mask`` is False there.
    """

    data: np.ndarray
    times: np.ndarray
    grid: Grid
    label_stations: list = field(default_factory=list)
    labels: np.ndarray | None = None
    label_mask: np.ndarray | None = None
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[s]")
        nf, nt, h, w = self.data.shape
        if tuple(self.feature_names) != FEATURE_NAMES:
            raise FormatError(f"unexpected feature order {list(self.feature_names)}")
        if nt != self.times.size or (h, w) != self.grid.shape:
            raise ShapeError(f"data {self.data.shape} does not match {self.times.size} times "
                             f"and grid {self.grid.shape}")
        if nt > 1 and np.any(np.diff(self.times) != STEP):
            raise InputError("cube times must be a uniform 15-minute index")
        ns = len(self.label_stations)
        if self.labels is None:
            self.labels = np.full((2, nt, ns), np.nan)
        if self.label_mask is None:
            self.label_mask = np.isfinite(self.labels)
        if self.labels.shape != (2, nt, ns) or self.label_mask.shape != (2, nt, ns):
            raise ShapeError(f"labels {self.labels.shape} expected {(2, nt, ns)}")

    @property
    def n_times(self):
        return self.times.size

    @property
    def label_cells(self):
        return [(s.station_id, (s.row, s.col)) for s in self.label_stations]

    def channel(self, name):
        return self.data[FEATURE_NAMES.index(name)]


# assembly


def regrid_coarse(series: TimeSeriesField, grid: Grid) -> TimeSeriesField:
    """Bilinear regrid onto ``grid`` followed by linear resampling to 15 minutes."""
    out = interp_bilinear_series(series, grid)
    if out.times.size > 1 and out.step != STEP:
        out = resample_time_linear(out, STEP)
    return out


def _resolve_collisions(ids, dist, rows, cols, kind):
    """Index list of the stations that own their cell (nearest centre, then id)."""
    order = sorted(range(len(ids)), key=lambda i: (rows[i], cols[i], dist[i], ids[i]))
    keep, seen = [], {}
    for i in order:
        cell = (rows[i], cols[i])
        if cell in seen:
            logger.warning("%s station %s shadowed by %s in cell %s", kind, ids[i], seen[cell], cell)
            continue
        seen[cell] = ids[i]
        keep.append(i)
    return sorted(keep)


def _place_stations(stations, grid):
    placed = []
    for s in stations:
        if not grid.contains(s.lat, s.lon):
            logger.warning("station %s at (%s, %s) lies outside the grid; excluded", s.station_id, s.lat, s.lon)
            continue
        placed.append(s)
    if not placed:
        return placed, np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    lats = np.array([s.lat for s in placed])
    lons = np.array([s.lon for s in placed])
    rows, cols = bin_points(lats, lons, grid)
    dist = (lats - grid.lat[rows]) ** 2 + (lons - grid.lon[cols]) ** 2
    return placed, rows, cols, dist


def _coarse_block(series, times, name):
    if series.grid is not None and series.values.shape[1:] != series.grid.shape:
        raise ShapeError(f"{name}: frame shape {series.values.shape[1:]} does not match its grid")
    idx = np.searchsorted(series.times, times)
    ok = (idx < series.times.size)
    ok[ok] = series.times[idx[ok]] == times[ok]
    if not ok.all():
        missing = times[~ok]
        raise InputError(f"{name}: no data for {missing.size} ticks from {missing[0]}Z to {missing[-1]}Z")
    return series.values[idx]


def assemble_cube(obs: Observations, stations, coarse_fields, dem_field: GriddedField, grid: Grid,
                  time_range=None) -> FeatureCube:
    """Build the feature cube over ``[start, stop)``.

    Parameters
    ----------
    obs : Observations
        Corrected station observations; speeds in km/h.
    stations : list of StationMeta
    coarse_fields : mapping
        ``u10f``, ``v10f`` and ``msl`` series already on ``grid`` at 15 minutes.
    dem_field : GriddedField
        Terrain on ``grid``.
    time_range : (start, stop), optional
        Half-open UTC range; defaults to the span of the ``u10f`` series.
    """
    missing = [n for n in COARSE_NAMES if n not in coarse_fields]
    if missing:
        raise InputError(f"missing coarse fields {missing}")
    if time_range is None:
        t = coarse_fields["u10f"].times
        time_range = (t[0], t[-1] + STEP)
    start = np.datetime64(time_range[0], "s")
    stop = np.datetime64(time_range[1], "s")
    if (start - np.datetime64("1970-01-01T00:00:00")) % STEP != np.timedelta64(0, "s"):
        raise InputError(f"time range start {start} is not on a 15-minute tick")
    n_t = int(np.ceil((stop - start) / STEP))
    if n_t <= 0:
        raise InputError(f"empty time range {start} .. {stop}")
    times = start + np.arange(n_t) * STEP
    h, w = grid.shape
    if dem_field.values.shape != (h, w):
        raise ShapeError(f"dem {dem_field.values.shape} does not match grid {grid.shape}")

    data = np.zeros((N_FEATURES, n_t, h, w))
    for name in COARSE_NAMES:
        data[FEATURE_NAMES.index(name)] = _coarse_block(coarse_fields[name], times, name)
    data[FEATURE_NAMES.index("dem")] = np.asarray(dem_field.values, dtype=np.float64)[None]
    tf = time_feature_array(times)
    data[8:] = tf.T[:, :, None, None]

    stations = list(stations)
    placed, rows, cols, dist = _place_stations(stations, grid)
    ids = [s.station_id for s in placed]
    owners = _resolve_collisions(ids, dist, rows, cols, "observation")
    lab = [i for i in range(len(placed)) if placed[i].has_10m_labels]
    lab = [lab[k] for k in _resolve_collisions([ids[i] for i in lab], dist[lab], rows[lab], cols[lab], "label")]

    frame = obs.frame
    unknown = sorted(set(frame["station_id"]) - {s.station_id for s in stations})
    if unknown:
        logger.warning("observations for stations missing from the catalog ignored: %s", unknown)
    offs = (frame["timestamp"].to_numpy().astype("datetime64[s]") - start) / STEP
    sel = (offs >= 0) & (offs < n_t) & np.isin(frame["station_id"].to_numpy(), ids)
    f = frame[sel]
    ti = offs[sel].astype(np.int64)
    if pd.DataFrame({"s": f["station_id"].to_numpy(), "t": ti}).duplicated().any():
        raise InputError("duplicate observations for one station and tick")
    sidx = pd.Index(ids).get_indexer(f["station_id"])

    u3, v3 = _uv(f["wind3_speed_kmh"].to_numpy(), f["wind3_dir_deg"].to_numpy())
    values = [f["temp_c"].to_numpy(), f["humidity_pct"].to_numpy(), u3, v3]
    own = np.isin(sidx, owners)
    for ch, v in zip(OBS_CHANNELS, values):
        v = np.where(np.isfinite(v), v, 0.0)
        data[ch, ti[own], rows[sidx[own]], cols[sidx[own]]] = v[own]

    u10, v10 = _uv(f["wind10_speed_kmh"].to_numpy(), f["wind10_dir_deg"].to_numpy())
    labels = np.full((2, n_t, len(lab)), np.nan)
    lpos = {i: k for k, i in enumerate(lab)}
    for r in np.flatnonzero(np.isin(sidx, lab)):
        k = lpos[sidx[r]]
        labels[0, ti[r], k] = u10[r]
        labels[1, ti[r], k] = v10[r]
    mask = np.isfinite(labels).all(axis=0)
    labels[:, ~mask] = np.nan
    label_stations = [LabelStation(ids[i], placed[i].lat, placed[i].lon, int(rows[i]), int(cols[i]))
                      for i in lab]
    if not np.isfinite(data).all():
        raise InputError("non-finite values in assembled cube")
    return FeatureCube(data, times, grid, label_stations, labels, np.broadcast_to(mask, labels.shape).copy())


def _uv(speed, direction):
    ok = np.isfinite(speed) & np.isfinite(direction)
    u = np.full(speed.shape, np.nan)
    v = np.full(speed.shape, np.nan)
    if ok.any():
        u[ok], v[ok] = wind_to_uv(speed[ok], direction[ok])
    return u, v


# train/test split


def split_train_test(times) -> np.ndarray:
    """Boolean array, True where a timestamp is in the last five UTC calendar days of its month."""
    idx = pd.DatetimeIndex(np.asarray(times, dtype="datetime64[s]"))
    return np.asarray(idx.day > idx.days_in_month - 5)


def expected_test_fraction(year: int) -> float:
    """Month-averaged test share of a whole year, from month lengths alone."""
    return sum(5 / calendar.monthrange(year, m)[1] for m in range(1, 13)) / 12


# windows


@dataclass(frozen=True)
class WindowConfig:
    D: int = 192
    F: int = 16
    M: int = 16
    S: int = 1

    def __post_init__(self):
        for k in ("D", "F", "M", "S"):
            if int(getattr(self, k)) <= 0:
                raise InputError(f"window {k} must be positive, got {getattr(self, k)}")

    @property
    def span(self):
        return self.D + self.F + self.M

    @property
    def length(self):
        return self.D + self.F

    @property
    def issue_index(self):
        """Local index of the last observed tick."""
        return self.D - 1

    def y_horizons(self):
        """Horizon in steps of each y index relative to the issue tick (may be <= 0)."""
        return self.M + np.arange(self.length) - self.issue_index

    def eval_slice(self):
        """Slice of y indices with positive horizon."""
        return slice(self.D - self.M, self.length)


@dataclass
class SampleWindow:
    x: np.ndarray
    y: np.ndarray
    label_mask: np.ndarray
    t0: np.datetime64
    start: int


def candidate_starts(n_times: int, cfg: WindowConfig) -> np.ndarray:
    return np.arange(0, max(n_times - cfg.span + 1, 0), cfg.S)


class SampleSet(Sequence):
    """Lazily materialised windows of one subset of a cube."""

    def __init__(self, cube: FeatureCube, cfg: WindowConfig, starts, subset: str, dtype=np.float32):
        self.cube, self.cfg, self.subset = cube, cfg, subset
        self.starts = np.asarray(starts, dtype=np.int64)
        self.dtype = np.dtype(dtype)
        self._rows = np.array([s.row for s in cube.label_stations], dtype=np.int64)
        self._cols = np.array([s.col for s in cube.label_stations], dtype=np.int64)

    def __len__(self):
        return self.starts.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        s = int(self.starts[i])
        x, y, m = self.batch([i])
        return SampleWindow(x[0], y[0], m[0], self.cube.times[s], s)

    def batch(self, indices):
        """Stacked ``(x, y, mask)`` arrays for the given sample indices."""
        cfg, cube = self.cfg, self.cube
        starts = self.starts[np.asarray(indices, dtype=np.int64)]
        L = cfg.length
        h, w = cube.grid.shape
        b = starts.size
        x = np.empty((b, N_FEATURES, L, h, w), dtype=self.dtype)
        y = np.zeros((b, 2, L, h, w), dtype=self.dtype)
        m = np.zeros((b, 2, L, h, w), dtype=bool)
        for k, s in enumerate(starts):
            x[k] = cube.data[:, s:s + L]
            x[k, list(OBS_CHANNELS), cfg.D:] = 0
            lab = cube.labels[:, s + cfg.M:s + cfg.M + L]
            msk = cube.label_mask[:, s + cfg.M:s + cfg.M + L]
            y[k][:, :, self._rows, self._cols] = np.where(msk, lab, 0.0)
            m[k][:, :, self._rows, self._cols] = msk
        return x, y, m

    def issue_times(self):
        return self.cube.times[self.starts + self.cfg.issue_index]


def make_samples(cube: FeatureCube, cfg: WindowConfig, subset: str = "train", dtype=np.float32) -> SampleSet:
    """Windows whose spans satisfy the split rule for ``subset`` (``train``, ``test`` or ``all``)."""
    if subset not in ("train", "test", "all"):
        raise InputError(f"subset must be train, test or all, got {subset!r}")
    starts = candidate_starts(cube.n_times, cfg)
    if starts.size == 0:
        logger.warning("cube of %d ticks is shorter than one sample span of %d", cube.n_times, cfg.span)
        return SampleSet(cube, cfg, starts, subset, dtype)
    if subset != "all":
        test = split_train_test(cube.times).astype(np.int64)
        csum = np.concatenate([[0], np.cumsum(test)])
        if subset == "test":
            lo, hi = starts + cfg.D, starts + cfg.span
            keep = csum[hi] - csum[lo] == hi - lo
        else:
            keep = csum[starts + cfg.span] - csum[starts] == 0
        starts = starts[keep]
    return SampleSet(cube, cfg, starts, subset, dtype)


# binary container


def _header(cube: FeatureCube):
    return {
        "dims": list(cube.data.shape),
        "feature_names": list(cube.feature_names),
        "start": str(cube.times[0]) + "Z" if cube.n_times else None,
        "step_seconds": int(STEP / np.timedelta64(1, "s")),
        "grid": cube.grid.spec.to_dict(),
        "label_stations": [s.__dict__ for s in cube.label_stations],
        "dtype": "<f4",
    }


def write_cube(cube: FeatureCube, path):
    """Write ``cube`` atomically; floats are stored as little-endian 32-bit."""
    path = Path(path)
    head = json.dumps(_header(cube), sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cube.labels, dtype="<f4").tobytes())
        fh.write(np.packbits(cube.label_mask.ravel(), bitorder="little").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def read_cube(path) -> FeatureCube:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise FormatError(f"{path}: file too short for a cube header")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported cube version {version}")
    pos = _PREAMBLE.size
    try:
        head = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    pos += hlen
    nf, nt, h, w = head["dims"]
    ns = len(head["label_stations"])
    n_data, n_lab = nf * nt * h * w, 2 * nt * ns
    n_bits = (n_lab + 7) // 8
    if len(raw) != pos + 4 * (n_data + n_lab) + n_bits:
        raise FormatError(f"{path}: expected {pos + 4 * (n_data + n_lab) + n_bits} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=n_data, offset=pos).reshape(nf, nt, h, w)
    pos += 4 * n_data
    labels = np.frombuffer(raw, dtype="<f4", count=n_lab, offset=pos).reshape(2, nt, ns)
    pos += 4 * n_lab
    bits = np.frombuffer(raw, dtype=np.uint8, count=n_bits, offset=pos)
    mask = np.unpackbits(bits, count=n_lab, bitorder="little").astype(bool).reshape(2, nt, ns)
    grid = make_grid(GridSpec(**head["grid"]))
    if (h, w) != grid.shape:
        raise FormatError(f"{path}: grid {grid.shape} disagrees with dims {(h, w)}")
    start = np.datetime64(head["start"].rstrip("Z"), "s") if head["start"] else np.datetime64(0, "s")
    times = start + np.arange(nt) * np.timedelta64(head["step_seconds"], "s")
    stations = [LabelStation(**s) for s in head["label_stations"]]
    return FeatureCube(data.astype(np.float32), times, grid, stations, labels.astype(np.float32), mask,
                       tuple(head["feature_names"]))


__all__ = ["FEATURE_NAMES", "OBS_CHANNELS", "FeatureCube", "LabelStation", "SampleSet", "SampleWindow",
           "StationMeta", "WindowConfig", "assemble_cube", "candidate_starts", "make_samples", "read_cube",
           "regrid_coarse", "split_train_test", "write_cube", "expected_test_fraction"]

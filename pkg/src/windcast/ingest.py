"""File ingestion, wind vector conversion, time features and data corrections.

Wind directions follow the meteorological convention (the bearing the wind
blows *from*, 0 = north, 90 = east); ``u`` is eastward and ``v`` northward.
Missing observation values are carried as NaN until cube assembly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from windcast.errors import InputError, SchemaError
from windcast.geogrid import TimeSeriesField, grid_from_centres

logger = logging.getLogger(__name__)

STEP = np.timedelta64(15, "m")

CATALOG_COLUMNS = ["station_id", "lat", "lon", "has_10m"]
OBS_COLUMNS = ["station_id", "timestamp", "temp_c", "humidity_pct", "wind3_speed_kmh", "wind3_dir_deg"]
OBS_OPTIONAL = ["wind10_speed_kmh", "wind10_dir_deg"]
CORRECTION_COLUMNS = ["station_id", "field", "rotation_deg", "drop_labels", "active_from", "active_to"]
DEM_COLUMNS = ["lat", "lon", "elevation_m"]


# wind vectors


def wind_to_uv(speed, direction):
    """Speed and FROM-direction (degrees) to eastward/northward components."""
    speed = np.asarray(speed, dtype=np.float64)
    if np.any(speed < 0):
        raise InputError("wind speed must be non-negative")
    rad = np.deg2rad(np.asarray(direction, dtype=np.float64))
    u = -speed * np.sin(rad)
    v = -speed * np.cos(rad)
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def uv_to_wind(u, v):
    """Inverse of :func:`wind_to_uv`; calm (0, 0) maps to direction 0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    speed = np.hypot(u, v)
    direction = np.mod(np.rad2deg(np.arctan2(-u, -v)), 360.0)
    direction = np.where(direction >= 360.0, direction - 360.0, direction)
    direction = np.where(speed == 0, 0.0, direction)
    if speed.ndim == 0:
        return float(speed), float(direction)
    return speed, direction


# time features


@dataclass(frozen=True)
class TimeFeatures:
    sin_month: float
    cos_month: float
    sin_hour: float
    cos_hour: float
    sin_doy: float
    cos_doy: float

    def as_tuple(self):
        return (self.sin_month, self.cos_month, self.sin_hour, self.cos_hour, self.sin_doy, self.cos_doy)


def time_feature_array(times):
    """``(n, 6)`` array of month/hour/day-of-year sine and cosine pairs."""
    idx = pd.DatetimeIndex(np.asarray(times, dtype="datetime64[s]"))
    month = 2 * np.pi * (idx.month.to_numpy() - 1) / 12
    hour = 2 * np.pi * (idx.hour.to_numpy() + idx.minute.to_numpy() / 60) / 24
    doy = 2 * np.pi * (idx.dayofyear.to_numpy() - 1) / 365.25
    return np.column_stack([np.sin(month), np.cos(month), np.sin(hour), np.cos(hour),
                            np.sin(doy), np.cos(doy)])


def time_features(timestamp) -> TimeFeatures:
    row = time_feature_array([np.datetime64(pd.Timestamp(timestamp).tz_localize(None), "s")])[0]
    return TimeFeatures(*(float(x) for x in row))


# records


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    lat: float
    lon: float
    has_10m_labels: bool = False


@dataclass
class ObservationRecord:
    station_id: str
    timestamp: np.datetime64
    temperature: float | None = None
    humidity: float | None = None
    wind3_speed: float | None = None
    wind3_dir: float | None = None
    wind10_speed: float | None = None
    wind10_dir: float | None = None


_RECORD_TO_COLUMN = {
    "temperature": "temp_c",
    "humidity": "humidity_pct",
    "wind3_speed": "wind3_speed_kmh",
    "wind3_dir": "wind3_dir_deg",
    "wind10_speed": "wind10_speed_kmh",
    "wind10_dir": "wind10_dir_deg",
}
_VALUE_COLUMNS = list(_RECORD_TO_COLUMN.values())


class Observations:
    """Columnar observation table; NaN marks an absent value.

    Columns: ``station_id``, ``timestamp`` (datetime64[s]) and the six value
    columns of ``observations.csv``.
    """

    def __init__(self, frame: pd.DataFrame):
        frame = frame.copy()
        for col in _VALUE_COLUMNS:
            if col not in frame:
                frame[col] = np.nan
            frame[col] = frame[col].astype(np.float64)
        frame["station_id"] = frame["station_id"].astype(str)
        frame["timestamp"] = pd.to_datetime(frame["timestamp"]).astype("datetime64[s]")
        self.frame = frame[["station_id", "timestamp"] + _VALUE_COLUMNS].reset_index(drop=True)

    @classmethod
    def from_records(cls, records):
        rows = []
        for r in records:
            row = {"station_id": r.station_id, "timestamp": np.datetime64(r.timestamp, "s")}
            for attr, col in _RECORD_TO_COLUMN.items():
                val = getattr(r, attr)
                row[col] = np.nan if val is None else float(val)
            rows.append(row)
        if not rows:
            return cls(pd.DataFrame(columns=["station_id", "timestamp"] + _VALUE_COLUMNS))
        return cls(pd.DataFrame(rows))

    def records(self):
        out = []
        for row in self.frame.itertuples(index=False):
            vals = {attr: (None if pd.isna(getattr(row, col)) else float(getattr(row, col)))
                    for attr, col in _RECORD_TO_COLUMN.items()}
            out.append(ObservationRecord(row.station_id, np.datetime64(row.timestamp, "s"), **vals))
        return out

    def __len__(self):
        return len(self.frame)

    def equals(self, other):
        return self.frame.equals(other.frame)


@dataclass(frozen=True)
class CorrectionRule:
    """Rotate a direction field or drop 10 m labels for one station over ``[active_from, active_to)``."""

    station_id: str
    active_from: np.datetime64
    active_to: np.datetime64
    field: str | None = None
    rotation_deg: float = 0.0
    drop_labels: bool = False

    def __post_init__(self):
        if not self.active_from < self.active_to:
            raise InputError(f"correction for {self.station_id}: active_from must precede active_to")
        if self.drop_labels:
            return
        if self.field not in ("wind3_dir", "wind10_dir"):
            raise InputError(f"correction for {self.station_id}: field must be wind3_dir or wind10_dir, "
                             f"got {self.field!r}")


@dataclass
class Reject:
    line: int
    reason: str


@dataclass
class ParseResult:
    records: object
    rejects: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def apply_corrections(obs: Observations, rules, known_stations=None) -> Observations:
    """Apply rotation and label-drop rules; rules for unknown stations are skipped."""
    if not rules:
        return obs
    frame = obs.frame.copy()
    present = set(frame["station_id"]) if known_stations is None else set(known_stations)
    ts = frame["timestamp"].to_numpy()
    for rule in rules:
        if rule.station_id not in present:
            logger.warning("correction rule for unknown station %s skipped", rule.station_id)
            continue
        sel = ((frame["station_id"] == rule.station_id).to_numpy()
               & (ts >= rule.active_from) & (ts < rule.active_to))
        if rule.drop_labels:
            frame.loc[sel, ["wind10_speed_kmh", "wind10_dir_deg"]] = np.nan
        else:
            col = _RECORD_TO_COLUMN[rule.field]
            frame.loc[sel, col] = np.mod(frame.loc[sel, col] + rule.rotation_deg, 360.0)
    return Observations(frame)


# CSV parsing


def _read_csv(path, required):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty file, expected header {','.join(required)}") from None
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")
    df["_line"] = np.arange(len(df)) + 2
    return df


def _numeric(df, col, reasons, required=True):
    raw = df[col].str.strip()
    vals = pd.to_numeric(raw, errors="coerce")
    empty = raw == ""
    bad = vals.isna() & ~empty
    if required:
        bad |= empty
    for line in df.loc[bad, "_line"]:
        reasons.setdefault(int(line), f"unparseable {col}")
    return vals.astype(np.float64)


def _timestamps(df, col, reasons):
    raw = df[col].str.strip()
    ts = pd.to_datetime(raw, errors="coerce", utc=True, format="ISO8601")
    for line in df.loc[ts.isna(), "_line"]:
        reasons.setdefault(int(line), f"unparseable {col}")
    return ts.dt.tz_localize(None).astype("datetime64[s]")


def _finish(df, reasons):
    rejects = [Reject(line, reason) for line, reason in sorted(reasons.items())]
    keep = ~df["_line"].isin(list(reasons))
    return keep.to_numpy(), rejects


def parse_catalog(path) -> ParseResult:
    df = _read_csv(path, CATALOG_COLUMNS)
    reasons = {}
    lat = _numeric(df, "lat", reasons)
    lon = _numeric(df, "lon", reasons)
    flag = df["has_10m"].str.strip()
    for line in df.loc[~flag.isin(["0", "1"]), "_line"]:
        reasons.setdefault(int(line), "has_10m must be 0 or 1")
    ids = df["station_id"].str.strip()
    for line in df.loc[ids == "", "_line"]:
        reasons.setdefault(int(line), "empty station_id")
    for line in df.loc[ids.duplicated() & (ids != ""), "_line"]:
        reasons.setdefault(int(line), "duplicate station_id")
    keep, rejects = _finish(df, reasons)
    stations = [StationMeta(s, float(a), float(o), f == "1")
                for s, a, o, f, k in zip(ids, lat, lon, flag, keep) if k]
    return ParseResult(stations, rejects)


def _direction(df, col, reasons, warnings, required):
    vals = _numeric(df, col, reasons, required)
    out_of_range = (vals < 0) | (vals > 360)
    for line in df.loc[out_of_range, "_line"]:
        reasons.setdefault(int(line), f"{col} outside [0, 360]")
    wrap = vals == 360
    for line in df.loc[wrap, "_line"]:
        warnings.append(f"line {int(line)}: {col} 360 normalised to 0")
    return vals.where(~wrap, 0.0)


def _speed(df, col, reasons, required):
    vals = _numeric(df, col, reasons, required)
    for line in df.loc[vals < 0, "_line"]:
        reasons.setdefault(int(line), f"negative {col}")
    return vals


def parse_observations(path) -> ParseResult:
    """Parse ``observations.csv``. Only station_id and timestamp are mandatory per row."""
    df = _read_csv(path, OBS_COLUMNS)
    reasons, warnings = {}, []
    ids = df["station_id"].str.strip()
    for line in df.loc[ids == "", "_line"]:
        reasons.setdefault(int(line), "empty station_id")
    ts = _timestamps(df, "timestamp", reasons)
    aligned = ts.isna() | ((ts - ts.dt.floor("15min")) == pd.Timedelta(0))
    for line in df.loc[~aligned, "_line"]:
        reasons.setdefault(int(line), "timestamp not on the 15-minute grid")
    out = pd.DataFrame({"station_id": ids, "timestamp": ts})
    out["temp_c"] = _numeric(df, "temp_c", reasons, required=False)
    out["humidity_pct"] = _numeric(df, "humidity_pct", reasons, required=False)
    out["wind3_speed_kmh"] = _speed(df, "wind3_speed_kmh", reasons, required=False)
    out["wind3_dir_deg"] = _direction(df, "wind3_dir_deg", reasons, warnings, required=False)
    for col in OBS_OPTIONAL:
        if col not in df:
            out[col] = np.nan
    if "wind10_speed_kmh" in df:
        out["wind10_speed_kmh"] = _speed(df, "wind10_speed_kmh", reasons, required=False)
    if "wind10_dir_deg" in df:
        out["wind10_dir_deg"] = _direction(df, "wind10_dir_deg", reasons, warnings, required=False)
    dup = out.duplicated(["station_id", "timestamp"]) & ~df["_line"].isin(list(reasons))
    for line in df.loc[dup, "_line"]:
        reasons.setdefault(int(line), "duplicate station/timestamp")
    keep, rejects = _finish(df, reasons)
    for w in warnings:
        logger.warning(w)
    return ParseResult(Observations(out[keep]), rejects, warnings)


def _flag(text):
    return text.strip().lower() in ("1", "true", "yes")


def parse_corrections(path) -> ParseResult:
    df = _read_csv(path, CORRECTION_COLUMNS)
    rules, rejects = [], []
    for row in df.to_dict("records"):
        try:
            rot = row["rotation_deg"].strip()
            rules.append(CorrectionRule(
                station_id=row["station_id"].strip(),
                field=row["field"].strip() or None,
                rotation_deg=float(rot) if rot else 0.0,
                drop_labels=_flag(row["drop_labels"]),
                active_from=parse_time(row["active_from"].strip()),
                active_to=parse_time(row["active_to"].strip()),
            ))
        except (ValueError, InputError) as exc:
            rejects.append(Reject(int(row["_line"]), str(exc)))
    return ParseResult(rules, rejects)


def parse_dem(path) -> ParseResult:
    df = _read_csv(path, DEM_COLUMNS)
    reasons = {}
    cols = [_numeric(df, c, reasons) for c in DEM_COLUMNS]
    keep, rejects = _finish(df, reasons)
    pts = np.column_stack([c.to_numpy() for c in cols])[keep]
    return ParseResult(pts.reshape(-1, 3), rejects)


def parse_coarse(path) -> ParseResult:
    """Parse a single-variable coarse field file into a :class:`TimeSeriesField`.

    The variable name is the fourth column's header; it is stored in
    ``result.records.units``.
    """
    df = _read_csv(path, ["timestamp", "lat", "lon"])
    extra = [c for c in df.columns if c not in ("timestamp", "lat", "lon", "_line")]
    if len(extra) != 1:
        raise SchemaError(f"{path}: expected exactly one variable column, got {extra}")
    var = extra[0]
    reasons = {}
    ts = _timestamps(df, "timestamp", reasons)
    lat = _numeric(df, "lat", reasons)
    lon = _numeric(df, "lon", reasons)
    val = _numeric(df, var, reasons)
    keep, rejects = _finish(df, reasons)
    ts, lat, lon, val = ts[keep], lat[keep].to_numpy(), lon[keep].to_numpy(), val[keep].to_numpy()
    if len(val) == 0:
        raise InputError(f"{path}: no valid rows")
    grid = grid_from_centres(lat, lon)
    times = np.unique(ts.to_numpy().astype("datetime64[s]"))
    ti = np.searchsorted(times, ts.to_numpy().astype("datetime64[s]"))
    ri = np.argmin(np.abs(lat[:, None] - grid.lat[None, :]), axis=1)
    ci = np.argmin(np.abs(lon[:, None] - grid.lon[None, :]), axis=1)
    values = np.full((times.size,) + grid.shape, np.nan)
    values[ti, ri, ci] = val
    if np.isnan(values).any():
        k = int(np.argmax(np.isnan(values).reshape(times.size, -1).any(axis=1)))
        raise InputError(f"{path}: incomplete lattice at {times[k]}")
    return ParseResult(TimeSeriesField(times, values, grid, units=var), rejects)


def write_csv_atomic(frame: pd.DataFrame, path, float_format=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    frame.to_csv(tmp, index=False, float_format=float_format, lineterminator="\n")
    tmp.replace(path)


def iso(ts):
    """ISO-8601 UTC text for a datetime64."""
    return str(np.datetime64(ts, "s")) + "Z"


def parse_time(text):
    """ISO-8601 text (naive means UTC) to datetime64[s]."""
    t = pd.Timestamp(text)
    if t.tzinfo is not None:
        t = t.tz_convert("UTC").tz_localize(None)
    return np.datetime64(t, "s")


def check_time_step(times):
    d = np.diff(np.asarray(times, dtype="datetime64[s]"))
    return bool(np.all(d == STEP))

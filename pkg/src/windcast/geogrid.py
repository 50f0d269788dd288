"""Target cell lattice and spatial/temporal regridding.

Rows run north to south (row 0 is the northernmost), columns west to east.
Distances are Euclidean in raw degrees. Every nearest-neighbour search breaks
ties toward the lower row, then the lower column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from windcast.errors import ConfigError, InputError, OutOfDomainError

logger = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Bounds and resolution of a regular lat/lon lattice.

    ``lat_start`` is the northern edge and ``lat_end`` the southern edge.
    """

    lat_start: float = -32.0
    lat_end: float = -35.4
    lon_start: float = 115.0
    lon_end: float = 118.4
    cell_deg: float = 0.1

    def _count(self, extent, axis):
        if self.cell_deg <= 0:
            raise ConfigError(f"cell_deg must be positive, got {self.cell_deg}")
        if extent <= 0:
            raise ConfigError(f"{axis} extent must be positive, got {extent}")
        n = round(extent / self.cell_deg)
        if n < 1 or abs(n * self.cell_deg - extent) > _TOL:
            raise ConfigError(f"{axis} extent {extent} is not a multiple of cell_deg {self.cell_deg}")
        return int(n)

    @property
    def n_lat(self):
        return self._count(self.lat_start - self.lat_end, "lat")

    @property
    def n_lon(self):
        return self._count(self.lon_end - self.lon_start, "lon")

    def to_dict(self):
        return {"lat_start": self.lat_start, "lat_end": self.lat_end,
                "lon_start": self.lon_start, "lon_end": self.lon_end, "cell_deg": self.cell_deg}


class CellIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class Grid:
    spec: GridSpec
    lat: np.ndarray = field(repr=False)  # centre latitudes, descending
    lon: np.ndarray = field(repr=False)  # centre longitudes, ascending

    @property
    def shape(self):
        return (self.lat.size, self.lon.size)

    @property
    def n_lat(self):
        return self.lat.size

    @property
    def n_lon(self):
        return self.lon.size

    def centre(self, row, col):
        return float(self.lat[row]), float(self.lon[col])

    def contains(self, lat, lon):
        s = self.spec
        return (s.lat_end - _TOL <= lat <= s.lat_start + _TOL
                and s.lon_start - _TOL <= lon <= s.lon_end + _TOL)


def make_grid(spec: GridSpec) -> Grid:
    n_lat, n_lon = spec.n_lat, spec.n_lon
    lat = spec.lat_start - (np.arange(n_lat) + 0.5) * spec.cell_deg
    lon = spec.lon_start + (np.arange(n_lon) + 0.5) * spec.cell_deg
    return Grid(spec, lat, lon)


def grid_from_centres(lats, lons) -> Grid:
    """Recover the regular lattice whose cell centres are the given coordinates."""
    lats = np.unique(np.asarray(lats, dtype=np.float64))[::-1]
    lons = np.unique(np.asarray(lons, dtype=np.float64))
    if lats.size < 2 or lons.size < 2:
        raise ConfigError("need at least 2 distinct latitudes and longitudes to infer a grid")
    dlat, dlon = -np.diff(lats), np.diff(lons)
    cell = float(np.round(np.median(np.concatenate([dlat, dlon])), 9))
    if np.max(np.abs(dlat - cell)) > 1e-6 or np.max(np.abs(dlon - cell)) > 1e-6:
        raise ConfigError("coordinates are not a regular lattice with equal spacing on both axes")
    spec = GridSpec(lat_start=float(lats[0] + cell / 2), lat_end=float(lats[-1] - cell / 2),
                    lon_start=float(lons[0] - cell / 2), lon_end=float(lons[-1] + cell / 2),
                    cell_deg=cell)
    return Grid(spec, lats, lons)


def _nearest_index(values, centres):
    """Index of the nearest centre for each value; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    step = centres[1] - centres[0] if centres.size > 1 else 1.0
    guess = np.rint((values - centres[0]) / step).astype(np.int64)
    best = np.clip(guess - 1, 0, centres.size - 1)
    best_d = (values - centres[best]) ** 2
    for off in (0, 1):
        cand = np.clip(guess + off, 0, centres.size - 1)
        d = (values - centres[cand]) ** 2
        better = (d < best_d) | ((d == best_d) & (cand < best))
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best


def bin_points(lats, lons, grid: Grid):
    """Vectorised :func:`bin_point`; returns ``(rows, cols)`` integer arrays."""
    lats = np.atleast_1d(np.asarray(lats, dtype=np.float64))
    lons = np.atleast_1d(np.asarray(lons, dtype=np.float64))
    s = grid.spec
    bad = ((lats < s.lat_end - _TOL) | (lats > s.lat_start + _TOL)
           | (lons < s.lon_start - _TOL) | (lons > s.lon_end + _TOL) | ~np.isfinite(lats + lons))
    if bad.any():
        i = int(np.argmax(bad))
        raise OutOfDomainError(f"point ({lats[i]}, {lons[i]}) lies outside the grid bounds",
                               coords=(float(lats[i]), float(lons[i])))
    return _nearest_index(lats, grid.lat), _nearest_index(lons, grid.lon)


def bin_point(lat: float, lon: float, grid: Grid) -> CellIndex:
    """Cell whose centre is nearest to ``(lat, lon)``."""
    rows, cols = bin_points([lat], [lon], grid)
    return CellIndex(int(rows[0]), int(cols[0]))


@dataclass
class GriddedField:
    values: np.ndarray
    valid_mask: np.ndarray
    units: str = ""

    def __post_init__(self):
        if self.values.shape != self.valid_mask.shape:
            raise InputError(f"values {self.values.shape} and mask {self.valid_mask.shape} differ")


def bin_terrain(dem_points, grid: Grid) -> GriddedField:
    """Elevation of the DEM point nearest each cell centre.

    ``dem_points`` is an ``(n, 3)`` array-like of ``(lat, lon, elevation)``.
    Equidistant DEM points resolve to the one listed first.
    """
    pts = np.asarray(dem_points, dtype=np.float64)
    if pts.size == 0:
        raise InputError("bin_terrain needs at least one DEM point")
    pts = pts.reshape(-1, 3)
    clat, clon = np.meshgrid(grid.lat, grid.lon, indexing="ij")
    centres = np.column_stack([clat.ravel(), clon.ravel()])
    k = min(8, len(pts))
    tree = cKDTree(pts[:, :2])
    _, idx = tree.query(centres, k=k)
    idx = idx.reshape(len(centres), k)
    d2 = ((pts[idx, 0] - centres[:, :1]) ** 2 + (pts[idx, 1] - centres[:, 1:]) ** 2)
    # exact re-ranking: smallest squared distance, then smallest input index
    order = np.lexsort((idx, d2), axis=-1)
    chosen = np.take_along_axis(idx, order[:, :1], axis=1)[:, 0]
    values = pts[chosen, 2].reshape(grid.shape)
    return GriddedField(values, np.ones(grid.shape, dtype=bool), units="m")


def _axis_weights(coords, centres):
    """Lower bracket index and upper weight for linear interpolation along one axis.

    Coordinates outside the centre hull are clamped to its edge.
    """
    ascending = centres[-1] > centres[0]
    c = centres if ascending else centres[::-1]
    x = np.clip(coords, c[0], c[-1])
    i0 = np.clip(np.searchsorted(c, x, side="right") - 1, 0, c.size - 2)
    w = (x - c[i0]) / (c[i0 + 1] - c[i0])
    if not ascending:
        # map back to the descending storage order
        n = centres.size
        i0, w = n - 2 - i0, 1.0 - w
    return i0, w


def bilinear_weights(coarse: Grid, target: Grid):
    if coarse.n_lat < 2 or coarse.n_lon < 2:
        raise ConfigError(f"coarse grid {coarse.shape} is smaller than 2x2")
    return _axis_weights(target.lat, coarse.lat), _axis_weights(target.lon, coarse.lon)


def _apply_bilinear(values, weights):
    (r0, wr), (c0, wc) = weights
    v = np.asarray(values, dtype=np.float64)
    r0i, r1i = r0[:, None], r0[:, None] + 1
    c0i, c1i = c0[None, :], c0[None, :] + 1
    wr_, wc_ = wr[:, None], wc[None, :]
    return ((1 - wr_) * (1 - wc_) * v[..., r0i, c0i] + (1 - wr_) * wc_ * v[..., r0i, c1i]
            + wr_ * (1 - wc_) * v[..., r1i, c0i] + wr_ * wc_ * v[..., r1i, c1i])


def interp_bilinear(coarse: GriddedField, coarse_grid: Grid, target: Grid) -> GriddedField:
    """Bilinear interpolation of a coarse field onto the target cell centres."""
    if coarse.values.shape != coarse_grid.shape:
        raise InputError(f"field shape {coarse.values.shape} does not match grid {coarse_grid.shape}")
    out = _apply_bilinear(coarse.values, bilinear_weights(coarse_grid, target))
    return GriddedField(out, np.ones(target.shape, dtype=bool), coarse.units)


@dataclass
class TimeSeriesField:
    """Frames ``values[k]`` valid at ``times[k]`` on ``grid``."""

    times: np.ndarray  # datetime64[s], strictly ascending and uniform
    values: np.ndarray  # (n_times, n_lat, n_lon)
    grid: Grid | None = None
    units: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="datetime64[s]")
        if self.values.shape[0] != self.times.size:
            raise InputError(f"{self.values.shape[0]} frames but {self.times.size} timestamps")
        if self.times.size > 1:
            d = np.diff(self.times)
            if np.any(d <= np.timedelta64(0, "s")) or np.any(d != d[0]):
                raise InputError("timestamps must be strictly ascending with a uniform step")

    @property
    def step(self):
        return self.times[1] - self.times[0]

    def frame(self, k) -> GriddedField:
        return GriddedField(self.values[k], np.ones(self.values.shape[1:], dtype=bool), self.units)


def interp_bilinear_series(series: TimeSeriesField, target: Grid) -> TimeSeriesField:
    """Apply :func:`interp_bilinear` to every frame of a series."""
    out = _apply_bilinear(series.values, bilinear_weights(series.grid, target))
    return TimeSeriesField(series.times, out, target, series.units)


def resample_time_linear(series: TimeSeriesField, out_step=np.timedelta64(15, "m")) -> TimeSeriesField:
    """Per-cell linear interpolation onto a finer uniform time step."""
    if series.times.size < 2:
        raise InputError("temporal resampling needs at least 2 frames")
    out_step = np.timedelta64(out_step).astype("timedelta64[s]")
    in_step = series.step.astype("timedelta64[s]")
    if out_step <= np.timedelta64(0, "s") or in_step % out_step != np.timedelta64(0, "s"):
        raise ConfigError(f"output step {out_step} does not divide input step {in_step}")
    ratio = int(in_step // out_step)
    n_out = (series.times.size - 1) * ratio + 1
    times = series.times[0] + np.arange(n_out) * out_step
    k = np.minimum(np.arange(n_out) // ratio, series.times.size - 2)
    w = (np.arange(n_out) - k * ratio) / ratio
    v = np.asarray(series.values, dtype=np.float64)
    f0, f1 = v[k], v[k + 1]
    wb = w.reshape((-1,) + (1,) * (v.ndim - 1))
    out = (1 - wb) * f0 + wb * f1
    out = np.clip(out, np.minimum(f0, f1), np.maximum(f0, f1))
    return TimeSeriesField(times, out, series.grid, series.units)

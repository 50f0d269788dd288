"""Glue between on-disk inputs and the in-memory cube."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from windcast.errors import InputError
from windcast.featurecube import COARSE_NAMES, FeatureCube, assemble_cube, regrid_coarse
from windcast.geogrid import Grid, bin_terrain
from windcast.ingest import (
    STEP,
    apply_corrections,
    parse_catalog,
    parse_coarse,
    parse_corrections,
    parse_dem,
    parse_observations,
)

logger = logging.getLogger(__name__)


def _require(path: Path):
    if not path.is_file():
        raise InputError(f"missing input file: {path}")
    return path


def _report(name, result):
    for r in result.rejects:
        logger.warning("%s line %d rejected: %s", name, r.line, r.reason)
    return result.records


def build_cube_from_dir(data_dir, grid: Grid, corrections=None, time_range=None) -> FeatureCube:
    """Parse a directory of input CSVs and assemble the cube.

    The directory holds ``stations.csv``, ``observations.csv``, ``u10f.csv``,
    ``v10f.csv``, ``msl.csv`` and ``dem.csv``. The default time range is the
    observation span.
    """
    d = Path(data_dir)
    stations = _report("stations.csv", parse_catalog(_require(d / "stations.csv")))
    obs = _report("observations.csv", parse_observations(_require(d / "observations.csv")))
    if corrections is not None:
        rules = _report(str(corrections), parse_corrections(_require(Path(corrections))))
        obs = apply_corrections(obs, rules, {s.station_id for s in stations})
    coarse = {}
    for name in COARSE_NAMES:
        series = _report(f"{name}.csv", parse_coarse(_require(d / f"{name}.csv")))
        coarse[name] = regrid_coarse(series, grid)
    dem = bin_terrain(_report("dem.csv", parse_dem(_require(d / "dem.csv"))), grid)
    if time_range is None:
        if len(obs) == 0:
            raise InputError("no observations to define the time range")
        t = obs.frame["timestamp"].to_numpy().astype("datetime64[s]")
        time_range = (t.min(), t.max() + STEP)
    return assemble_cube(obs, stations, coarse, dem, grid, time_range)


def time_index(cube: FeatureCube, t) -> int:
    k = int(np.searchsorted(cube.times, np.datetime64(t, "s")))
    if k >= cube.n_times or cube.times[k] != np.datetime64(t, "s"):
        raise InputError(f"{t} is not a tick of the cube")
    return k

import json

import numpy as np
import pandas as pd
import pytest
import yaml

from windcast.cli import main
from windcast.config import RunConfig, from_dict, load_config, override
from windcast.errors import ConfigError
from windcast.featurecube import read_cube

TINY = {
    "grid": {"lat_start": -32.0, "lat_end": -32.6, "lon_start": 115.0, "lon_end": 115.6, "cell_deg": 0.1},
    "window": {"D": 8, "F": 4, "M": 4, "S": 2},
    "model": {"stem_channels": 4, "encoder_channels": [4, 8], "n_rssab": 1, "rssab_kernel": [3, 1, 1]},
    "train": {"batch_size": 16, "learning_rate": 0.01, "max_epochs": 3, "early_stop_patience": 5},
    "synth": {"days": 4, "start": "2022-01-25T00:00", "n_stations": 4, "n_label_stations": 2},
}


def write_config(tmp_path, **paths):
    cfg = dict(TINY, paths={"data_dir": str(tmp_path / "data"), "cube": str(tmp_path / "cube" / "cube.wcub"),
                            "checkpoint": str(tmp_path / "model" / "model.wabd"), **paths})
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def test_defaults_follow_reference_setup():
    cfg = RunConfig()
    assert (cfg.window.D, cfg.window.F, cfg.window.M, cfg.window.S) == (192, 16, 16, 1)
    assert (cfg.train.batch_size, cfg.train.learning_rate, cfg.train.max_epochs,
            cfg.train.early_stop_patience) == (64, 0.001, 200, 5)
    assert (cfg.grid.lat_start, cfg.grid.lat_end, cfg.grid.lon_start, cfg.grid.lon_end,
            cfg.grid.cell_deg) == (-32.0, -35.4, 115.0, 118.4, 0.1)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="window.Q"):
        from_dict({"window": {"Q": 3}})
    with pytest.raises(ConfigError, match="extras"):
        from_dict({"extras": {}})
    with pytest.raises(ConfigError):
        from_dict({"train": {"optimizer": "rmsprop"}})
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  widht: 3\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_config_dump_round_trip(tmp_path):
    cfg = override(from_dict(TINY), "train", seed=9)
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_usage_errors_name_the_token(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_eval_without_checkpoint_names_path(tmp_path, capsys):
    cfg = write_config(tmp_path)
    missing = tmp_path / "nowhere.wabd"
    assert main(["eval", "--config", cfg, "--checkpoint", str(missing), "--out", str(tmp_path / "e")]) == 1
    err = capsys.readouterr().err
    assert str(missing) in err and "missing input" in err


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "abed tiny model" in out


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    base = ["--config", cfg, "--seed", "3", "--threads", "1"]
    assert main(["synth", *base, "--out", str(tmp_path / "data")]) == 0
    assert main(["cube", "build", *base, "--out", str(tmp_path / "cube")]) == 0
    cube = read_cube(tmp_path / "cube" / "cube.wcub")
    assert cube.data.shape == (14, 4 * 96, 6, 6)
    assert main(["train", *base, "--out", str(tmp_path / "model")]) == 0
    log = pd.read_csv(tmp_path / "model" / "train_log.csv")
    assert list(log.columns) == ["epoch", "train_loss", "val_loss", "seconds"] and log.epoch.iloc[0] == 0
    assert json.loads((tmp_path / "model" / "metrics.json").read_text())["steps"] > 0
    assert main(["eval", *base, "--out", str(tmp_path / "eval")]) == 0
    rep = pd.read_csv(tmp_path / "eval" / "metrics.csv", dtype={"horizon_min": str})
    assert {"model", "ecmwf"} == set(rep.source)
    assert (rep[rep.metric == "MAE"].value >= 0).all()
    assert (tmp_path / "eval" / "oracle_metrics.json").is_file()
    echoed = yaml.safe_load((tmp_path / "eval" / "run_config.yaml").read_text())
    assert echoed["train"]["seed"] == 3 and echoed["window"]["D"] == 8
    assert main(["correlate", *base, "--out", str(tmp_path / "corr")]) == 0
    cmap = pd.read_csv(tmp_path / "corr" / "correlation_map.csv")
    assert set(cmap.horizon_min) == {30, 120} and cmap.station_id.nunique() == 4
    t0 = "2022-01-27T06:00"
    assert main(["predict", *base, "--t0", t0, "--horizon", "60", "--out", str(tmp_path / "pred")]) == 0
    fc = pd.read_csv(tmp_path / "pred" / "forecast.csv")
    assert sorted(set(fc.horizon_min)) == [15, 30, 45, 60] and len(fc) == 4 * 36
    assert main(["export-area", *base, "--t0", t0, "--out", str(tmp_path / "area")]) == 0
    area = pd.read_csv(tmp_path / "area" / "area_forecast.csv")
    assert len(area) == 36 and np.allclose(area.speed, np.hypot(area.u, area.v), atol=1e-6)
    assert main(["predict", *base, "--t0", t0, "--horizon", "50", "--out", str(tmp_path / "p2")]) == 1
    assert main(["predict", *base, "--t0", "2023-01-01T00:00", "--out", str(tmp_path / "p3")]) == 1


def test_window_mismatch_with_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    base = ["--config", cfg]
    assert main(["synth", *base, "--out", str(tmp_path / "data")]) == 0
    assert main(["cube", "build", *base, "--out", str(tmp_path / "cube")]) == 0
    assert main(["train", *base, "--out", str(tmp_path / "model")]) == 0
    other = dict(TINY, window={"D": 12, "F": 4, "M": 4, "S": 2},
                 paths=yaml.safe_load(open(cfg))["paths"])
    p = tmp_path / "other.yaml"
    p.write_text(yaml.safe_dump(other))
    assert main(["eval", "--config", str(p), "--out", str(tmp_path / "e")]) == 1

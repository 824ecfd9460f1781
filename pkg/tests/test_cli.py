"""End-to-end tests of the command-line pipeline on a reduced-size world."""

import shutil

import numpy as np
import pandas as pd
import pytest

from pitloc.cli import DEFAULTS, main, resolve_config
from pitloc.config import ConfigError, parse_config_text
from pitloc.core import read_pose_table

TINY = """
extent = 400
pitch = 100
trips = 5
landmarks = 120
n_queries = 20
rings = 16
azimuth_steps = 90
hidden = 32
output_dim = 32
train_max_iterations = 20
train_cache_refresh_interval = 10
"""

PIPELINE = ("synth", "train", "build-db", "eval", "analyze")


def run_pipeline(workdir, cfg_path, workers=2):
    for cmd in PIPELINE:
        assert main([cmd, "--config", str(cfg_path), "--set", f"workdir={workdir}", "--workers", str(workers)]) == 0


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    run_pipeline(root / "run", cfg)
    return root / "run", cfg


class TestConfig:
    def test_defaults_resolve(self):
        cfg = resolve_config(None, None, [])
        assert cfg == DEFAULTS
        assert cfg["tau"] == 20.0 and cfg["k"] == 5 and cfg["failure_threshold"] == 2.0

    def test_precedence(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed = 3\ntau = 10\n")
        cfg = resolve_config(str(tmp_path / "c.cfg"), 4, ["tau=12.5"])
        assert cfg["seed"] == 4 and cfg["tau"] == 12.5

    def test_bad_set(self):
        with pytest.raises(ConfigError):
            resolve_config(None, None, ["tau"])
        with pytest.raises(ConfigError):
            resolve_config(None, None, ["write_clouds=some"])


class TestPipeline:
    def test_outputs_exist(self, run):
        wd, _ = run
        for name in ("world.pitw", "poses.csv", "gps.csv", "metadata.csv", "features.npy", "feature_ids.npy",
                     "model.pitm", "model_log.csv", "database.pitd", "analysis/correlations.csv",
                     "analysis/bins_lidar_occlusion_pct.csv"):
            assert (wd / name).exists(), name
        for m in DEFAULTS["methods"]:
            assert (wd / "eval" / m / "report.csv").exists()
        for cmd in PIPELINE:
            sidecar = parse_config_text((wd / f"{cmd}.config").read_text())
            assert sidecar["extent"] == "400.0" and sidecar["workdir"] == str(wd)

    def test_only_query_clouds_written(self, run):
        wd, _ = run
        report = pd.read_csv(wd / "eval" / "exhaustive" / "report.csv")
        written = sorted(int(p.stem) for p in (wd / "clouds").glob("*.pitc"))
        assert written == sorted(report["query_id"])

    def test_gps_restriction_bounds(self, run):
        wd, _ = run
        rep = pd.read_csv(wd / "eval" / "gps" / "report.csv")
        assert len(rep) == 20
        # predicted pose lies within tau of the fix; the fix is within gps_error of the truth
        assert np.all(rep["error_m"] <= DEFAULTS["tau"] + rep["gps_error_m"] + 1e-9)

    def test_query_with_gps(self, run, capsys):
        wd, cfg = run
        rid = int(pd.read_csv(wd / "eval" / "gps" / "report.csv")["query_id"].iloc[0])
        pose = next(p for p in read_pose_table(wd / "poses.csv") if p.reading_id == rid)
        capsys.readouterr()
        code = main(["query", str(wd / "clouds" / f"{rid}.pitc"), "--gps", f"{pose.x},{pose.y}",
                     "--config", str(cfg), "--set", f"workdir={wd}"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "rank,reading_id,trip_id,x,y,heading,distance"
        assert len(lines) == 1 + DEFAULTS["k"]
        for line in lines[1:]:
            x, y = (float(v) for v in line.split(",")[3:5])
            assert np.hypot(x - pose.x, y - pose.y) <= DEFAULTS["tau"]

    def test_query_no_candidates(self, run, capsys):
        wd, cfg = run
        cloud = next((wd / "clouds").glob("*.pitc"))
        code = main(["query", str(cloud), "--gps=-5000,-5000", "--config", str(cfg), "--set", f"workdir={wd}"])
        assert code == 3
        assert "error: query: no candidates within tau" in capsys.readouterr().err

    def test_leakage_mode_scores_zero(self, run, tmp_path):
        wd, cfg = run
        leak = tmp_path / "leak"
        shutil.copytree(wd, leak)
        for cmd in ("build-db", "eval"):
            assert main([cmd, "--config", str(cfg), "--set", f"workdir={leak}", "--set", "db_include_queries=true"]) == 0
        rep = pd.read_csv(leak / "eval" / "exhaustive" / "report.csv")
        np.testing.assert_array_equal(rep["error_m"], 0.0)

    def test_model_mismatch_reembeds(self, run, tmp_path, caplog):
        wd, cfg = run
        other = tmp_path / "other"
        shutil.copytree(wd, other)
        (other / "model.pitm").unlink()
        assert main(["eval", "--config", str(cfg), "--set", f"workdir={other}"]) == 0
        assert "re-embedding" in caplog.text


class TestErrors:
    def test_unknown_key(self, capsys):
        assert main(["synth", "--set", "sede=3"]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error: synth: ConfigError:") and "unknown" in err

    def test_missing_inputs(self, tmp_path, capsys):
        assert main(["train", "--set", f"workdir={tmp_path}"]) == 2
        assert "FileNotFoundError" in capsys.readouterr().err

    def test_negative_seed(self, capsys):
        assert main(["synth", "--seed", "-1"]) == 2
        assert "non-negative" in capsys.readouterr().err

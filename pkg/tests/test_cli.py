import json
import os

import numpy as np
import pytest
import yaml

from vlasovkam.cli import CSV_HEADERS, main, read_csv, sha256, write_csv
from vlasovkam.experiments import ExperimentConfig
from vlasovkam.errors import ParameterError


def _run(tmp_path, command, cfg=None, *extra):
    args = [command, "--out", str(tmp_path)]
    if cfg is not None:
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        args += ["--config", str(path)]
    code = main(args + list(extra))
    with open(tmp_path / "manifest.json") as fh:
        return code, json.load(fh)


def test_selftest_passes(tmp_path, capsys):
    code, man = _run(tmp_path, "selftest", {"selftest_pairs": 30})
    out = capsys.readouterr().out
    assert code == 0 and man["status"] == "ok"
    assert out.count("PASS") == 4 and "FAIL" not in out
    assert {r["suite"] for r in man["report"]} == {"potential", "optimal transport",
                                                    "lax-oleinik laws", "gradient"}


def test_selftest_reports_bad_potential(tmp_path, capsys):
    code, man = _run(tmp_path, "selftest", {"kappa": -1.0, "selftest_pairs": 10})
    out = capsys.readouterr().out
    assert code == 1 and man["status"] == "failed"
    assert "FAIL potential" in out and "failed suites: potential" in out


def test_unknown_key_writes_error_manifest(tmp_path):
    code, man = _run(tmp_path, "selftest", {"kapa": 1.0})
    assert code == 1 and man["status"] == "error"
    assert man["error"]["type"] == "ParameterError" and "kapa" in man["error"]["message"]


def test_bad_threads(tmp_path):
    assert main(["selftest", "--out", str(tmp_path), "--threads", "0"]) == 2


def test_config_validation():
    for bad in ({"n": 0}, {"dt": 0.03}, {"init": "random"}, {"horizon": 2.5}, {"seed": -1}):
        with pytest.raises(ParameterError):
            ExperimentConfig.from_mapping(bad)
    cfg = ExperimentConfig.from_mapping({"c_values": [0.1], "init": "synchronized", "n": 3})
    np.testing.assert_array_equal(cfg.c_range(), [0.1])
    np.testing.assert_array_equal(cfg.initial(), np.zeros(3))


def test_csv_format(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(str(path), ["a", "b", "flag"], [(1, 0.1, True), (2, 1 / 3, False)])
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines() == ["a,b,flag", "1,0.10000000000000001,1",
                                         "2,0.33333333333333331,0"]
    header, data = read_csv(str(path))
    assert header == ["a", "b", "flag"] and data[1, 1] == 1 / 3


def test_alpha_sweep_small(tmp_path):
    cfg = {"c_values": [0.0], "alpha_n": 2, "alpha_periods": 40, "grid_n": 32}
    code, man = _run(tmp_path, "alpha-sweep", cfg)
    assert code == 0
    header, data = read_csv(str(tmp_path / "alpha_sweep.csv"))
    assert header == CSV_HEADERS["alpha_sweep.csv"]
    c, a1, av, rho, gap = data[0]
    assert av >= a1 - 1e-6 and rho == 0.0
    f = man["files"][0]
    assert f["sha256"] == sha256(str(tmp_path / "alpha_sweep.csv"))


def test_concentrate_small_single_particle(tmp_path):
    cfg = {"n": 1, "horizon": 4, "sample_every": 50, "grid_n": 32}
    code, man = _run(tmp_path, "concentrate", cfg)
    assert code == 0
    header, data = read_csv(str(tmp_path / "concentration.csv"))
    assert header == CSV_HEADERS["concentration.csv"]
    assert data.shape == (5, 4)
    np.testing.assert_allclose(data[:, 0], [0, 1, 2, 3, 4])
    assert np.all(data[:, 1] == 0.0)  # one particle has no interaction energy
    assert set(man["timings"]) >= {"weak-kam", "minimize", "diagnostics"}


_FREE = {"a": 0.0, "b": 0.0, "kappa": 0.0, "n": 4, "init": "synchronized", "grid_n": 32,
         "classes": [0.0, 0.5], "eps": [0.15, 0.15], "k": [2], "t_prime": [0, 8],
         "t_dprime": [3, 12]}


def test_diffuse_small_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ca, ma = _run(a, "diffuse", _FREE, "--seed", "5")
    cb, mb = _run(b, "diffuse", _FREE, "--seed", "5")
    assert ca == cb == 0
    for name in ("trajectory.csv", "windows.csv", "visits.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert ma["config"]["seed"] == 5
    header, traj = read_csv(str(a / "trajectory.csv"))
    assert header == ["t", "q0", "q1", "q2", "q3", "extension_q", "extension_v"]
    h, win = read_csv(str(a / "windows.csv"))
    assert h == CSV_HEADERS["windows.csv"]
    np.testing.assert_allclose(win[:, 1], [0, 0.25, 0.5])
    assert ma["verification"]["conditions"]["passed"]
    assert "surrogate_bounds" in ma["deviations"]


def test_diffuse_schedule_error_manifest(tmp_path):
    bad = dict(_FREE, t_prime=[0, 5])
    code, man = _run(tmp_path, "diffuse", bad)
    assert code == 1
    assert man["error"]["type"] == "ScheduleError"
    assert not os.path.exists(tmp_path / "trajectory.csv")


def test_diffuse_cache_roundtrip_is_bit_identical(tmp_path):
    cfg = dict(_FREE, a=1.0, b=0.5, kappa=2.0, classes=[0.0], eps=[0.15], k=[], t_prime=[0],
               t_dprime=[2], grid_n=16, cache_dir=str(tmp_path / "cache"))
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert _run(a, "diffuse", cfg)[0] == 0
    cached = sorted(os.listdir(tmp_path / "cache"))
    assert len(cached) == 1 and cached[0].startswith("tc_")
    assert _run(b, "diffuse", cfg)[0] == 0
    for name in ("trajectory.csv", "windows.csv", "visits.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

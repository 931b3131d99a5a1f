import json

import numpy as np
import pytest

from edgecdn.cli import EXIT_CELL, EXIT_CONFIG, EXIT_OK, main
from edgecdn.harness import (PRESETS, ConfigError, config_from_dict, convergence_metrics,
                             load_config, load_preset, run_scenario, time_to_fraction)

SMALL = """
name = "small"
horizon = 300.0
warmup = 50.0
seeds = [1, 2]

[instance]
kind = "zipf"
n = 40
m = 400
d = 5
rho = 0.8
alpha = 0.8

[[policy]]
name = "prop"
kind = "proportional"

[[policy]]
name = "opt"
kind = "optimized"

[[policy]]
name = "lrl-v"
kind = "adaptive"
rule = "lrl"
virtual = true
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_time_to_fraction():
    t = np.array([0.0, 10, 20, 30, 40])
    assert time_to_fraction(t, [0, 5, 9, 10, 10]) == 20.0
    assert time_to_fraction(t, [10, 6, 2, 1, 0]) == 30.0
    assert time_to_fraction(t, [3, 3, 3, 3, 3]) == 0.0
    assert time_to_fraction(t + 100, [0, 9, 9, 9, 10]) == 10.0
    assert time_to_fraction(t, [0, 5, 9, 10, 10], final=5.0) == 10.0


def test_convergence_metrics():
    times = np.arange(11) * 10.0
    traj = np.column_stack([np.linspace(0, 10, 11), np.linspace(10, 0, 11)] * 5)
    conv = convergence_metrics(times, traj, tail=0.1)
    assert conv["final"][0] == pytest.approx(10.0)
    assert conv["t90_top"] == 90.0 and conv["t90_bottom"] == 90.0
    with pytest.raises(ValueError):
        convergence_metrics(times[:1], traj[:1])
    with pytest.raises(ValueError):
        convergence_metrics(times, traj, warmup=1000.0)


def test_presets_load():
    for name in PRESETS:
        cfg = load_preset(name)
        assert cfg.name == name and cfg.policies
    with pytest.raises(ConfigError):
        load_preset("nope")


@pytest.mark.parametrize("data", [
    {},
    {"instance": {"kind": "zipf", "m": 10, "d": 2, "n": 5, "rho": 0.5}},
    {"instance": {"kind": "mystery", "m": 10, "d": 2}},
    {"instance": {"kind": "zipf", "m": 10, "d": 2, "n": 5, "rho": 0.5, "alpha": 1.0},
     "policy": [{"name": "a", "kind": "adaptive", "rule": "fifo"}]},
    {"instance": {"kind": "zipf", "m": 10, "d": 2, "n": 5, "rho": 0.5, "alpha": 1.0},
     "policy": [{"name": "a", "kind": "proportional"}], "horizon": 10, "warmup": 20},
    {"instance": {"kind": "zipf", "m": 10, "d": 2, "n": 5, "rho": 0.5, "alpha": 1.0},
     "policy": [{"name": "a", "kind": "proportional"}, {"name": "a", "kind": "optimized"}]},
])
def test_bad_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_cli_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[instance]\nkind = 'zipf'\n")
    assert main(["simulate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    broken = tmp_path / "broken.toml"
    broken.write_text("this is = = not toml")
    assert main(["meanfield", "--config", str(broken)]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_cli_infeasible_instance(tmp_path):
    cfg = tmp_path / "inf.toml"
    cfg.write_text(SMALL.replace('rho = 0.8', 'rho = 1.5'))
    assert main(["meanfield", "--config", str(cfg)]) == EXIT_CONFIG


def test_cli_meanfield_and_optimize(small_cfg, tmp_path):
    out = tmp_path / "mf"
    assert main(["meanfield", "--config", str(small_cfg), "--out", str(out)]) == EXIT_OK
    header = (out / "meanfield.csv").read_text().splitlines()[0]
    assert header == "content_id,lambda,replicas,gamma_closed,gamma_exact,z_mean,z_mode"
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"gamma_bar", "inefficiency", "theta_eff", "rho_eff",
                            "iterations", "residual"}
    for method in ("closed_form", "greedy"):
        o = tmp_path / method
        assert main(["optimize", "--config", str(small_cfg), "--method", method,
                     "--out", str(o)]) == EXIT_OK
        report = json.loads((o / "report.json").read_text())
        assert report["method"] == method
        assert set(report) == {"gamma_bar_predicted", "coefficient", "Dbar", "theta_eff",
                               "method"}
        assert (o / "profile.csv").exists()


def test_cli_simulate_deterministic(small_cfg, tmp_path):
    for k in ("a", "b"):
        assert main(["simulate", "--config", str(small_cfg), "--seed", "3",
                     "--out", str(tmp_path / k)]) == EXIT_OK
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a and a == b


def test_cli_adaptive_outputs(small_cfg, tmp_path):
    out = tmp_path / "ad"
    assert main(["adaptive", "--config", str(small_cfg), "--rule", "random", "--virtual", "on",
                 "--snapshot-every", "25", "--horizon", "200", "--out", str(out)]) == EXIT_OK
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,decile,mean_replicas"
    assert len(lines) == 1 + 9 * 10
    assert (out / "final_state.csv").exists()


def test_compare_parallel_matches_serial(small_cfg, tmp_path):
    for jobs, name in ((1, "serial"), (2, "parallel")):
        assert main(["compare", str(small_cfg), "--jobs", str(jobs),
                     "--out", str(tmp_path / name)]) == EXIT_OK
    serial, parallel = _tree(tmp_path / "serial"), _tree(tmp_path / "parallel")
    assert any(str(p).endswith("trajectory.csv") for p in serial)
    assert serial == parallel


def test_reproduce_short_preset(tmp_path, capsys):
    assert main(["reproduce", "zipf08-proportional", "--horizon", "200", "--seed", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert "inefficiency" in capsys.readouterr().out
    assert (tmp_path / "report.json").exists()


def test_failed_cell_reported(small_cfg, tmp_path, monkeypatch, capsys):
    import edgecdn.harness as harness
    real_run = harness.run

    def flaky(catalog, profile, params, config=None, graph=None):
        if config.adaptive:
            raise RuntimeError("boom")
        return real_run(catalog, profile, params, config, graph)

    monkeypatch.setattr(harness, "run", flaky)
    report = run_scenario(load_config(small_cfg).with_overrides(seeds=(1,)))
    assert [(c.policy, c.seed) for c in report.failures] == [("lrl-v", 1)]
    assert report.cell("prop", 1).ok
    assert main(["compare", str(small_cfg), "--seed", "1",
                 "--out", str(tmp_path / "o")]) == EXIT_CELL
    assert "FAILED lrl-v seed 1" in capsys.readouterr().out

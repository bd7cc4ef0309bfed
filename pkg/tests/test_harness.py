import json
from pathlib import Path

import numpy as np
import pytest

from vfpda.cli import main
from vfpda.harness import (ConfigError, ExperimentConfig, generate_observations, generate_truth,
                           load_grid, run_experiment, with_seed_offset)

CONFIGS = sorted((Path(__file__).resolve().parent.parent / "configs").glob("l*.toml"))


def small(tmp_path, method="VFP(GG)", cycles=12, **changes):
    cfg = ExperimentConfig.load(CONFIGS[[p.name for p in CONFIGS].index("l63_vfp_gg.toml")])
    cfg = cfg.replace("schedule.spinup", 2).replace("schedule.cycles", cycles)
    cfg = cfg.replace("schedule.repetitions", 1).replace("ensemble.n_ens", 10)
    cfg = cfg.replace("method.name", method).replace("output.directory", str(tmp_path / "out"))
    cfg = cfg.replace("flow.max_steps", 20)
    for k, v in changes.items():
        cfg = cfg.replace(k.replace("__", "."), v)
    return cfg


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_round_trip(path):
    cfg = ExperimentConfig.load(path)
    again = ExperimentConfig.from_toml(cfg.to_toml())
    assert again == cfg or json.dumps(again.to_dict(), default=str) == \
        json.dumps(cfg.to_dict(), default=str)


@pytest.mark.parametrize("key, value, field", [
    ("ensemble.n_ens", 1, "ensemble.n_ens"),
    ("schedule.spinup", 5000, "schedule.spinup"),
    ("observation.error", "student", "observation.error"),
    ("method.name", "VFP(QQ)", "method.name"),
    ("model.name", "lorenz05", "model.name"),
    ("observation.indices", [0, 7], "observation.indices"),
])
def test_invalid_config_names_field(key, value, field, tmp_path):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        small(tmp_path).replace(key, value)


def test_unknown_and_mistyped_fields(tmp_path):
    data = small(tmp_path).to_dict()
    data["flow"]["alhpa"] = 0.1
    with pytest.raises(ConfigError, match="flow"):
        ExperimentConfig.from_dict(data)
    data = small(tmp_path).to_dict()
    data["schedule"]["cycles"] = "many"
    with pytest.raises(ConfigError, match=r"schedule\.cycles"):
        ExperimentConfig.from_dict(data)


def test_zero_noise_observations_equal_truth(tmp_path):
    cfg = small(tmp_path, observation__add_noise=False)
    truth = generate_truth(cfg)
    obs = generate_observations(cfg, truth)
    assert len(obs) == cfg.schedule.cycles
    for k, ob in enumerate(obs):
        assert np.array_equal(ob.y, truth.states[k + 1])


def test_observation_noise_statistics(tmp_path):
    cfg = small(tmp_path, cycles=4000)
    truth = generate_truth(cfg)
    noise = np.array([ob.y - x for ob, x in zip(generate_observations(cfg, truth),
                                                truth.states[1:])])
    assert abs(noise.var() / 8.0 - 1) < 0.05
    cfg = cfg.replace("observation.error", "cauchy")
    noise = np.array([ob.y - x for ob, x in zip(generate_observations(cfg, truth),
                                                truth.states[1:])])
    assert abs(np.median(np.abs(noise)) - 1.0) < 0.1


def test_repetitions_use_distinct_noise(tmp_path):
    cfg = small(tmp_path)
    truth = generate_truth(cfg)
    a, b = generate_observations(cfg, truth, 0), generate_observations(cfg, truth, 1)
    assert not np.array_equal(a[0].y, b[0].y)
    shifted = with_seed_offset(cfg, 10)
    assert shifted.seeds.truth == cfg.seeds.truth + 10


def test_run_writes_outputs_and_is_deterministic(tmp_path):
    cfg = small(tmp_path)
    out = tmp_path / "out"
    s = run_experiment(cfg, out)
    assert s["status"] == "ok" and np.isfinite(s["mean_rmse"])
    files = {p.name: p.read_bytes() for p in out.iterdir()}
    assert set(files) == {"summary.json", "series_rep0.csv", "rank_histogram.csv"}
    assert files["series_rep0.csv"].startswith(b"# config: ")
    run_experiment(cfg, out)
    assert {p.name: p.read_bytes() for p in out.iterdir()} == files


@pytest.mark.parametrize("method", ["ETKF", "SIR", "VFPLn(G)"])
def test_other_methods_run(method, tmp_path):
    changes = {"flow__metric": "langevin", "flow__alpha": 1.0} if method == "VFPLn(G)" else {}
    s = run_experiment(small(tmp_path, method=method, **changes), tmp_path / "out")
    assert s["mean_rmse"] is not None
    if method == "ETKF":
        assert "inflation" in s["repetitions"][0]


def _write(cfg, path):
    path.write_text(cfg.to_toml())
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write(small(tmp_path), tmp_path / "good.toml")
    assert main(["run", good]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"
    bad = tmp_path / "bad.toml"
    bad.write_text("[ensemble]\nn_ens = 1\n")
    assert main(["run", str(bad)]) == 1
    assert "ensemble.n_ens" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.toml")]) == 1
    assert main(["run", good, "--method", "nonsense"]) == 1
    assert main(["report", str(tmp_path / "out")]) == 0
    assert "VFP(GG)" in capsys.readouterr().out


def test_cli_runtime_failure_exit_code(tmp_path, monkeypatch):
    good = _write(small(tmp_path), tmp_path / "good.toml")

    def boom(*a, **k):
        raise FloatingPointError("diverged")
    monkeypatch.setattr("vfpda.cli.run_experiment", boom)
    assert main(["run", good]) == 2


def test_sweep_grid(tmp_path):
    cfg = small(tmp_path, cycles=6)
    grid_file = tmp_path / "grid.toml"
    grid_file.write_text('[grid]\n"flow.alpha" = [0.0, 0.1, 0.2, 0.3]\n'
                         '"flow.beta" = [0.0, 0.01, 0.02, 0.03]\n')
    assert load_grid(grid_file)["flow.alpha"] == [0.0, 0.1, 0.2, 0.3]
    rc = main(["sweep", _write(cfg, tmp_path / "c.toml"), "--grid", str(grid_file),
               "--output", str(tmp_path / "sweep")])
    assert rc == 0
    result = json.loads((tmp_path / "sweep" / "sweep.json").read_text())
    assert len(result["points"]) == 16
    assert all(p["status"] == "ok" for p in result["points"])
    assert len(list((tmp_path / "sweep").rglob("summary.json"))) == 16
    bad = tmp_path / "badgrid.toml"
    bad.write_text("[grid]\n")
    with pytest.raises(ConfigError):
        load_grid(bad)

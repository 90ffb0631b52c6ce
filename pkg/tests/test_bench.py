import csv
import json

import numpy as np
import pytest

from _helpers import within_3se
from dualmhe.bench import (BenchmarkDataset, ScenarioConfig, empirical_mse, run_benchmark,
                           simulate_paths)
from dualmhe.cli import main
from dualmhe.exceptions import ConfigError, UnknownEstimator
from dualmhe.model import batch_reactor, dump_model


def small(**kw):
    base = dict(paths=6, steps=8, horizon=2, methods=["kf", "mhe", "cmhe", "memhe"], seed=3)
    base.update(kw)
    return ScenarioConfig.from_dict(base)


def test_noise_free_consistent_prior_gives_zero_error():
    cfg = small(init={"type": "gaussian", "cov": np.zeros((3, 3)).tolist()},
                noise={"Q": np.zeros((3, 3)).tolist(), "R": [[0.0]]},
                methods=["kf", "fie", "mhe", "cfie", "cmhe", "memhe"])
    ds = simulate_paths(cfg)
    for m in ds.methods:
        assert np.max(empirical_mse(ds, m)) <= 1e-12, m


def test_same_seed_same_bytes():
    a, b = simulate_paths(small()), simulate_paths(small())
    assert a.digest() == b.digest()
    assert simulate_paths(small(seed=4)).digest() != a.digest()


def test_thread_count_does_not_change_results(monkeypatch):
    ref = simulate_paths(small()).digest()
    monkeypatch.setenv("BENCH_THREADS", "3")
    assert simulate_paths(small()).digest() == ref


def test_path_prefix_is_stable():
    # path i depends only on (seed, i)
    a, b = simulate_paths(small(paths=3)), simulate_paths(small(paths=6))
    np.testing.assert_array_equal(a.truth, b.truth[:3])


def dataset(errors):
    truth = np.zeros((len(errors), 1, 1))
    est = np.sqrt(np.array(errors, float)).reshape(-1, 1, 1)
    z = np.zeros((len(errors), 1))
    return BenchmarkDataset(truth, {"x": est}, {"x": z}, {"x": z.astype(str)},
                            {"x": z.astype(bool)}, {})


def test_mse_arithmetic():
    assert empirical_mse(dataset([0.0, 0.0]), "x")[0] == 0.0
    assert empirical_mse(dataset([1.0, 3.0]), "x")[0] == pytest.approx(2.0)


def test_unknown_estimator():
    with pytest.raises(UnknownEstimator):
        empirical_mse(dataset([1.0]), "nope")


def test_mse_matches_streaming_recomputation():
    ds = simulate_paths(small(paths=20))
    for m in ds.methods:
        acc = np.zeros(ds.truth.shape[1])
        for i in range(ds.truth.shape[0]):
            acc += np.sum((ds.truth[i] - ds.estimates[m][i]) ** 2, axis=1)
        np.testing.assert_allclose(empirical_mse(ds, m), acc / ds.truth.shape[0], rtol=1e-12, atol=1e-12)


def test_mhe_mse_tracks_cost_trace():
    ds = simulate_paths(small(paths=300, steps=6, methods=["mhe"]))
    errs = np.sum((ds.truth - ds.estimates["mhe"]) ** 2, axis=2)
    for t in range(7):
        ok, mean, se = within_3se(errs[:, t], ds.costs["mhe"][0, t])
        assert ok, (t, mean, se)


def test_config_errors():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"paths": 0})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"methods": ["ukf"]})
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        small(init={"type": "uniform", "lower": [0, 0]}).resolve()
    with pytest.raises(ConfigError):
        small(constraint=None).resolve()


def write_config(tmp_path, **kw):
    model, X = batch_reactor()
    (tmp_path / "reactor.json").write_text(json.dumps(dump_model(model, X)))
    doc = dict(model="reactor.json", paths=4, steps=5, horizon=3, seed=1,
               methods=["cfie", "cmhe"], init={"type": "uniform"}, out=str(tmp_path / "out"))
    doc.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def test_run_benchmark_artifacts(tmp_path):
    cfg = write_config(tmp_path, dump_trajectories=True)
    run_benchmark(cfg)
    out = tmp_path / "out"
    with open(out / "mse.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "e_cfie", "e_cmhe"] and len(rows) == 1 + 6
    assert (out / "costs.csv").exists()
    with open(out / "trajectories.csv", newline="") as fh:
        assert sum(1 for _ in fh) == 1 + 4 * 2 * 6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["prior_mismatch"] is True
    assert summary["seed"] == 1
    assert set(summary["cfie_vs_cmhe"]) >= {"max_abs_norm_diff", "max_abs_cost_diff"}
    assert summary["constraint_violations"] == {"cfie": 0, "cmhe": 0}


def test_cli_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "other"
    code = main(["run", "--config", str(cfg), "--paths", "2", "--seed", "9", "--methods", "kf,cmhe",
                 "--horizon", "1", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["paths"] == 2 and summary["config"]["horizon"] == 1
    assert summary["seed"] == 9 and set(summary["methods"]) == {"kf", "cmhe"}


def test_cli_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--help"])
    assert info.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_cli_bad_config(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "missing.json")])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_cli_bad_method(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--methods", "ukf"]) != 0
    assert "unknown methods" in capsys.readouterr().err


def test_shipped_configs_load():
    from importlib.resources import files
    for name in ("scenario_gaussian", "scenario_uniform", "scenario_single_path"):
        cfg = ScenarioConfig.load(files("dualmhe") / "data" / f"{name}.json")
        model, X = cfg.resolve()
        assert model.d == 3 and X is not None

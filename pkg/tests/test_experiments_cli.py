import csv
import json

import numpy as np
import pytest

from bilevel_dfo import config, driver, experiments as ex
from bilevel_dfo.cli import main


def test_variant_parsing():
    assert ex.Variant.parse("dynamic-fista") == ex.Variant("dynamic", "fista")
    assert len(ex.ALL_VARIANTS) == 6
    with pytest.raises(ValueError):
        ex.Variant.parse("medium-gd")
    assert ex.baseline_iterations("mri", ex.Variant("high", "fista")) == 1000
    assert ex.baseline_iterations("denoise", ex.Variant("high", "fista")) == 2000
    assert ex.baseline_iterations("denoise", ex.Variant("low", "gd")) == 1000
    assert ex.baseline_iterations("denoise", ex.Variant("dynamic", "gd")) is None


def test_build_rejects_mismatched_dataset():
    from bilevel_dfo import datagen

    ds = datagen.make_dataset(datagen.SignalSpec(16, 0.1, 2))
    with pytest.raises(ValueError):
        ex.build(ex.MRI, ds)
    with pytest.raises(ValueError):
        ex.build("ct")


def test_trace_and_work_metric():
    tset = ex.build(ex.TOY, seed=0)
    r = ex.run_variant(tset, ex.Variant("dynamic", "fista"), [0.0], driver.TrustRegionConfig(eval_budget=30))
    tr = r.trace()
    best = [row[1] for row in tr]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert tr[-1][0] == r.total_lower_iters
    assert 0 <= r.work_to_reach(0.01) <= r.total_lower_iters
    rows = ex.aligned_table({"a": r})
    assert [row[1] for row in rows] == sorted(row[1] for row in rows)


def test_thresholding_and_zero_filled_baseline():
    w, active = ex.thresholded_weights(np.array([0.0005, 0.5, 0.001, 0.9]))
    np.testing.assert_array_equal(active, [False, True, False, True])
    np.testing.assert_allclose(w, [0, 1, 0, 9])
    tset = ex.build(ex.MRI, N=16, n=2, sigma=0.0, seed=0)
    zf = ex.zero_filled(tset, np.ones(16, dtype=bool))
    np.testing.assert_allclose(zf, tset.x_true, atol=1e-12)


def test_config_schema():
    cfg = config.validate({"experiment": "toy", "budget": 5, "trust_region": {"Delta0": 0.2}})
    assert cfg.tr_config(60).eval_budget == 5 and cfg.tr_config(60).Delta0 == 0.2
    with pytest.raises(config.ConfigError):
        config.validate({"experiment": "toy", "budgett": 5})
    with pytest.raises(config.ConfigError):
        config.validate({"experiment": "toy", "variants": ["fast-gd"]})
    with pytest.raises(config.ConfigError):
        config.validate({"experiment": "toy", "trust_region": {"eta1": 0.9, "eta2": 0.5}}).tr_config(10)
    with pytest.raises(config.ConfigError):
        config.validate({"experiment": "toy", "dataset": "/nonexistent.csv"})


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUT_ENV, str(tmp_path / "env"))
    assert config.validate({"experiment": "toy"}).output_root() == tmp_path / "env"
    assert config.validate({"experiment": "toy", "out": "x"}).output_root().name == "x"


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gen", "--kind", "mri", "--N", "16", "--n", "2", "--seed", "4", "--out", str(a)]) == 0
    assert main(["gen", "--kind", "mri", "--N", "16", "--n", "2", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    meta = json.loads((tmp_path / "a.csv.json").read_text())
    assert meta["kind"] == "mri" and meta["spec"]["N"] == 16


def test_run_and_report(tmp_path):
    data = tmp_path / "toy.csv"
    out = tmp_path / "runs"
    assert main(["gen", "--N", "16", "--n", "3", "--out", str(data)]) == 0
    args = ["run", "--experiment", "denoise-1", "--dataset", str(data), "--budget", "6", "--recon-iters", "50",
            "--variants", "dynamic-fista", "low-fista", "--out", str(out)]
    assert main(args) == 0
    first = (out / "dynamic-fista" / "history.csv").read_bytes()
    assert main(args) == 0
    assert (out / "dynamic-fista" / "history.csv").read_bytes() == first
    for name in ("history.csv", "history.csv.json", "evals.csv", "params.json", "reconstructions.csv"):
        assert (out / "dynamic-fista" / name).exists()
    params = json.loads((out / "low-fista" / "params.json").read_text())
    assert params["n_evals"] <= 6 and "alpha" in params
    assert json.loads((out / "config.json").read_text())["budget"] == 6

    assert main(["report", str(out)]) == 0
    table = _read_csv(out / "best_vs_work.csv")
    assert table[0] == ["cumulative_lower_iters", "dynamic-fista", "low-fista"]
    finals = _read_csv(out / "finals.csv")
    assert {row[0] for row in finals[1:]} == {"dynamic-fista", "low-fista"}


def test_mri_run_writes_pattern(tmp_path):
    out = tmp_path / "mri"
    code = main(["run", "--experiment", "mri", "--N", "8", "--n", "2", "--budget", "12", "--recon-iters", "20",
                 "--variants", "dynamic-fista", "--out", str(out)])
    assert code == 0
    pattern = _read_csv(out / "dynamic-fista" / "pattern.csv")
    assert pattern[0] == ["mode", "theta", "weight", "active"] and len(pattern) == 9


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "toy", "budget": 40, "recon_iters": 0}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--budget", "5", "--out", str(out)]) == 0
    assert json.loads((out / "dynamic-fista" / "params.json").read_text())["n_evals"] <= 5


def test_sweep_sigma_command(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep-sigma", "--sigmas", "0.1", "0.01", "--N", "16", "--n", "2", "--budget", "8",
                 "--out", str(out)]) == 0
    rows = _read_csv(out / "sweep_sigma.csv")
    assert rows[0] == ["sigma", "alpha_final", "sigma2_over_alpha", "f_final"] and len(rows) == 3


@pytest.mark.parametrize("argv", [
    ["run", "--experiment", "toy", "--variants", "turbo-gd"],
    ["run", "--experiment", "toy", "--theta0", "99"],
    ["run", "--experiment", "toy", "--dataset", "/does/not/exist.csv"],
    ["report", "/does/not/exist"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path / "x")] if argv[0] == "run" else argv) == 2
    assert "error" in capsys.readouterr().err


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "no runs found" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"experiment": "toy", "extra": 1}))
    assert main(["run", "--config", str(bad)]) == 2


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    # a one-iteration safeguard cannot certify any evaluation
    from bilevel_dfo import solvers

    monkeypatch.setattr(solvers, "DEFAULT_MAX_ITER", 1)
    monkeypatch.setattr(ex, "make_oracle", lambda tset, v, threads=1, max_iter=1:
                        ex.BilevelOracle(tset, v.solver, "dynamic", None, max_iter=1, threads=threads))
    code = main(["run", "--experiment", "denoise-1", "--N", "16", "--n", "2", "--budget", "4",
                 "--out", str(tmp_path / "n")])
    assert code == 3

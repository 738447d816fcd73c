import json

import numpy as np
import pytest
from scipy.stats import norm

from hausmoment import ConfigError, Dataset, SamplerAbort
from hausmoment.cli import asymptotic_estimate, main, parse_config, run_experiment
from hausmoment.datasets import (
    export_dataset,
    load_dataset,
    simulate_ate_data,
    simulate_iv_data,
    simulate_regression_data,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def base_config(**over):
    raw = {
        "seed": 3,
        "model": {"kind": "mean"},
        "data": {"inline": [[-1.0], [0.0], [1.0]], "counts": [2, 3, 5]},
        "prior": {"variant": "nonscience", "theta": {"type": "dirichlet", "alpha": 1.0}},
        "sampler": {"method": "marginal", "n_iter": 600, "burn_in": 100},
    }
    raw.update(over)
    return raw


class TestLoadDataset:
    def test_deduplicates_in_order(self, tmp_path):
        ds = load_dataset(write(tmp_path / "a.csv", "s\n1\n1\n0\n"))
        np.testing.assert_array_equal(ds.support.points, [[1.0], [0.0]])
        np.testing.assert_array_equal(ds.counts, [2, 1])

    def test_distinct_rows(self, tmp_path):
        ds = load_dataset(write(tmp_path / "b.csv", "x,y\n1,1\n2,4\n3,9\n"))
        assert ds.J == 3 and ds.n == 3

    def test_negative_zero_folds(self, tmp_path):
        ds = load_dataset(write(tmp_path / "z.csv", "s\n0.0\n-0.0\n1\n"))
        np.testing.assert_array_equal(ds.counts, [2, 1])

    def test_schema_with_intercept(self, tmp_path):
        ds = load_dataset(write(tmp_path / "c.csv", "x,y\n1,3\n2,5\n"), ["y", "1", "x"])
        np.testing.assert_array_equal(ds.support.points, [[3, 1, 1], [5, 1, 2]])

    @pytest.mark.parametrize("text,match", [
        ("s\n1\n1\n", "J >= 2"),
        ("s\n1\nfoo\n", ":3:"),
        ("a,b\n1,2\n3\n", ":3:"),
        ("s\n", "no data"),
        ("s\n1\nnan\n", "non-finite"),
    ])
    def test_errors(self, tmp_path, text, match):
        with pytest.raises(ConfigError, match=match):
            load_dataset(write(tmp_path / "bad.csv", text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_dataset(tmp_path / "nope.csv")

    def test_export_round_trip(self, tmp_path):
        ds = Dataset.from_points([[0.1, 2.0], [1 / 3, -1.0]], [3, 1])
        export_dataset(ds, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.support.points, ds.support.points)
        np.testing.assert_array_equal(back.counts, ds.counts)


class TestSimulators:
    def test_regression_moments(self):
        ds = simulate_regression_data(100_000, 7)
        y, x = ds.support.points[:, 0], ds.support.points[:, 2]
        assert abs(x.mean() - 1.0) <= 4 * 2.0 / np.sqrt(1e5)
        slope = np.polyfit(x, y, 1)[0]
        assert slope == pytest.approx(5.0, abs=0.15)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["simulate", "--J", "50", "--seed", "4", "--out",
                         str(tmp_path / f"{name}.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_iv_and_ate_shapes(self):
        assert simulate_iv_data(200, 1).support.d == 5
        ate = simulate_ate_data(200, 1)
        assert ate.support.d == 4 and set(np.unique(ate.support.points[:, 3])) == {0.0, 1.0}


class TestParseConfig:
    @pytest.mark.parametrize("drop", ["seed", "model", "data", "prior", "sampler"])
    def test_missing_sections(self, drop):
        raw = base_config()
        del raw[drop]
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_bad_values(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(base_config(seed=-1))
        with pytest.raises(ConfigError):
            parse_config(base_config(sampler={"method": "gibbs"}))
        with pytest.raises(ConfigError):
            parse_config(base_config(model={"kind": "probit"}))
        with pytest.raises(ConfigError):
            parse_config(base_config(data={"csv": "absent.csv"}), tmp_path)
        with pytest.raises(ConfigError):
            parse_config(base_config(sampler={"method": "missing_support", "n_iter": 10}))

    def test_relative_csv(self, tmp_path):
        write(tmp_path / "d.csv", "s\n1\n2\n")
        cfg = parse_config(base_config(data={"csv": "d.csv"}), tmp_path)
        assert cfg.raw["data"]["csv"] == str((tmp_path / "d.csv").resolve())


class TestRun:
    def test_artifacts(self, tmp_path):
        out = run_experiment(base_config(kde={"columns": ["theta_1", "theta_3"], "n": 20}),
                             tmp_path / "o")
        for name in ("draws.csv", "summary.json", "diagnostics.csv", "atoms.csv", "kde.csv",
                     "manifest.json"):
            assert (out / name).exists()
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["quantities"]) >= {"beta_1", "theta_1", "theta_3"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok" and manifest["seed"] == 3

    def test_seed_override_changes_draws(self, tmp_path):
        a = run_experiment(base_config(), tmp_path / "a")
        b = run_experiment(base_config(), tmp_path / "b", seed=4)
        assert (a / "draws.csv").read_bytes() != (b / "draws.csv").read_bytes()

    def test_thread_count_does_not_change_output(self, tmp_path, monkeypatch):
        raw = base_config(replications=3)
        a = run_experiment(raw, tmp_path / "a", threads=1)
        monkeypatch.setenv("HM_THREADS", "3")
        b = run_experiment(raw, tmp_path / "b")
        for rep in ("rep_000", "rep_001", "rep_002"):
            assert (a / rep / "draws.csv").read_bytes() == (b / rep / "draws.csv").read_bytes()

    def test_exit_codes(self, tmp_path, capsys):
        good = write(tmp_path / "good.json", json.dumps(base_config()))
        assert main(["run", str(good), "--out", str(tmp_path / "g")]) == 0
        bad = write(tmp_path / "bad.json", json.dumps({"model": {"kind": "mean"}}))
        assert main(["run", str(bad)]) == 2
        assert main(["run", str(tmp_path / "absent.json")]) == 2
        overflow = base_config(data={"inline": [[0.0], [1.0], [1e300]]})
        path = write(tmp_path / "overflow.json", json.dumps(overflow))
        assert main(["run", str(path), "--out", str(tmp_path / "x")]) == 2
        assert "error" in capsys.readouterr().err

    def test_abort_exit_code(self, tmp_path, monkeypatch, capsys):
        import hausmoment.cli as cli

        def fail(*args, **kwargs):
            raise SamplerAbort("too many solver failures")

        monkeypatch.setattr(cli, "run_experiment", fail)
        path = write(tmp_path / "c.json", json.dumps(base_config()))
        assert main(["run", str(path)]) == 3
        assert "sampler aborted" in capsys.readouterr().err

    def test_summarize_and_diagnose(self, tmp_path, capsys):
        out = run_experiment(base_config(), tmp_path / "o")
        assert main(["summarize", str(out / "draws.csv")]) == 0
        table = json.loads(capsys.readouterr().out)
        assert "theta_2" in table and "log_post" not in table
        assert main(["diagnose", str(out / "draws.csv"), "--lags", "5"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("lag") and len(lines) == 7

    def test_informative_prior_shrinks_toward_prior(self, tmp_path):
        q = 0.25
        raw = {
            "seed": 8,
            "model": {"kind": "linear_reg", "dims": {"p": 2}},
            "data": {"simulate": {"kind": "regression", "J": 200, "seed": 2024}},
            "prior": {"variant": "geometric_adhoc",
                      "beta": {"type": "gaussian_asymptotic", "quantile": q, "scale": 1.0},
                      "theta": {"type": "dirichlet", "alpha": 0.01}},
            "sampler": {"method": "bb_is", "M": 20_000},
        }
        post = json.loads((run_experiment(raw, tmp_path / "p") / "summary.json").read_text())
        flat = dict(raw, prior={"variant": "geometric_adhoc",
                                "theta": {"type": "dirichlet", "alpha": 0.01}})
        bb = json.loads((run_experiment(flat, tmp_path / "f") / "summary.json").read_text())
        bhat, V = asymptotic_estimate(*_regression_model_and_data())
        prior_mean = bhat + norm.ppf(q) * np.sqrt(np.diag(V))
        for k in range(2):
            m = post["quantities"][f"beta_{k + 1}"]["mean"]
            b = bb["quantities"][f"beta_{k + 1}"]["mean"]
            assert prior_mean[k] < m < b


def _regression_model_and_data():
    from hausmoment import make_builtin_model
    return make_builtin_model("linear_reg", p=2), simulate_regression_data(200, 2024)

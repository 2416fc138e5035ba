"""Tests for the experiment harness, metrics persistence, and the CLI."""

import json
import math
import os
import warnings

import numpy as np
import pytest

from dynmed.cli import main
from dynmed.harness import (
    COLUMNS,
    EmitFormat,
    ExperimentConfig,
    emit,
    load_rows,
    reference_effects,
    run_experiment,
)

TOY_IDE = -1.2766859610837646
TOY_ATE = -5.566082062223232


# ---------------------------------------------------------------------------
# ground-truth reference
# ---------------------------------------------------------------------------

def test_reference_exact_for_finite_env():
    vals = reference_effects("toy")
    assert vals.method == "exact"
    assert vals.effects["ide"] == pytest.approx(TOY_IDE, abs=1e-12)
    assert vals.effects["ate"] == pytest.approx(TOY_ATE, abs=1e-12)


def test_reference_frozen_table_for_semi():
    vals = reference_effects("semi", sigma=2.0)
    assert vals.method == "mc"
    assert vals.meta["version"] == 1
    assert vals.effects["ate"] == pytest.approx(8.255623, abs=1e-9)
    assert all(se < 0.005 for se in vals.effect_ses.values())


def test_reference_frozen_covers_all_sigmas_and_multidim():
    for sigma in (1.0, 2.0, 3.0):
        assert reference_effects("semi", sigma=sigma).method == "mc"
    vals = reference_effects("multidim")
    assert vals.method == "mc"
    assert vals.effects["ate"] == pytest.approx(9.676702, abs=1e-9)


@pytest.mark.slow
def test_reference_falls_back_to_simulation_off_table():
    with pytest.warns(RuntimeWarning, match="no frozen reference"):
        vals = reference_effects("semi", sigma=1.5)
    assert vals.method == "mc"
    assert np.isfinite(list(vals.effects.values())).all()
    with warnings.catch_warnings():
        warnings.simplefilter("error")          # memoized: no second warning
        again = reference_effects("semi", sigma=1.5)
    assert again.effects == vals.effects


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"env": "lunar"},
    {"estimators": ["dm", "mystery"]},
    {"estimators": []},
    {"grid": []},
    {"grid": [(0, 10)]},
    {"grid": [(10, -1)]},
    {"n_seeds": 0},
    {"nuisance": "guesswork"},
    {"nuisance": "corrupt:m9"},
    {"output_format": "yaml"},
    {"ci_level": 1.0},
])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


def test_config_json_round_trip():
    cfg = ExperimentConfig(env="semi", sigma=1.0, grid=[(50, 25), (200, 25)],
                           estimators=["mr"], nuisance="fitted", n_seeds=3,
                           master_seed=9, output="rows.csv",
                           nuisance_overrides={"mc_draws": 50})
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bad config key"):
        ExperimentConfig.from_json('{"env": "toy", "wibble": 3}')


def test_config_rejects_bad_nuisance_override():
    cfg = ExperimentConfig(env="toy", grid=[(10, 5)], estimators=["mr"],
                           nuisance="fitted",
                           nuisance_overrides={"no_such_knob": 1})
    with pytest.raises(ValueError, match="bad nuisance override"):
        run_experiment(cfg)


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

def test_row_count_and_ordering():
    cfg = ExperimentConfig(env="toy", grid=[(25, 10), (30, 10)],
                           estimators=["dm", "mr"], nuisance="oracle",
                           n_seeds=2)
    rows = run_experiment(cfg)
    assert len(rows) == 2 * 2 * 5
    assert [(r.n, r.estimator, r.effect) for r in rows[:6]] == [
        (25, "dm", "ide"), (25, "dm", "ime"), (25, "dm", "dde"),
        (25, "dm", "dme"), (25, "dm", "ate"), (25, "mr", "ide")]
    assert all(r.scenario == "oracle" for r in rows)


def test_dm_with_oracle_nuisances_is_exact():
    cfg = ExperimentConfig(env="toy", grid=[(20, 10)], estimators=["dm"],
                           nuisance="oracle", n_seeds=2)
    for row in run_experiment(cfg):
        assert row.n_seeds == 2
        assert row.bias == 0.0
        assert row.mse == 0.0
        assert row.logbias is None        # log of a zero bias is undefined
        assert row.logmse is None
        assert row.empirical_se == 0.0
        assert row.ci_coverage is None    # dm reports no standard errors


def test_run_experiment_is_deterministic():
    cfg = ExperimentConfig(env="toy", grid=[(20, 10)],
                           estimators=["mis1", "mr"], nuisance="oracle",
                           n_seeds=2)
    a = [r.to_dict() for r in run_experiment(cfg)]
    b = [r.to_dict() for r in run_experiment(cfg)]
    assert a == b


def test_mr_rows_report_coverage():
    cfg = ExperimentConfig(env="toy", grid=[(40, 10)], estimators=["mr"],
                           nuisance="oracle", n_seeds=4)
    for row in run_experiment(cfg):
        assert row.ci_coverage is not None
        assert 0.0 <= row.ci_coverage <= 1.0
        assert row.empirical_se > 0


def test_incompatible_estimator_warns_and_leaves_empty_rows():
    cfg = ExperimentConfig(env="toy", grid=[(20, 10)],
                           estimators=["mr", "mr-alt"],
                           nuisance="corrupt:m2", n_seeds=2)
    with pytest.warns(RuntimeWarning, match="mr-alt"):
        rows = run_experiment(cfg)
    assert len(rows) == 2 * 5
    alt = [r for r in rows if r.estimator == "mr-alt"]
    assert all(r.n_seeds == 0 and r.mean is None and r.mse is None
               for r in alt)
    good = [r for r in rows if r.estimator == "mr"]
    assert all(r.n_seeds == 2 and np.isfinite(r.mean) for r in good)


def test_baseline_rows_only_fill_ide_and_ime():
    cfg = ExperimentConfig(env="toy", grid=[(30, 10)], estimators=["base-dm"],
                           nuisance="oracle", n_seeds=2)
    rows = {r.effect: r for r in run_experiment(cfg)}
    assert np.isfinite(rows["ide"].mean) and np.isfinite(rows["ime"].mean)
    for eff in ("dde", "dme", "ate"):
        assert rows[eff].n_seeds == 0 and rows[eff].mean is None


def test_logmse_default_is_log_of_mean():
    cfg = ExperimentConfig(env="toy", grid=[(30, 10)], estimators=["mis1"],
                           nuisance="oracle", n_seeds=3)
    for row in run_experiment(cfg):
        assert row.logmse == pytest.approx(math.log(row.mse), abs=1e-12)


def test_logmse_mean_of_log_switch():
    base = dict(env="toy", grid=[(30, 10)], estimators=["mis1"],
                nuisance="oracle", n_seeds=3)
    rows = run_experiment(ExperimentConfig(**base, log_mse_mean_of_log=True))
    for row in rows:
        # Jensen: the mean of logs sits strictly below the log of the mean
        assert row.logmse < math.log(row.mse)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _small_rows():
    cfg = ExperimentConfig(env="toy", grid=[(20, 10)],
                           estimators=["dm", "mr"], nuisance="oracle",
                           n_seeds=2)
    return run_experiment(cfg)


@pytest.mark.parametrize("fmt,name", [(EmitFormat.CSV, "rows.csv"),
                                      (EmitFormat.JSON, "rows.json")])
def test_emit_load_round_trip(tmp_path, fmt, name):
    rows = _small_rows()
    path = emit(rows, fmt, str(tmp_path / name))
    again = load_rows(path)
    assert [r.to_dict() for r in again] == [r.to_dict() for r in rows]


def test_emit_empty_rows_writes_header_only(tmp_path):
    path = emit([], "csv", str(tmp_path / "empty.csv"))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    assert lines == [",".join(COLUMNS)]
    assert load_rows(path) == []


def test_output_dir_env_var_resolves_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv("DYNMED_OUTPUT_DIR", str(tmp_path))
    path = emit(_small_rows()[:2], "csv", "nested/out.csv")
    assert path == str(tmp_path / "nested" / "out.csv")
    assert os.path.exists(path)
    absolute = str(tmp_path / "direct.csv")
    assert emit([], "csv", absolute) == absolute


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def test_cli_oracle_exact(capsys):
    assert main(["oracle", "--env", "toy", "--exact"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["method"] == "exact"
    assert payload["effects"]["ide"] == pytest.approx(TOY_IDE, abs=1e-12)


def test_cli_oracle_continuous_needs_mc(capsys):
    assert main(["oracle", "--env", "semi"]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_oracle_mc_runs_small(capsys):
    rc = main(["oracle", "--env", "toy", "--mc", "--n-traj", "50",
               "--horizon", "50", "--seed", "1"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["method"] == "mc"
    assert set(payload["effects"]) == {"ide", "ime", "dde", "dme", "ate"}


def test_cli_simulate_writes_csv(tmp_path, capsys):
    out = str(tmp_path / "trajs.csv")
    rc = main(["simulate", "--env", "toy", "--n", "5", "--horizon", "4",
               "--seed", "3", "--out", out])
    assert rc == 0
    assert f"wrote 5 trajectories" in capsys.readouterr().out
    with open(out, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    # header + per trajectory: horizon tuples plus the terminal state row
    assert len(lines) == 1 + 5 * (4 + 1)


def test_cli_estimate_mr_oracle(capsys):
    rc = main(["estimate", "--env", "toy", "--estimator", "mr",
               "--n", "30", "--horizon", "10", "--nuisance", "oracle"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["estimator"] == "mr"
    assert set(payload["effects"]) == {"ide", "ime", "dde", "dme", "ate"}
    assert payload["ses"]["ate"] > 0


def test_cli_estimate_baseline(capsys):
    rc = main(["estimate", "--env", "toy", "--estimator", "base-ipw",
               "--n", "30", "--horizon", "10", "--nuisance", "oracle"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) == {"estimator", "ide", "ime"}


def test_cli_experiment_flags_then_report(tmp_path, capsys):
    out = str(tmp_path / "rows.csv")
    rc = main(["experiment", "--env", "toy", "--grid", "20:10",
               "--estimators", "dm", "--n-seeds", "2", "--output", out])
    assert rc == 0
    assert "wrote 5 rows" in capsys.readouterr().out
    assert main(["report", "--input", out]) == 0
    report = capsys.readouterr().out
    assert "estimator" in report and "dm" in report


def test_cli_experiment_config_file(tmp_path, capsys):
    cfg = ExperimentConfig(env="toy", grid=[(20, 10)], estimators=["dm"],
                           nuisance="oracle", n_seeds=2)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json(), encoding="utf-8")
    assert main(["experiment", "--config", str(path)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 5
    assert {r["estimator"] for r in rows} == {"dm"}


def test_cli_experiment_needs_env_or_config(capsys):
    assert main(["experiment"]) == 1
    assert "either --config or --env" in capsys.readouterr().err


def test_cli_rejects_malformed_grid(capsys):
    assert main(["experiment", "--env", "toy", "--grid", "20-10",
                 "--estimators", "dm"]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_report_empty_file(tmp_path, capsys):
    path = emit([], "csv", str(tmp_path / "none.csv"))
    assert main(["report", "--input", path]) == 0
    assert "(no rows)" in capsys.readouterr().out

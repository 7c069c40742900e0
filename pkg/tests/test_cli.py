import argparse

import pytest

from pbrt import cli
from pbrt.detect import detect_all, format_observations, load_observations
from pbrt.estimator import empty_estimate, format_summary, population_distribution
from pbrt.lmm import FitError, build_design, dumps_model, fit, load_model
from pbrt.trajectory import load_signals, load_tracks
from pbrt.warning import DEFAULT_POPULATION, far_population


def run(capsys, *argv):
    code = cli.run(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.run(["simulate", "--scenario", "observations", "--seed", "3", "--n-drivers", "60",
                    "--out", str(d / "obs.csv"), "--truth", str(d / "gammas.csv")]) == 0
    assert cli.run(["train", "--obs", str(d / "obs.csv"), "--out", str(d / "model.txt")]) == 0
    assert cli.run(["simulate", "--scenario", "kinematics", "--seed", "3", "--events", "5",
                    "--null-pairs", "3", "--out-dir", str(d / "kin")]) == 0
    return d


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_documents_every_flag(capsys, command):
    code, out, _ = run(capsys, command, "--help")
    assert code == 0
    sub = cli._subparser(cli.build_parser(), command)
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in out
    assert "exit codes" in out


def test_top_level_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    assert all(c in out for c in cli.COMMANDS)


def test_detect_is_thin_wrapper(capsys, workdir):
    kin = workdir / "kin"
    code, out, _ = run(capsys, "detect", "--tracks", kin / "tracks.csv", "--signals", kin / "signals.csv")
    assert code == 0
    expected = format_observations(detect_all(load_tracks(kin / "tracks.csv"), load_signals(kin / "signals.csv")))
    assert out == expected
    assert len(out.splitlines()) > 10


def test_detect_overrides(capsys, workdir):
    kin = workdir / "kin"
    _, strict, _ = run(capsys, "detect", "--tracks", kin / "tracks.csv", "--signals", kin / "signals.csv",
                       "--headway-cutoff", "2.0")
    _, full, _ = run(capsys, "detect", "--tracks", kin / "tracks.csv", "--signals", kin / "signals.csv")
    assert len(strict.splitlines()) < len(full.splitlines())


def test_train_is_thin_wrapper(workdir):
    params = fit(build_design(load_observations(workdir / "obs.csv")))
    assert (workdir / "model.txt").read_text() == dumps_model(params)


def test_train_sim_correction(workdir, capsys):
    code, out, _ = run(capsys, "train", "--obs", workdir / "obs.csv", "--sim-correction")
    assert code == 0
    base = load_model(workdir / "model.txt")
    corrected = cli.lmm.loads_model(out)
    assert corrected.mean_brt("steady", 2.0) == pytest.approx(base.mean_brt("steady", 2.0) + 0.3)


def test_estimate_empty_log_is_population(capsys, workdir, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    code, out, _ = run(capsys, "estimate", "--model", workdir / "model.txt", "--log", empty)
    assert code == 0
    params = load_model(workdir / "model.txt")
    expected = format_summary(empty_estimate(params, ""), population_distribution(params),
                              cli.estimator.DEFAULT_QUANTILES)
    assert out == expected


def test_estimate_driver_and_store(capsys, workdir, tmp_path):
    args = ["estimate", "--model", workdir / "model.txt", "--stimulus", "signal", "--t-star", "2.0"]
    code, from_log, _ = run(capsys, *args, "--log", workdir / "obs.csv", "--driver", "sim07")
    assert code == 0 and from_log.splitlines()[1].startswith("sim07,signal,2.0,30,")
    code, from_store, _ = run(capsys, *args, "--store", tmp_path / "st", "--append", workdir / "obs.csv",
                              "--driver", "sim07")
    assert code == 0 and from_store == from_log
    code, _, err = run(capsys, *args, "--log", workdir / "obs.csv")
    assert code == cli.EXIT_USAGE and "--driver" in err


def test_analyze_far_matches_library(capsys):
    code, out, _ = run(capsys, "analyze-far", "--poa-grid", "0.01", "--samples", "100000")
    assert code == 0
    row = out.splitlines()[1].split(",")
    assert row[0] == "0.01"
    assert row[1] == repr(far_population(DEFAULT_POPULATION, 0.01))


def test_analyze_far_from_model(capsys, workdir):
    code, out, _ = run(capsys, "analyze-far", "--model", workdir / "model.txt", "--poa-grid", "0.01,0.02",
                       "--samples", "100000")
    assert code == 0
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert len(rows) == 2 and all(float(r[2]) < float(r[1]) for r in rows)


def test_simulate_convergence(capsys):
    code, out, _ = run(capsys, "simulate", "--scenario", "convergence", "--n-drivers", "60", "--reps", "20",
                       "--grid", "0,5")
    assert code == 0
    assert out.splitlines()[0] == "n,err_same,err_other"


def test_full_pipeline_deterministic(tmp_path, capsys):
    def pipeline(d):
        d.mkdir()
        outs = []
        for argv in (
            ["simulate", "--scenario", "observations", "--seed", "9", "--n-drivers", "40", "--out", d / "o.csv"],
            ["train", "--obs", d / "o.csv", "--out", d / "m.txt"],
            ["estimate", "--model", d / "m.txt", "--log", d / "o.csv", "--driver", "sim05"],
            ["analyze-far", "--model", d / "m.txt", "--seed", "9", "--samples", "100000", "--poa-grid", "0.01"],
        ):
            code, out, _ = run(capsys, *argv)
            assert code == 0
            outs.append(out)
        return outs, (d / "o.csv").read_bytes(), (d / "m.txt").read_bytes()

    assert pipeline(tmp_path / "a") == pipeline(tmp_path / "b")


# --- errors ------------------------------------------------------------------------


def _one_line(err):
    assert err.count("\n") == 1 and err.startswith("pbrt: error[")


def test_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "detect", "--tracks", tmp_path / "nope.csv")
    assert code == cli.EXIT_MISSING == 3
    _one_line(err)


def test_unknown_flag(capsys, workdir):
    code, _, err = run(capsys, "train", "--obs", workdir / "obs.csv", "--bogus")
    assert code == cli.EXIT_USAGE == 2
    _one_line(err)
    code, _, _ = run(capsys, "frobnicate")
    assert code == 2


def test_schema_mismatch(capsys, tmp_path, workdir):
    bad = tmp_path / "bad.csv"
    bad.write_text("driver_id,stimulus\nx,steady\n")
    code, _, err = run(capsys, "train", "--obs", bad)
    assert code == cli.EXIT_SCHEMA == 4
    _one_line(err)
    code, _, err = run(capsys, "detect", "--tracks", bad)
    assert code == 4
    broken = tmp_path / "m.txt"
    broken.write_text((workdir / "model.txt").read_text()[:200])
    code, _, err = run(capsys, "estimate", "--model", broken)
    assert code == 4 and "ChecksumError" in err


def test_value_errors(capsys, workdir):
    for argv in (["analyze-far", "--kappa", "-1"], ["analyze-far", "--samples", "10"],
                 ["analyze-far", "--poa-grid", "0.5,1.5"], ["analyze-far", "--tau", "0.5"],
                 ["estimate", "--model", workdir / "model.txt", "--t-star", "0"]):
        code, _, err = run(capsys, *argv)
        assert code == cli.EXIT_VALUE == 6, argv
        _one_line(err)


def test_numeric_failure(capsys, workdir, monkeypatch):
    def boom(*a, **k):
        raise FitError("fit did not converge", grad_norm=1.0)

    monkeypatch.setattr(cli.lmm, "fit", boom)
    code, _, err = run(capsys, "train", "--obs", workdir / "obs.csv")
    assert code == cli.EXIT_NUMERIC == 5
    _one_line(err)


def test_exit_codes_distinct():
    codes = [cli.EXIT_OK, cli.EXIT_INTERNAL, cli.EXIT_USAGE, cli.EXIT_MISSING, cli.EXIT_SCHEMA,
             cli.EXIT_NUMERIC, cli.EXIT_VALUE]
    assert len(set(codes)) == len(codes)


# --- config file ---------------------------------------------------------------------


def test_config_values_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 5\nanalyze-far:\n  poa-grid: [0.01, 0.02]\n  samples: 100000\n  kappa: 0.2\n")
    code, from_cfg, _ = run(capsys, "analyze-far", "--config", cfg)
    assert code == 0
    _, direct, _ = run(capsys, "analyze-far", "--seed", "5", "--poa-grid", "0.01,0.02", "--samples", "100000",
                       "--kappa", "0.2")
    assert from_cfg == direct
    _, overridden, _ = run(capsys, "analyze-far", "--config", cfg, "--kappa", "0.0")
    _, direct0, _ = run(capsys, "analyze-far", "--seed", "5", "--poa-grid", "0.01,0.02", "--samples", "100000")
    assert overridden == direct0


def test_config_supplies_required_flags(capsys, tmp_path, workdir):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"estimate:\n  model: {workdir / 'model.txt'}\n  log: {workdir / 'obs.csv'}\n  driver: sim01\n")
    code, out, _ = run(capsys, "estimate", "--config", cfg)
    assert code == 0 and out.splitlines()[1].startswith("sim01,")


@pytest.mark.parametrize("text", ["analyze-far:\n  nonsense: 1\n", "[1, 2]\n", "analyze-far: [\n",
                                  "analyze-far:\n  samples: many\n"])
def test_config_errors(capsys, tmp_path, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    code, _, err = run(capsys, "analyze-far", "--config", cfg)
    assert code == cli.EXIT_SCHEMA
    _one_line(err)


def test_list_parsers():
    assert cli._floats("0.1, 0.2") == [0.1, 0.2]
    assert cli._ints([1, 2.0]) == [1, 2]
    with pytest.raises(argparse.ArgumentTypeError):
        cli._floats("a,b")

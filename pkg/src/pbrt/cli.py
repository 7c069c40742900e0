"""Command-line entry point: detect, train, estimate, analyze-far, simulate.

Options can also come from a YAML config file (``--config``).  Keys are the
long flag names (dashes or underscores), either at the top level or under a
section named after the subcommand; flags given on the command line win.
All randomness derives from the single ``--seed``.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad flag value)
  3  input file missing
  4  schema mismatch in an input file (trajectories, signals, observations,
     model file, config file)
  5  numerical failure (model fit did not converge, singular system)
  6  invalid value outside its documented range

Errors are printed to stderr as a single line ``pbrt: error[<kind>]: <message>``.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import detect, estimator, lmm, sim, trajectory, warning

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_NUMERIC = 5
EXIT_VALUE = 6

EXIT_HELP = """exit codes:
  0 success, 1 internal error, 2 usage error, 3 input file missing,
  4 schema mismatch in an input or config file, 5 numerical failure,
  6 value outside its documented range"""


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, f"{self.prog}: {message}")


def _floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text) -> list:
    return [int(v) for v in _floats(text)]


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", EXIT_MISSING, f"no such file: {p}")
    return p


def _write(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# subcommands


DETECTOR_FLAGS = {
    "steady_max_separation": "steady-state separation limit, m (default 76.2)",
    "steady_speed_band": "steady-state speed band, m/s (default 1.52)",
    "steady_duration": "minimum steady-state duration, s (default 4)",
    "accel_threshold": "braking deceleration threshold, m/s^2 (default 0.1524)",
    "headway_cutoff": "maximum time headway, s (default 10)",
    "min_speed": "minimum speed at the stimulus, m/s (default 8.94)",
    "response_cutoff_c": "non-steady response cutoff c, m/s^2 (default 0.3)",
    "max_response_time": "longest response searched after a stimulus, s (default 10)",
}


def cmd_detect(args) -> str:
    overrides = {k: getattr(args, k) for k in DETECTOR_FLAGS if getattr(args, k) is not None}
    cfg = dataclasses.replace(detect.DetectorConfig(), **overrides)
    tracks = trajectory.load_tracks(_existing(args.tracks))
    signals = trajectory.load_signals(_existing(args.signals)) if args.signals else []
    return detect.format_observations(detect.detect_all(tracks, signals, cfg))


def cmd_train(args) -> str:
    obs = detect.load_observations(_existing(args.obs))
    params = lmm.fit(lmm.build_design(obs), reml=args.reml, diagonal=args.diagonal, maxiter=args.maxiter)
    if args.sim_correction:
        params = lmm.adjust_intercepts(params, args.sim_delta, args.headway_ref)
    return lmm.dumps_model(params)


def _driver_log(args, params):
    if args.store:
        store = estimator.DriverStore(args.store)
        if args.append:
            store.append(detect.load_observations(_existing(args.append)))
        if args.driver is None:
            raise CliError("usage", EXIT_USAGE, "estimate: --store requires --driver")
        return args.driver, store.observations(args.driver)
    obs = detect.load_observations(_existing(args.log)) if args.log else []
    ids = sorted({o.driver_id for o in obs})
    driver = args.driver
    if driver is None:
        if len(ids) > 1:
            raise CliError("usage", EXIT_USAGE, f"estimate: log holds {len(ids)} drivers; pass --driver")
        driver = ids[0] if ids else ""
    return driver, [o for o in obs if o.driver_id == driver]


def cmd_estimate(args) -> str:
    params = lmm.load_model(_existing(args.model))
    driver, obs = _driver_log(args, params)
    est = estimator.estimate_driver(params, driver, obs)
    dist = estimator.pbrt_distribution(est, params, args.stimulus, args.t_star)
    return estimator.format_summary(est, dist, args.quantiles)


def population_from_model(params: lmm.MixedModelParams, stimulus, t_star: float,
                          tau: Optional[float] = None) -> warning.PopulationModel:
    """Marginal log-PBRT of a new driver and, unless given, tau^2 = x' Sigma_gamma x."""
    dist = estimator.population_distribution(params, stimulus, t_star)
    if tau is None:
        x = lmm.basis(stimulus, t_star)
        tau = float(np.sqrt(max(x @ params.sigma_gamma @ x, 0.0)))
    return warning.PopulationModel(warning.LognormalParams(dist.mu, dist.sigma), tau)


def cmd_analyze_far(args) -> str:
    if args.model:
        pop = population_from_model(lmm.load_model(_existing(args.model)), args.stimulus, args.t_star, args.tau)
    else:
        pop = warning.PopulationModel(warning.LognormalParams(args.mu, args.sigma), args.tau)
    rows = warning.far_poa_curve(pop, warning.ErrorModel(args.kappa), args.poa_grid,
                                 n_mc=args.samples, seed=args.seed, plug_in=args.plug_in)
    return warning.format_far_table(rows)


def cmd_simulate(args) -> str:
    cfg = sim.SimConfig(seed=args.seed, n_drivers=args.n_drivers, obs_per_driver=tuple(args.obs_per_driver))
    if args.scenario == "observations":
        obs, gammas = sim.simulate_records(cfg)
        if args.truth:
            Path(args.truth).write_text(sim.format_gammas(gammas))
        return detect.format_observations(obs)
    if args.scenario == "kinematics":
        if not args.out_dir:
            raise CliError("usage", EXIT_USAGE, "simulate: kinematics scenario requires --out-dir")
        scenario = sim.simulate_kinematics(cfg, sim.planted_corpus(cfg, args.events), n_null=args.null_pairs)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trajectory.save_tracks(scenario.tracks, out / "tracks.csv", cfg.dt)
        trajectory.save_signals(scenario.signals, out / "signals.csv")
        (out / "truth.csv").write_text(sim.format_truth(scenario.truth))
        return ""
    report = sim.convergence_study(cfg, args.grid, n_reps=args.reps, stimulus=args.stimulus, t_star=args.t_star)
    return sim.format_report(report)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file; command-line flags override its values")

    parser = _Parser(prog="pbrt", description="Brake response time detection, modelling and warning analysis.",
                     epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=EXIT_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("detect", "Extract brake response time observations from trajectories.")
    p.add_argument("--tracks", required=True, help="trajectory file")
    p.add_argument("--signals", help="signal phase file (optional)")
    p.add_argument("--out", default="-", help="observation file to write (default: stdout)")
    for name, text in DETECTOR_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=float, default=None, help=text)
    p.set_defaults(func=cmd_detect)

    p = add("train", "Fit the mixed model to an observation file and write a model file.")
    p.add_argument("--obs", required=True, help="observation file")
    p.add_argument("--out", default="-", help="model file to write (default: stdout)")
    p.add_argument("--reml", action="store_true", help="restricted maximum likelihood instead of ML")
    p.add_argument("--diagonal", action="store_true", help="diagonal random-effects covariance")
    p.add_argument("--maxiter", type=int, default=2000, help="optimizer iteration limit (default 2000)")
    p.add_argument("--sim-correction", action="store_true",
                   help="raise every stimulus intercept so the mean BRT grows by --sim-delta")
    p.add_argument("--sim-delta", type=float, default=0.3, help="mean BRT shift, s (default 0.3)")
    p.add_argument("--headway-ref", type=float, default=2.0,
                   help="headway at which the mean shift is exact, s (default 2.0)")
    p.set_defaults(func=cmd_train)

    p = add("estimate", "Print a driver's PBRT distribution summary.")
    p.add_argument("--model", required=True, help="model file")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--log", help="observation file holding the driver's history (missing: population fallback)")
    src.add_argument("--store", help="driver store directory")
    p.add_argument("--append", help="observation file appended to --store before estimating")
    p.add_argument("--driver", help="driver id (required with --store or a multi-driver log)")
    p.add_argument("--stimulus", choices=[s.value for s in detect.STIMULI], default="steady",
                   help="stimulus type (default steady)")
    p.add_argument("--t-star", type=float, default=estimator.DEFAULT_T_STAR, help="reference headway, s (default 1.5)")
    p.add_argument("--quantiles", type=_floats, default=list(estimator.DEFAULT_QUANTILES),
                   help="comma-separated probabilities (default 0.05,0.1,0.5,0.9,0.95)")
    p.set_defaults(func=cmd_estimate)

    p = add("analyze-far", "False-alarm rate of population vs individualized warning thresholds.")
    p.add_argument("--model", help="model file; population parameters come from it instead of --mu/--sigma")
    p.add_argument("--stimulus", choices=[s.value for s in detect.STIMULI], default="steady",
                   help="stimulus type used with --model (default steady)")
    p.add_argument("--t-star", type=float, default=estimator.DEFAULT_T_STAR,
                   help="reference headway used with --model, s (default 1.5)")
    p.add_argument("--mu", type=float, default=warning.DEFAULT_POPULATION.mu, help="log-mean (default 0.17)")
    p.add_argument("--sigma", type=float, default=warning.DEFAULT_POPULATION.sigma, help="log-sd (default 0.44)")
    p.add_argument("--tau", type=float, default=None,
                   help="between-driver sd of log-means (default sigma/sqrt(2), or from --model)")
    p.add_argument("--kappa", type=float, default=0.0, help="sd of the estimation error on log-means (default 0)")
    p.add_argument("--poa-grid", type=_floats, default=list(warning.DEFAULT_POA_GRID),
                   help="comma-separated probabilities of accident (default 9 log-spaced from 0.001 to 0.1)")
    p.add_argument("--samples", type=int, default=1_000_000, help="Monte Carlo drivers, at least 100000")
    p.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    p.add_argument("--plug-in", action="store_true",
                   help="use noisy log-mean estimates as exact instead of the predictive threshold")
    p.set_defaults(func=cmd_analyze_far)

    p = add("simulate", "Generate synthetic observations, trajectories or a convergence report.")
    p.add_argument("--scenario", choices=["observations", "kinematics", "convergence"], required=True,
                   help="what to generate")
    p.add_argument("--seed", type=int, default=0, help="root random seed (default 0)")
    p.add_argument("--n-drivers", type=int, default=200, help="drivers for the observations scenario (default 200)")
    p.add_argument("--obs-per-driver", type=_ints, default=[10, 10, 10],
                   help="observations per driver for steady,nonsteady,signal (default 10,10,10)")
    p.add_argument("--out", default="-", help="observations or report file (default: stdout)")
    p.add_argument("--truth", help="observations scenario: also write true driver offsets here")
    p.add_argument("--out-dir", help="kinematics scenario: directory for tracks.csv, signals.csv, truth.csv")
    p.add_argument("--events", type=int, default=100, help="kinematics: planted events per stimulus (default 100)")
    p.add_argument("--null-pairs", type=int, default=100, help="kinematics: stimulus-free pairs (default 100)")
    p.add_argument("--grid", type=_ints, default=[0, 5, 30], help="convergence: sample sizes (default 0,5,30)")
    p.add_argument("--reps", type=int, default=200, help="convergence: replications (default 200)")
    p.add_argument("--stimulus", choices=[s.value for s in detect.STIMULI], default="steady",
                   help="convergence: stimulus type (default steady)")
    p.add_argument("--t-star", type=float, default=estimator.DEFAULT_T_STAR,
                   help="convergence: reference headway, s (default 1.5)")
    p.set_defaults(func=cmd_simulate)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


COMMANDS = ("detect", "train", "estimate", "analyze-far", "simulate")


def _peek(argv):
    """Subcommand and --config value, found without enforcing required flags."""
    command = next((a for a in argv if a in COMMANDS), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def _apply_config(parser, argv, command, config):
    try:
        data = yaml.safe_load(_existing(config).read_text()) or {}
    except yaml.YAMLError as exc:
        raise CliError("schema", EXIT_SCHEMA, f"config {config}: {' '.join(str(exc).split())}") from None
    if not isinstance(data, dict):
        raise CliError("schema", EXIT_SCHEMA, f"config {config}: expected a mapping at the top level")
    values = {k: v for k, v in data.items() if k not in COMMANDS}
    section = data.get(command) or {}
    if not isinstance(section, dict):
        raise CliError("schema", EXIT_SCHEMA, f"config {config}: section {command!r} must be a mapping")
    values.update(section)
    sub = _subparser(parser, command)
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = str(key).replace("-", "_")
        if dest not in known or dest in ("help", "config"):
            raise CliError("schema", EXIT_SCHEMA, f"config {config}: unknown option {key!r} for {command}")
        action = next(a for a in sub._actions if a.dest == dest)
        if action.type is not None and value is not None:
            try:
                value = action.type(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError("schema", EXIT_SCHEMA, f"config {config}: {key}: {exc}") from None
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # a config value satisfies a required flag
    for a in sub._actions:
        if a.dest in defaults and a.required:
            a.required = False
    return parser.parse_args(argv)


def _validate(args):
    checks = []
    if args.command == "estimate":
        checks += [(args.t_star > 0, "--t-star must be positive"),
                   (all(0 < q < 1 for q in args.quantiles), "--quantiles must lie in (0, 1)")]
    if args.command == "analyze-far":
        checks += [(all(0 < p < 1 for p in args.poa_grid) and args.poa_grid, "--poa-grid must be non-empty in (0, 1)"),
                   (args.kappa >= 0, "--kappa must be non-negative"),
                   (args.samples >= 100_000, "--samples must be at least 100000"),
                   (args.t_star > 0, "--t-star must be positive")]
    if args.command == "simulate":
        checks += [(args.n_drivers >= 1, "--n-drivers must be at least 1"),
                   (len(args.obs_per_driver) == 3 and min(args.obs_per_driver) >= 0,
                    "--obs-per-driver needs three non-negative counts"),
                   (args.events >= 0 and args.null_pairs >= 0, "--events and --null-pairs must be non-negative"),
                   (args.reps >= 1 and args.grid and min(args.grid) >= 0, "--reps and --grid must be positive")]
    for ok, msg in checks:
        if not ok:
            raise CliError("value", EXIT_VALUE, msg)


def _run(argv: Sequence[str]) -> int:
    parser = build_parser()
    argv = list(argv)
    command, config = _peek(argv)
    if command and config and "-h" not in argv and "--help" not in argv:
        args = _apply_config(parser, argv, command, config)
    else:
        args = parser.parse_args(argv)
    _validate(args)
    text = args.func(args)
    out = getattr(args, "out", "-")
    if text or out not in (None, "-"):
        _write(text, out)
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit status; errors go to stderr as one line."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        return _run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except (trajectory.TrajectoryFormatError, trajectory.TrajectoryValidationError,
            detect.ObservationError, lmm.ModelFileError) as exc:
        kind, code, msg = "schema", EXIT_SCHEMA, f"{type(exc).__name__}: {exc}"
    except (lmm.FitError, np.linalg.LinAlgError) as exc:
        kind, code, msg = "numeric", EXIT_NUMERIC, f"{type(exc).__name__}: {exc}"
    except (ValueError, sim.GenerationError) as exc:
        kind, code, msg = "value", EXIT_VALUE, f"{type(exc).__name__}: {exc}"
    except FileNotFoundError as exc:
        kind, code, msg = "missing-file", EXIT_MISSING, str(exc)
    except Exception as exc:  # pragma: no cover - last resort, still one line
        kind, code, msg = "internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}"
    print(f"pbrt: error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Synthetic data for end-to-end validation.

Three generators: brake response observations drawn from the mixed model,
kinematic trajectories with planted braking events for the detectors, and
a Monte Carlo study of how per-driver PBRT estimates converge with sample
size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .detect import STIMULI, BrtObservation, DetectorConfig, StimulusType, detect_all
from .estimator import estimate_driver, pbrt_distribution, population_distribution
from .lmm import N_COEF, MixedModelParams, basis, build_design, fit
from .trajectory import Phase, SignalPhaseEvent, TrajectorySample, VehicleTrack


class GenerationError(ValueError):
    """A planted event cannot be realized with the requested kinematics."""


def _default_beta():
    # log-BRT curves rising from about 0.7 s at 0.5 s headway to about 2.5 s at 6 s
    return np.array([-0.446, 0.1677, 0.010,
                     -0.350, 0.150, 0.012,
                     -0.300, 0.160, 0.008])


def block_covariance(sd=(0.2, 0.05, 0.005), within_corr=None, cross_corr: float = 0.2) -> np.ndarray:
    """Sigma_gamma = R_stim (x) B: identical within-stimulus blocks, exchangeable cross-stimulus correlation."""
    sd = np.asarray(sd, dtype=float)
    if within_corr is None:
        within_corr = np.array([[1.0, -0.3, 0.1], [-0.3, 1.0, -0.3], [0.1, -0.3, 1.0]])
    B = np.outer(sd, sd) * np.asarray(within_corr)
    R = (1 - cross_corr) * np.eye(3) + cross_corr * np.ones((3, 3))
    return np.kron(R, B)


def psd_factor(S: np.ndarray) -> np.ndarray:
    """F with F F' = S for symmetric PSD S (exactly zero for S = 0)."""
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ValueError("covariance matrix is not positive semidefinite")
    return U * np.sqrt(np.clip(w, 0, None))


@dataclass(frozen=True, eq=False)
class SimConfig:
    seed: int = 0
    n_drivers: int = 200
    obs_per_driver: tuple = (10, 10, 10)
    true_beta: np.ndarray = field(default_factory=_default_beta)
    true_sigma2: float = 0.04
    true_sigma_gamma: np.ndarray = field(default_factory=block_covariance)
    headway_range: tuple = (0.5, 6.0)
    # kinematics
    dt: float = 0.1
    cruise_speed: float = 20.0
    closing_speed: float = 3.0
    signal_speed: float = 15.0
    lead_decel: float = 2.0
    lead_brake_duration: float = 2.0
    follower_decel: float = 3.0
    steady_lead_in: float = 6.0
    steady_headway: float = 2.0
    nonsteady_headway: float = 4.0
    signal_headway: float = 3.0
    tail: float = 5.0

    def __post_init__(self):
        psd_factor(np.asarray(self.true_sigma_gamma))
        lo, hi = self.headway_range
        if not 0 < lo < hi:
            raise ValueError("headway_range must be positive and increasing")
        if self.true_sigma2 < 0 or self.dt <= 0:
            raise ValueError("true_sigma2 must be non-negative and dt positive")

    def true_params(self, cov_beta: Optional[np.ndarray] = None) -> MixedModelParams:
        return MixedModelParams(self.true_beta, max(self.true_sigma2, 1e-300), self.true_sigma_gamma,
                                np.zeros((N_COEF, N_COEF)) if cov_beta is None else cov_beta)


# ---------------------------------------------------------------------------
# mixed-model observations


def simulate_records(cfg: SimConfig):
    """Observation records and true per-driver offsets drawn from the mixed model."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    F = psd_factor(np.asarray(cfg.true_sigma_gamma))
    sd = math.sqrt(cfg.true_sigma2)
    lo, hi = cfg.headway_range
    width = len(str(cfg.n_drivers - 1))
    obs, gammas = [], {}
    for d in range(cfg.n_drivers):
        did = f"sim{d:0{width}d}"
        gamma = F @ rng.standard_normal(N_COEF)
        gammas[did] = gamma
        k = 0
        for stim, n in zip(STIMULI, cfg.obs_per_driver):
            t = rng.uniform(lo, hi, n)
            eps = rng.standard_normal(n)
            for ti, ei in zip(t, eps):
                y = basis(stim, ti) @ (cfg.true_beta + gamma) + sd * ei
                obs.append(BrtObservation(did, stim, float(k), float(math.exp(y)), float(ti)))
                k += 1
    return obs, gammas


def simulate_observations(cfg: SimConfig):
    """(TrainingSet, {driver_id: true gamma}) drawn from the mixed model."""
    obs, gammas = simulate_records(cfg)
    return build_design(obs), gammas


# ---------------------------------------------------------------------------
# kinematic scenarios


@dataclass(frozen=True)
class PlantedEvent:
    stimulus: StimulusType
    brt: float
    headway: Optional[float] = None
    driver_id: Optional[str] = None
    turn: bool = False
    # signal scenarios only: a car between driver and light that brakes
    # "first" (before the driver) or "after" the driver
    intervening: Optional[str] = None
    lead_in: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "stimulus", StimulusType(self.stimulus))
        if not self.brt > 0:
            raise GenerationError(f"planted brt must be positive, got {self.brt}")
        if self.intervening not in (None, "first", "after"):
            raise GenerationError(f"intervening must be None, 'first' or 'after', got {self.intervening!r}")


@dataclass(frozen=True)
class PlantedTruth:
    index: int
    driver_id: str
    stimulus: StimulusType
    t_stimulus: float
    brt: float
    headway: float
    expect_detection: bool


@dataclass
class KinematicScenario:
    tracks: list
    signals: list
    truth: list


def _integrate(vehicle_id, driver_id, lane_id, x0, v0, accel_fn, t_end, dt, turns=()):
    """Piecewise-constant acceleration held over each step; speed floors at zero."""
    n = int(round(t_end / dt)) + 1
    samples = []
    x, v = x0, v0
    for k in range(n):
        t = round(k * dt, 10)
        a = accel_fn(t, v)
        if v <= 0 and a < 0:
            a = 0.0
        samples.append(TrajectorySample(t, x, v, a))
        if a < 0 and v + a * dt < 0:
            tau = v / -a
            x += v * tau + 0.5 * a * tau * tau
            v = 0.0
        else:
            x += v * dt + 0.5 * a * dt * dt
            v += a * dt
    return VehicleTrack(vehicle_id, driver_id, lane_id, samples, frozenset(turns))


def _on_grid(t, dt):
    """First grid time at or after t."""
    return math.ceil(t / dt - 1e-9) * dt


def simulate_kinematics(cfg: SimConfig, planted: Sequence[PlantedEvent], n_null: int = 0,
                        det: DetectorConfig = DetectorConfig(), check_feasible: bool = True) -> KinematicScenario:
    """Trajectories (and signal events) realizing each planted event in its own lane.

    The follower's response is a step change in acceleration at the first
    sample at or after stimulus + brt.  ``n_null`` adds stimulus-free pairs
    cruising at constant speed.  ``check_feasible=False`` skips the
    steady-state lead-in check so negative cases can be built.
    """
    dt = cfg.dt
    tracks, signals, truth = [], [], []
    for k, ev in enumerate(planted):
        lane = f"L{k:03d}"
        did = ev.driver_id or f"D{k:03d}"
        vf, vl = f"E{k:03d}F", f"E{k:03d}L"
        if ev.stimulus is StimulusType.STEADY:
            lead_in = cfg.steady_lead_in if ev.lead_in is None else ev.lead_in
            if check_feasible and lead_in < det.steady_duration:
                raise GenerationError(
                    f"event {k}: steady lead-in {lead_in} s is shorter than the required {det.steady_duration} s"
                )
            h = cfg.steady_headway if ev.headway is None else ev.headway
            v0 = cfg.cruise_speed
            sep = h * v0
            if sep > det.steady_max_separation:
                raise GenerationError(f"event {k}: separation {sep:.1f} m too large for steady state")
            t_s = _on_grid(lead_in, dt)
            t_r = _on_grid(t_s + ev.brt, dt)
            v_end = v0 - cfg.lead_decel * cfg.lead_brake_duration
            leader = _integrate(vl, f"{did}-lead", lane, sep, v0,
                                lambda t, v: -cfg.lead_decel if t_s - 1e-9 <= t < t_s + cfg.lead_brake_duration - 1e-9 else 0.0,
                                t_r + cfg.tail, dt)
            follower = _integrate(vf, did, lane, 0.0, v0,
                                  lambda t, v: -cfg.follower_decel if t >= t_r - 1e-9 and v > v_end + 1e-9 else 0.0,
                                  t_r + cfg.tail, dt)
            tracks += [leader, follower]
            truth.append(PlantedTruth(k, did, ev.stimulus, t_s, ev.brt, h, True))
        elif ev.stimulus is StimulusType.NONSTEADY:
            lead_in = 3.0 if ev.lead_in is None else ev.lead_in
            h = cfg.nonsteady_headway if ev.headway is None else ev.headway
            v_f0 = cfg.cruise_speed
            v_l0 = v_f0 - cfg.closing_speed
            t_s = _on_grid(lead_in, dt)
            sep0 = h * v_f0 + cfg.closing_speed * t_s
            t_r = _on_grid(t_s + ev.brt, dt)
            v_end = v_l0 - cfg.lead_decel * cfg.lead_brake_duration
            leader = _integrate(vl, f"{did}-lead", lane, sep0, v_l0,
                                lambda t, v: -cfg.lead_decel if t_s - 1e-9 <= t < t_s + cfg.lead_brake_duration - 1e-9 else 0.0,
                                t_r + cfg.tail, dt)
            follower = _integrate(vf, did, lane, 0.0, v_f0,
                                  lambda t, v: -cfg.follower_decel if t >= t_r - 1e-9 and v > v_end + 1e-9 else 0.0,
                                  t_r + cfg.tail, dt)
            tracks += [leader, follower]
            truth.append(PlantedTruth(k, did, ev.stimulus, t_s, ev.brt, h, h < det.headway_cutoff))
        else:
            lead_in = 2.0 if ev.lead_in is None else ev.lead_in
            h = cfg.signal_headway if ev.headway is None else ev.headway
            v0 = cfg.signal_speed
            t_c = _on_grid(lead_in, dt)
            t_r = _on_grid(t_c + ev.brt, dt)
            sig_pos = v0 * t_c + h * v0
            sig_id = f"S{k:03d}"
            driver = _integrate(vf, did, lane, 0.0, v0,
                                lambda t, v: -cfg.follower_decel if t >= t_r - 1e-9 else 0.0,
                                t_r + cfg.tail, dt, turns=(sig_id,) if ev.turn else ())
            tracks.append(driver)
            if ev.intervening is not None:
                gap = 0.5 * h * v0
                t_lb = _on_grid(t_c + (0.5 * ev.brt if ev.intervening == "first" else ev.brt + 1.0), dt)
                lead = _integrate(vl, f"{did}-lead", lane, gap, v0,
                                  lambda t, v: -cfg.follower_decel if t >= t_lb - 1e-9 else 0.0,
                                  t_r + cfg.tail, dt)
                tracks.append(lead)
                # the intervening car reacts to the light too
                truth.append(PlantedTruth(k, f"{did}-lead", ev.stimulus, t_c, t_lb - t_c, h / 2, True))
            signals.append(SignalPhaseEvent(sig_id, lane, sig_pos, t_c, Phase.GREEN, Phase.YELLOW))
            signals.append(SignalPhaseEvent(sig_id, lane, sig_pos, t_c + 3.0, Phase.YELLOW, Phase.RED))
            expect = h <= det.headway_cutoff and not ev.turn and ev.intervening != "first"
            truth.append(PlantedTruth(k, did, ev.stimulus, t_c, ev.brt, h, expect))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    for j in range(n_null):
        lane = f"N{j:03d}"
        v0 = float(rng.uniform(10.0, 30.0))
        sep = float(rng.uniform(10.0, 70.0))
        duration = 20.0
        tracks.append(_integrate(f"N{j:03d}L", f"N{j:03d}-lead", lane, sep, v0, lambda t, v: 0.0, duration, dt))
        tracks.append(_integrate(f"N{j:03d}F", f"N{j:03d}", lane, 0.0, v0, lambda t, v: 0.0, duration, dt))
    return KinematicScenario(tracks, signals, truth)


def planted_corpus(cfg: SimConfig, n_per_stimulus: int = 100, brt_range=(0.4, 3.0),
                   suppression_cases: bool = True) -> list:
    """Random planted events for every stimulus type, drawn from ``cfg.seed``.

    Headways vary around the scenario defaults.  With ``suppression_cases``
    the list ends with one event per suppression rule (headway above the
    cutoff for both lead-car stimuli, intervening car braking first, turn
    flag) plus an intervening car that brakes after the driver, which must
    not suppress.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    lo, hi = brt_range
    events = []
    for stim in STIMULI:
        for _ in range(n_per_stimulus):
            brt = float(rng.uniform(lo, hi))
            # steady state needs the pair within the separation limit
            h = float(rng.uniform(1.0, 3.0 if stim is StimulusType.STEADY else 8.0))
            events.append(PlantedEvent(stim, brt, headway=h))
    if suppression_cases:
        events += [
            PlantedEvent(StimulusType.NONSTEADY, 1.0, headway=12.0),
            PlantedEvent(StimulusType.SIGNAL, 1.0, headway=11.0),
            PlantedEvent(StimulusType.SIGNAL, 1.2, intervening="first"),
            PlantedEvent(StimulusType.SIGNAL, 1.2, intervening="after"),
            PlantedEvent(StimulusType.SIGNAL, 1.0, turn=True),
        ]
    return events


TRUTH_COLUMNS = ("index", "driver_id", "stimulus", "t_stimulus", "brt", "headway", "expect_detection")


def format_truth(truth: Sequence[PlantedTruth]) -> str:
    lines = [",".join(TRUTH_COLUMNS)]
    for tr in truth:
        lines.append(",".join([str(tr.index), tr.driver_id, tr.stimulus.value, repr(float(tr.t_stimulus)),
                               repr(float(tr.brt)), repr(float(tr.headway)), str(int(tr.expect_detection))]))
    return "\n".join(lines) + "\n"


def format_gammas(gammas: dict) -> str:
    """True per-driver offsets, one row per driver in coefficient order."""
    lines = ["driver_id," + ",".join(f"gamma{j}" for j in range(N_COEF))]
    for did in sorted(gammas):
        lines.append(did + "," + ",".join(repr(float(v)) for v in gammas[did]))
    return "\n".join(lines) + "\n"


@dataclass
class DetectorCounts:
    planted: int = 0
    expected: int = 0
    hits: int = 0
    misses: int = 0
    suppressed: int = 0
    false_positives: int = 0
    errors: list = field(default_factory=list)


def detector_round_trip(scenario: KinematicScenario, det: DetectorConfig = DetectorConfig(),
                        tolerance: Optional[float] = None) -> DetectorCounts:
    """Match detections to planted events by driver and stimulus type.

    A hit is a detection within ``tolerance`` (default 2 dt) of the planted
    BRT; planted events that should be suppressed count as ``suppressed``
    when nothing is detected.  Anything else detected is a false positive.
    """
    obs = detect_all(scenario.tracks, scenario.signals, det)
    dt = scenario.tracks[0].dt if scenario.tracks else 0.1
    tol = 2 * dt if tolerance is None else tolerance
    counts = DetectorCounts(planted=len(scenario.truth))
    by_key: dict = {}
    for o in obs:
        by_key.setdefault((o.driver_id, o.stimulus), []).append(o)
    for tr in scenario.truth:
        found = by_key.pop((tr.driver_id, tr.stimulus), [])
        if tr.expect_detection:
            counts.expected += 1
            if len(found) >= 1 and abs(found[0].brt - tr.brt) <= tol + 1e-9:
                counts.hits += 1
                counts.errors.append(found[0].brt - tr.brt)
                counts.false_positives += len(found) - 1
            else:
                counts.misses += 1
                counts.false_positives += max(len(found) - 1, 0)
        else:
            if found:
                counts.false_positives += len(found)
            else:
                counts.suppressed += 1
    counts.false_positives += sum(len(v) for v in by_key.values())
    return counts


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class SimReport:
    sample_sizes: list = field(default_factory=list)
    pct_error_same: list = field(default_factory=list)
    pct_error_other: list = field(default_factory=list)
    n0_equals_population: bool = False
    recovery: dict = field(default_factory=dict)
    detector: Optional[DetectorCounts] = None

    def rows(self):
        return [
            {"n": n, "err_same": a, "err_other": b}
            for n, a, b in zip(self.sample_sizes, self.pct_error_same, self.pct_error_other)
        ]


Z90 = float(ndtri(0.9))


def _percentile_error(dist, mu_true, sd_true):
    q_true = np.exp(mu_true + np.array([-Z90, Z90]) * sd_true)
    q_est = dist.quantile(np.array([0.1, 0.9]))
    return float(np.abs(q_est - q_true).mean())


def convergence_study(cfg: SimConfig, sample_size_grid: Sequence[int], n_reps: int = 200,
                      params: Optional[MixedModelParams] = None, stimulus=StimulusType.STEADY,
                      t_star: float = 1.5) -> SimReport:
    """Mean absolute 10th/90th percentile error of the estimated PBRT distribution.

    Each replication draws a new driver from the true model.  ``err_same``
    uses observations of ``stimulus`` only; ``err_other`` spreads the same
    number of observations over the other two stimulus types.  Samples are
    nested across the grid within a replication.  Without ``params`` the
    population model is fitted once to ``simulate_observations(cfg)``.
    """
    grid = [int(n) for n in sample_size_grid]
    if not grid:
        raise ValueError("sample_size_grid must not be empty")
    stimulus = StimulusType(stimulus)
    report = SimReport(sample_sizes=grid)
    if params is None:
        train, _ = simulate_observations(cfg)
        params = fit(train)
        se = np.sqrt(np.diag(params.cov_beta))
        report.recovery = {
            "beta_abs_error": [float(v) for v in np.abs(params.beta - cfg.true_beta)],
            "beta_z": [float(v) for v in (params.beta - cfg.true_beta) / se],
            "sigma2_rel_error": float(params.sigma2 / cfg.true_sigma2 - 1),
        }
    pop = population_distribution(params, stimulus, t_star)
    report.n0_equals_population = True
    F = psd_factor(np.asarray(cfg.true_sigma_gamma))
    sd = math.sqrt(cfg.true_sigma2)
    x_star = basis(stimulus, t_star)
    others = [s for s in STIMULI if s is not stimulus]
    lo, hi = cfg.headway_range
    n_max = max(grid)
    err_same = np.zeros(len(grid))
    err_other = np.zeros(len(grid))
    children = np.random.SeedSequence([cfg.seed, 2]).spawn(n_reps)
    for child in children:
        rng = np.random.default_rng(child)
        gamma = F @ rng.standard_normal(N_COEF)
        coef = cfg.true_beta + gamma
        mu_true = float(x_star @ coef)
        t = rng.uniform(lo, hi, n_max)
        eps = rng.standard_normal(n_max)
        same = [BrtObservation("rep", stimulus, float(i), float(math.exp(basis(stimulus, t[i]) @ coef + sd * eps[i])),
                               float(t[i])) for i in range(n_max)]
        other = []
        for i in range(n_max):
            s = others[i % 2]
            other.append(BrtObservation("rep", s, float(i), float(math.exp(basis(s, t[i]) @ coef + sd * eps[i])),
                                        float(t[i])))
        for g, n in enumerate(grid):
            d_same = pbrt_distribution(estimate_driver(params, "rep", same[:n]), params, stimulus, t_star)
            d_other = pbrt_distribution(estimate_driver(params, "rep", other[:n]), params, stimulus, t_star)
            if n == 0 and (d_same.mu, d_same.var) != (pop.mu, pop.var):
                report.n0_equals_population = False
            err_same[g] += _percentile_error(d_same, mu_true, sd)
            err_other[g] += _percentile_error(d_other, mu_true, sd)
    report.pct_error_same = [float(v) for v in err_same / n_reps]
    report.pct_error_other = [float(v) for v in err_other / n_reps]
    return report


def format_report(report: SimReport) -> str:
    lines = ["n,err_same,err_other"]
    for r in report.rows():
        lines.append(f"{r['n']},{r['err_same']!r},{r['err_other']!r}")
    return "\n".join(lines) + "\n"

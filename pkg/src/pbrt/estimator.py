"""Online per-driver estimation of the potential brake response time distribution.

Population quantities (beta, sigma2, Sigma_gamma, Cov(beta)) are frozen from
training.  Each update recomputes the driver's BLUP offset and the covariance
of the prediction error (beta_hat + gamma_hat) - (beta + gamma) from the full
observation history; cost is O(n^3) in the driver's observation count.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from filelock import FileLock
from scipy import linalg
from scipy.special import ndtri

from .detect import (
    STIMULI,
    BrtObservation,
    StimulusType,
    format_observations,
    parse_observations,
)
from .lmm import N_COEF, MixedModelParams, basis, design_matrix, order_observations

DEFAULT_T_STAR = 1.5
DEFAULT_STIMULUS = StimulusType.STEADY


@dataclass(frozen=True)
class DriverEstimate:
    driver_id: str
    observations: tuple
    gamma_hat: np.ndarray
    cov_pred: np.ndarray
    cov_gamma_hat: np.ndarray = field(repr=False, default=None)

    @property
    def n_obs(self) -> dict:
        return {s: sum(o.stimulus == s for o in self.observations) for s in STIMULI}

    @property
    def n_total(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class PbrtDistribution:
    """Lognormal PBRT distribution: log(PBRT) ~ N(mu, var)."""

    mu: float
    var: float
    t_star: float
    stimulus: StimulusType
    var_naive: float = float("nan")

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def quantile(self, p):
        return np.exp(self.mu + ndtri(p) * self.sigma)

    def naive_quantile(self, p):
        return np.exp(self.mu + ndtri(p) * math.sqrt(self.var_naive))

    @property
    def median(self) -> float:
        return math.exp(self.mu)

    @property
    def mean(self) -> float:
        return math.exp(self.mu + 0.5 * self.var)


def empty_estimate(params: MixedModelParams, driver_id: str) -> DriverEstimate:
    """No data: gamma_hat = 0 and the prediction error covariance is Cov(beta) + Sigma_gamma."""
    return DriverEstimate(
        driver_id=driver_id,
        observations=(),
        gamma_hat=np.zeros(N_COEF),
        cov_pred=params.cov_beta + params.sigma_gamma,
        cov_gamma_hat=np.zeros((N_COEF, N_COEF)),
    )


def estimate_driver(params: MixedModelParams, driver_id: str,
                    observations: Sequence[BrtObservation]) -> DriverEstimate:
    """BLUP offset and prediction-error covariance from a driver's observations."""
    obs = tuple(order_observations(observations))
    if not obs:
        return empty_estimate(params, driver_id)
    X = design_matrix(obs)
    y = np.log([o.brt for o in obs])
    S = params.sigma_gamma
    Cb = params.cov_beta
    V = X @ S @ X.T + params.sigma2 * np.eye(len(y))
    try:
        cV = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"driver {driver_id}: V is not positive definite") from exc
    VinvX = linalg.cho_solve(cV, X)
    resid = y - X @ params.beta
    gamma_hat = S @ (VinvX.T @ resid)
    P = X.T @ VinvX                           # X' V^-1 X
    cov_gamma_hat = S @ (P - P @ Cb @ P) @ S
    cov_err = S - cov_gamma_hat               # Cov(gamma_hat - gamma)
    cross = Cb @ P @ S                        # Cov(beta_hat, gamma_hat)-type term
    cov_pred = Cb + cov_err - cross - cross.T
    cov_pred = 0.5 * (cov_pred + cov_pred.T)
    return DriverEstimate(driver_id, obs, gamma_hat, cov_pred, 0.5 * (cov_gamma_hat + cov_gamma_hat.T))


def update(estimate: DriverEstimate, params: MixedModelParams, new_obs: BrtObservation) -> DriverEstimate:
    """Append one observation and recompute the estimate from the full history."""
    if new_obs.driver_id != estimate.driver_id:
        raise ValueError(f"observation for driver {new_obs.driver_id} given to estimate of {estimate.driver_id}")
    return estimate_driver(params, estimate.driver_id, estimate.observations + (new_obs,))


def pbrt_distribution(estimate: DriverEstimate, params: MixedModelParams,
                      stimulus=DEFAULT_STIMULUS, t_star: float = DEFAULT_T_STAR) -> PbrtDistribution:
    """Log-PBRT mean and conservative variance at reference headway ``t_star``."""
    if not t_star > 0:
        raise ValueError(f"t_star must be positive, got {t_star}")
    stimulus = StimulusType(stimulus)
    x = basis(stimulus, t_star)
    mu = float(x @ (params.beta + estimate.gamma_hat))
    var = float(x @ estimate.cov_pred @ x) + params.sigma2
    return PbrtDistribution(mu, var, t_star, stimulus, var_naive=params.sigma2)


def population_distribution(params: MixedModelParams, stimulus=DEFAULT_STIMULUS,
                            t_star: float = DEFAULT_T_STAR) -> PbrtDistribution:
    return pbrt_distribution(empty_estimate(params, ""), params, stimulus, t_star)


DEFAULT_QUANTILES = (0.05, 0.1, 0.5, 0.9, 0.95)


def format_summary(estimate: DriverEstimate, dist: PbrtDistribution,
                   quantiles: Sequence[float] = DEFAULT_QUANTILES) -> str:
    """One-row delimited summary: counts, log-scale moments and PBRT quantiles in seconds."""
    header = ["driver_id", "stimulus", "t_star", "n_obs", "mu", "var", "var_naive"]
    header += [f"q{q!r}" for q in quantiles]
    qs = dist.quantile(np.asarray(quantiles, dtype=float))
    row = [estimate.driver_id, dist.stimulus.value, repr(float(dist.t_star)), str(estimate.n_total),
           repr(float(dist.mu)), repr(float(dist.var)), repr(float(dist.var_naive))]
    row += [repr(float(v)) for v in np.atleast_1d(qs)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerow(row)
    return buf.getvalue()


def estimator_complexity_probe(n: int, params: Optional[MixedModelParams] = None,
                               repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time (seconds) of one update at ``n`` prior observations."""
    if params is None:
        from .sim import SimConfig
        cfg = SimConfig()
        params = MixedModelParams(cfg.true_beta, cfg.true_sigma2, cfg.true_sigma_gamma,
                                  np.eye(N_COEF) * 1e-4)
    rng = np.random.default_rng(seed)
    stims = list(STIMULI)
    obs = [
        BrtObservation("probe", stims[i % 3], float(i), float(np.exp(rng.normal(0.2, 0.3))),
                       float(rng.uniform(0.5, 6.0)))
        for i in range(n)
    ]
    est = estimate_driver(params, "probe", obs[:-1]) if n else empty_estimate(params, "probe")
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        if n:
            update(est, params, obs[-1])
        else:
            empty_estimate(params, "probe")
        best = min(best, time.perf_counter() - t0)
    return best


# ---------------------------------------------------------------------------
# driver store


class DriverStore:
    """Per-driver append-only observation logs under one directory.

    Layout: ``index.csv`` maps driver ids to log files; each log uses the
    observation row format.  Writes to one driver hold that driver's lock;
    estimates are always recomputed from the stored observations.
    """

    INDEX = "index.csv"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _filename(self, driver_id: str) -> str:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", driver_id)[:64]
        return f"{safe}-{hashlib.sha1(driver_id.encode()).hexdigest()[:10]}.obs"

    def _lock(self, name: str) -> FileLock:
        return FileLock(str(self.root / f".{name}.lock"))

    def log_path(self, driver_id: str) -> Path:
        return self.root / self._filename(driver_id)

    def drivers(self) -> list:
        path = self.root / self.INDEX
        if not path.exists():
            return []
        rows = list(csv.reader(io.StringIO(path.read_text())))[1:]
        return [r[0] for r in rows if r]

    def _register(self, driver_id: str) -> None:
        with self._lock(self.INDEX):
            known = set(self.drivers())
            if driver_id in known:
                return
            path = self.root / self.INDEX
            new = not path.exists()
            with open(path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if new:
                    w.writerow(["driver_id", "log"])
                w.writerow([driver_id, self._filename(driver_id)])

    def observations(self, driver_id: str) -> list:
        path = self.log_path(driver_id)
        with self._lock(path.name):
            if not path.exists():
                return []
            return parse_observations(path.read_text())

    def append(self, observations: Iterable[BrtObservation]) -> None:
        by_driver: dict[str, list] = {}
        for o in observations:
            by_driver.setdefault(o.driver_id, []).append(o)
        for did, rows in by_driver.items():
            self._register(did)
            path = self.log_path(did)
            with self._lock(path.name):
                with open(path, "a") as fh:
                    fh.write(format_observations(rows, header=False))
                    fh.flush()
                    os.fsync(fh.fileno())

    def estimate(self, params: MixedModelParams, driver_id: str) -> DriverEstimate:
        return estimate_driver(params, driver_id, self.observations(driver_id))

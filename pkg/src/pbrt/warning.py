"""Warning thresholds and false-alarm rates for population vs individual PBRT models.

A warning is issued when the available reaction time t is below the
threshold T, chosen so the driver's reaction time exceeds T with probability
``poa``.  With t uniform on (0, T], the false-alarm rate is

    FAR = (1/T) * integral_0^T F(t) dt,

F the lognormal CDF of the driver's reaction time.  For a lognormal this has
the closed form F(T) - exp(mu + sigma^2/2) * Phi((ln T - mu - sigma^2)/sigma) / T,
which the vectorized Monte Carlo over drivers uses; the scalar population
rate is computed by adaptive quadrature.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import erfc, ndtr, ndtri

MC_CHUNK = 1 << 20


@dataclass(frozen=True)
class LognormalParams:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(x) - self.mu) / self.sigma
            out = np.exp(-0.5 * z * z) / (x * self.sigma * math.sqrt(2 * math.pi))
        return np.where(x > 0, out, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.where(x > 0, x, np.nan)) - self.mu) / (self.sigma * math.sqrt(2))
        return np.where(x > 0, 0.5 * erfc(-np.nan_to_num(z, nan=0.0)), 0.0)

    def quantile(self, p):
        return np.exp(self.mu + self.sigma * ndtri(p))


DEFAULT_POPULATION = LognormalParams(0.17, 0.44)


@dataclass(frozen=True)
class PopulationModel:
    """Hierarchy mu_d ~ N(marginal.mu, tau^2), X | mu_d ~ Lognormal(mu_d, sigma_ind^2).

    ``tau`` defaults to marginal.sigma / sqrt(2).  The mixture is exactly the
    marginal lognormal because sigma_ind^2 + tau^2 = marginal.sigma^2.
    """

    marginal: LognormalParams = DEFAULT_POPULATION
    tau: Optional[float] = None

    def __post_init__(self):
        if self.tau is None:
            object.__setattr__(self, "tau", self.marginal.sigma / math.sqrt(2))
        if not 0 <= self.tau < self.marginal.sigma:
            raise ValueError(f"tau must lie in [0, {self.marginal.sigma}), got {self.tau}")

    @property
    def sigma_ind(self) -> float:
        return math.sqrt(self.marginal.sigma ** 2 - self.tau ** 2)


@dataclass(frozen=True)
class ErrorModel:
    """Gaussian error of standard deviation ``kappa`` on a driver's estimated log-mean."""

    kappa: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")


def _check_poa(poa):
    if not 0 < poa < 1:
        raise ValueError(f"probability of accident must lie in (0, 1), got {poa}")


def threshold(dist: LognormalParams, poa: float) -> float:
    """T with P(X <= T) = 1 - poa."""
    _check_poa(poa)
    return math.exp(dist.mu + dist.sigma * float(ndtri(1.0 - poa)))


def far_given_threshold(mu, sigma, T):
    """Closed-form (1/T) * integral_0^T F(t) dt for Lognormal(mu, sigma), vectorized."""
    mu, sigma, T = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, T)))
    lt = np.log(T)
    return ndtr((lt - mu) / sigma) - np.exp(mu + 0.5 * sigma ** 2 - lt) * ndtr((lt - mu - sigma ** 2) / sigma)


def far_population(dist: LognormalParams, poa: float, epsabs: float = 1e-8) -> float:
    """False-alarm rate of the threshold policy built from ``dist`` itself."""
    T = threshold(dist, poa)
    # Gauss-Kronrod adaptive quadrature (QUADPACK qags)
    val, _ = integrate.quad(lambda t: float(dist.cdf(t)), 0.0, T, epsabs=epsabs * T, epsrel=0, limit=200)
    return val / T


@dataclass
class FarIndividualResult:
    poa: float
    far: float
    far_p10: float
    far_p90: float
    realized_poa: float
    expected_poa: float
    far_population: float
    mu_d: np.ndarray
    per_driver_far: np.ndarray
    per_driver_far_population: np.ndarray

    @property
    def ratio(self) -> float:
        return self.far / self.far_population


def individual_thresholds(pop: PopulationModel, err: ErrorModel, mu_hat, poa: float, plug_in: bool = False):
    """Per-driver thresholds from estimated log-means.

    By default the threshold comes from the predictive distribution of a
    driver's reaction time given the noisy estimate: the log-mean is shrunk
    toward the population by w = tau^2/(tau^2 + kappa^2) and the log-variance
    grows by w*kappa^2.  With ``plug_in`` the noisy estimate is used as if exact.
    """
    z = float(ndtri(1.0 - poa))
    mu_hat = np.asarray(mu_hat, dtype=float)
    s_ind = pop.sigma_ind
    k2 = err.kappa ** 2
    if plug_in or k2 == 0:
        return np.exp(mu_hat + s_ind * z)
    t2 = pop.tau ** 2
    w = t2 / (t2 + k2)
    m = pop.marginal.mu + w * (mu_hat - pop.marginal.mu)
    return np.exp(m + math.sqrt(s_ind ** 2 + w * k2) * z)


def far_individual(pop: PopulationModel, err: ErrorModel, poa: float, n_mc: int = 1_000_000,
                   seed: int = 0, plug_in: bool = False, min_samples: int = 100_000) -> FarIndividualResult:
    """Monte Carlo false-alarm rate of individualized thresholds over a driver population.

    Draws use common random numbers: for a fixed seed and ``n_mc`` the driver
    means, estimation noise and reaction-time draws are identical whatever
    ``err`` is, so results are comparable across kappa.
    """
    _check_poa(poa)
    if n_mc < min_samples:
        raise ValueError(f"n_mc must be at least {min_samples}, got {n_mc}")
    m0, tau, s_ind = pop.marginal.mu, pop.tau, pop.sigma_ind
    T_pop = threshold(pop.marginal, poa)
    mu_d, e, zx = _draws(seed, n_mc)
    mu_d = m0 + tau * mu_d
    T_d = individual_thresholds(pop, err, mu_d + err.kappa * e, poa, plug_in)
    far_d = far_given_threshold(mu_d, s_ind, T_d)
    far_pop_d = far_given_threshold(mu_d, s_ind, T_pop)
    x = np.exp(mu_d + s_ind * zx)
    p10, p90 = np.quantile(far_d, [0.1, 0.9])
    return FarIndividualResult(
        poa=poa,
        far=float(far_d.mean()),
        far_p10=float(p10),
        far_p90=float(p90),
        realized_poa=float(np.mean(x > T_d)),
        expected_poa=float(np.mean(ndtr((mu_d - np.log(T_d)) / s_ind))),
        far_population=far_population(pop.marginal, poa),
        mu_d=mu_d,
        per_driver_far=far_d,
        per_driver_far_population=far_pop_d,
    )


def _draws(seed: int, n: int):
    """Standard normal triples in fixed-size chunks, each chunk with its own spawned stream."""
    n_chunks = -(-n // MC_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    parts = []
    for k, child in enumerate(children):
        size = min(MC_CHUNK, n - k * MC_CHUNK)
        rng = np.random.default_rng(child)
        parts.append(rng.standard_normal((3, size)))
    draws = np.concatenate(parts, axis=1)
    return draws[0], draws[1], draws[2]


def far_monte_carlo(dist: LognormalParams, poa: float, n: int = 10_000_000, seed: int = 0):
    """Direct simulation of (t, X) with t ~ U(0, T]; returns (rate, standard error)."""
    T = threshold(dist, poa)
    hits = 0
    children = np.random.SeedSequence(seed).spawn(-(-n // MC_CHUNK))
    for k, child in enumerate(children):
        size = min(MC_CHUNK, n - k * MC_CHUNK)
        rng = np.random.default_rng(child)
        t = T * (1.0 - rng.random(size))
        x = np.exp(dist.mu + dist.sigma * rng.standard_normal(size))
        hits += int(np.count_nonzero(x < t))
    p = hits / n
    return p, math.sqrt(p * (1 - p) / n)


@dataclass(frozen=True)
class FarRow:
    poa: float
    far_pop: float
    far_ind: float
    far_ind_p10: float
    far_ind_p90: float
    realized_poa: float


FAR_COLUMNS = ("poa", "far_pop", "far_ind", "far_ind_p10", "far_ind_p90", "realized_poa")
DEFAULT_POA_GRID = tuple(float(p) for p in np.logspace(-3, -1, 9))


def far_poa_curve(pop: PopulationModel, err: ErrorModel, poa_grid: Sequence[float] = DEFAULT_POA_GRID,
                  n_mc: int = 1_000_000, seed: int = 0, plug_in: bool = False) -> list:
    """FAR against probability of accident for population and individualized policies."""
    rows = []
    for poa in poa_grid:
        res = far_individual(pop, err, poa, n_mc, seed, plug_in)
        rows.append(FarRow(poa, res.far_population, res.far, res.far_p10, res.far_p90, res.realized_poa))
    return rows


def format_far_table(rows: Sequence[FarRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FAR_COLUMNS)
    for r in rows:
        w.writerow([repr(float(getattr(r, c))) for c in FAR_COLUMNS])
    return buf.getvalue()

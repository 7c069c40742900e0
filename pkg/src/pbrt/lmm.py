"""Lognormal linear mixed-effects model of brake response times.

log(brt) for driver d, stimulus s at headway t has mean
(beta_s + gamma_ds) . (1, t, t^2), with gamma_d ~ N(0, Sigma_gamma) and
residual variance sigma2.  The nine coefficients are laid out as three
consecutive (1, t, t^2) blocks in stimulus order (steady, nonsteady, signal).

Fitting maximizes the marginal likelihood with beta profiled out by GLS.
Sigma_gamma is parameterized by its lower Cholesky factor and sigma2 by its
log.  Each driver enters only through the 9x9 statistics X'X, X'y and y'y,
and V_d^{-1} is applied through the identity

    V^{-1} = (I - X K X') / sigma2,   K = L (sigma2 I + L' X'X L)^{-1} L'

so no n_d x n_d matrix is ever formed and Sigma_gamma may be singular.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .detect import STIMULI, BrtObservation, ObservationError, StimulusType

N_COEF = 9
_TRIL = np.tril_indices(N_COEF)
N_CHOL = len(_TRIL[0])
LOG_2PI = math.log(2 * math.pi)

MODEL_FORMAT = "pbrt-model"
MODEL_VERSION = 1


class FitError(RuntimeError):
    """The optimizer stopped before reaching a stationary point."""

    def __init__(self, message, theta=None, grad_norm=None):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm


class ModelFileError(ValueError):
    pass


class ChecksumError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


def basis(stimulus, t: float) -> np.ndarray:
    """9-vector with (1, t, t^2) placed in the stimulus block."""
    s = StimulusType(stimulus).index
    x = np.zeros(N_COEF)
    x[3 * s:3 * s + 3] = (1.0, t, t * t)
    return x


@dataclass
class DriverData:
    driver_id: str
    X: np.ndarray
    y: np.ndarray
    stimuli: tuple


@dataclass
class TrainingSet:
    drivers: list

    @property
    def n_drivers(self) -> int:
        return len(self.drivers)

    @property
    def n_obs(self) -> int:
        return sum(len(d.y) for d in self.drivers)

    @property
    def X(self) -> np.ndarray:
        return np.vstack([d.X for d in self.drivers]) if self.drivers else np.zeros((0, N_COEF))

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([d.y for d in self.drivers]) if self.drivers else np.zeros(0)


def design_matrix(obs: Sequence[BrtObservation]) -> np.ndarray:
    if not obs:
        return np.zeros((0, N_COEF))
    return np.array([basis(o.stimulus, o.time_headway) for o in obs])


def order_observations(obs: Sequence[BrtObservation]) -> list:
    """Stable order by stimulus block, keeping observation order within a block."""
    return sorted(obs, key=lambda o: o.stimulus.index)


def build_design(obs: Sequence[BrtObservation]) -> TrainingSet:
    """Group observations by driver and build y = ln(brt) with block design rows."""
    groups: dict[str, list] = {}
    for o in obs:
        if not o.brt > 0:
            raise ObservationError(f"driver {o.driver_id}: brt must be positive, got {o.brt}")
        groups.setdefault(o.driver_id, []).append(o)
    drivers = []
    for did in sorted(groups):
        rows = order_observations(groups[did])
        drivers.append(DriverData(
            driver_id=did,
            X=design_matrix(rows),
            y=np.log([o.brt for o in rows]),
            stimuli=tuple(o.stimulus for o in rows),
        ))
    return TrainingSet(drivers)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class MixedModelParams:
    beta: np.ndarray
    sigma2: float
    sigma_gamma: np.ndarray
    cov_beta: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # C order keeps BLAS results identical before and after persistence
        for name, shape in (("beta", (N_COEF,)), ("sigma_gamma", (N_COEF, N_COEF)), ("cov_beta", (N_COEF, N_COEF))):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float).reshape(shape))
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    def block(self, stimulus) -> slice:
        s = StimulusType(stimulus).index
        return slice(3 * s, 3 * s + 3)

    def mean_log_brt(self, stimulus, t: float) -> float:
        return float(basis(stimulus, t) @ self.beta)

    def mean_brt(self, stimulus, t: float) -> float:
        """Lognormal mean BRT (seconds) of the population curve at headway ``t``."""
        return math.exp(self.mean_log_brt(stimulus, t) + 0.5 * self.sigma2)


def _chol_psd(S):
    S = 0.5 * (S + S.T)
    w, U = np.linalg.eigh(S)
    w = np.clip(w, 0, None)
    jitter = 1e-12 * max(1.0, w.max(initial=0.0))
    return np.linalg.cholesky(U @ np.diag(w + jitter) @ U.T)


def pack_theta(L: np.ndarray, sigma2: float, diagonal: bool = False) -> np.ndarray:
    head = np.diag(L) if diagonal else L[_TRIL]
    return np.concatenate([head, [math.log(sigma2)]])


def unpack_theta(theta: np.ndarray, diagonal: bool = False):
    theta = np.asarray(theta, dtype=float)
    L = np.zeros((N_COEF, N_COEF))
    if diagonal:
        L[np.diag_indices(N_COEF)] = theta[:N_COEF]
    else:
        L[_TRIL] = theta[:N_CHOL]
    return L, math.exp(theta[-1])


def n_theta(diagonal: bool = False) -> int:
    return (N_COEF if diagonal else N_CHOL) + 1


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class _Stats:
    A: np.ndarray  # (D, 9, 9)  X'X
    b: np.ndarray  # (D, 9)     X'y
    c: np.ndarray  # (D,)       y'y
    n: np.ndarray  # (D,)

    @classmethod
    def from_training(cls, train: TrainingSet, scale=None):
        Xs = [d.X if scale is None else d.X / scale for d in train.drivers]
        return cls(
            A=np.array([X.T @ X for X in Xs]),
            b=np.array([X.T @ d.y for X, d in zip(Xs, train.drivers)]),
            c=np.array([d.y @ d.y for d in train.drivers]),
            n=np.array([len(d.y) for d in train.drivers], dtype=float),
        )

    @property
    def N(self):
        return float(self.n.sum())


def pinv_sym(C: np.ndarray, rtol: float = 1e-10):
    """Generalized inverse of a symmetric PSD matrix, and its log pseudo-determinant and rank."""
    C = 0.5 * (C + C.T)
    w, U = np.linalg.eigh(C)
    keep = w > rtol * max(abs(w).max(initial=0.0), np.finfo(float).tiny)
    inv = (U[:, keep] / w[keep]) @ U[:, keep].T
    return inv, float(np.log(w[keep]).sum()), int(keep.sum())


def _evaluate(st: _Stats, L: np.ndarray, s2: float, reml: bool = False, want_grad: bool = True):
    D = len(st.n)
    eye = np.eye(N_COEF)
    LtA = np.einsum("ji,djk->dik", L, st.A)             # L' A
    M = s2 * eye + LtA @ L                               # (D,9,9)
    cM = np.linalg.cholesky(M)
    logdetM = 2 * np.log(np.diagonal(cM, axis1=1, axis2=2)).sum(axis=1)
    Minv_Lt = np.linalg.solve(M, np.broadcast_to(L.T, (D, N_COEF, N_COEF)))
    K = L @ Minv_Lt                                      # L M^-1 L'
    AK = st.A @ K
    P = (st.A - AK @ st.A) / s2                          # X'V^-1 X
    Kb = np.einsum("dij,dj->di", K, st.b)
    Xvy = (st.b - np.einsum("dij,dj->di", st.A, Kb)) / s2
    yVy = (st.c - np.einsum("di,di->d", st.b, Kb)) / s2
    C = P.sum(axis=0)
    Cinv, logdetC, rank = pinv_sym(C)
    beta = Cinv @ Xvy.sum(axis=0)
    rVr = yVy - 2 * Xvy @ beta + np.einsum("i,dij,j->d", beta, P, beta)
    logdetV = (st.n - N_COEF) * math.log(s2) + logdetM
    ll = -0.5 * (logdetV.sum() + rVr.sum() + st.N * LOG_2PI)
    if reml:
        ll += -0.5 * logdetC + 0.5 * rank * LOG_2PI
    out = {"loglik": ll, "beta": beta, "cov_beta": Cinv, "P": P}
    if not want_grad:
        return out
    q = st.b - np.einsum("dij,j->di", st.A, beta)        # X'r
    Kq = np.einsum("dij,dj->di", K, q)
    AKq = np.einsum("dij,dj->di", st.A, Kq)
    u = (q - AKq) / s2                                   # X'V^-1 r
    G = -0.5 * (P.sum(axis=0) - u.T @ u)
    trVinv = (st.n - np.einsum("dii->d", AK)) / s2
    rr = st.c - 2 * st.b @ beta + np.einsum("i,dij,j->d", beta, st.A, beta)
    rV2r = (rr - 2 * np.einsum("di,di->d", q, Kq) + np.einsum("di,di->d", Kq, AKq)) / s2 ** 2
    g_s2 = -0.5 * (trVinv - rV2r).sum()
    if reml:
        G = G + 0.5 * np.einsum("dij,jk,dkl->il", P, Cinv, P)
        I_AK = eye - AK
        XV2X = I_AK @ st.A @ np.swapaxes(I_AK, 1, 2) / s2 ** 2
        g_s2 += 0.5 * np.einsum("ij,ji->", Cinv, XV2X.sum(axis=0))
    G = 0.5 * (G + G.T)
    out["grad_sigma"] = G
    out["grad_s2"] = g_s2
    return out


def _theta_grad(res, L, s2, diagonal):
    gL = 2 * res["grad_sigma"] @ L
    head = np.diag(gL) if diagonal else gL[_TRIL]
    return np.concatenate([head, [s2 * res["grad_s2"]]])


def loglik(train: TrainingSet, theta, reml: bool = False, diagonal: bool = False) -> float:
    """Profiled marginal log-likelihood at ``theta`` (Cholesky entries, log sigma2)."""
    L, s2 = unpack_theta(theta, diagonal)
    return _evaluate(_Stats.from_training(train), L, s2, reml, want_grad=False)["loglik"]


def loglik_grad(train: TrainingSet, theta, reml: bool = False, diagonal: bool = False) -> np.ndarray:
    """Analytic gradient of :func:`loglik` with respect to ``theta``."""
    L, s2 = unpack_theta(theta, diagonal)
    res = _evaluate(_Stats.from_training(train), L, s2, reml)
    return _theta_grad(res, L, s2, diagonal)


def gls_beta(train: TrainingSet, sigma_gamma: np.ndarray, sigma2: float):
    """GLS estimate of beta and its covariance at fixed variance components."""
    L = _chol_psd(sigma_gamma)
    res = _evaluate(_Stats.from_training(train), L, sigma2, want_grad=False)
    return res["beta"], res["cov_beta"]


# ---------------------------------------------------------------------------
# fitting


def _column_scale(train: TrainingSet) -> np.ndarray:
    X = train.X
    scale = np.sqrt((X ** 2).mean(axis=0)) if len(X) else np.ones(N_COEF)
    return np.where(scale > 0, scale, 1.0)


def fit(train: TrainingSet, init: Optional[MixedModelParams] = None, *, reml: bool = False,
        diagonal: bool = False, maxiter: int = 2000, grad_tol: float = 1e-5,
        min_drivers: int = 2, min_obs: int = 20) -> MixedModelParams:
    """Maximum likelihood fit of beta, sigma2 and Sigma_gamma.

    BFGS on the profiled log-likelihood is followed by a few safeguarded
    Newton steps; the log-likelihood never decreases between accepted
    iterates.  ``meta["history"]`` records the accepted log-likelihoods.
    """
    if train.n_drivers < min_drivers:
        raise ValueError(f"fit needs at least {min_drivers} drivers, got {train.n_drivers}")
    if train.n_obs < min_obs:
        raise ValueError(f"fit needs at least {min_obs} observations, got {train.n_obs}")
    scale = _column_scale(train)
    st = _Stats.from_training(train, scale)
    N = st.N

    if init is None:
        Xs = train.X / scale
        y = train.y
        coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
        s2_0 = max(float(np.mean((y - Xs @ coef) ** 2)), 1e-8)
        L0 = math.sqrt(0.25 * s2_0) * np.eye(N_COEF)
    else:
        S = init.sigma_gamma * np.outer(scale, scale)
        L0 = np.diag(np.sqrt(np.clip(np.diag(S), 1e-12, None))) if diagonal else _chol_psd(S)
        s2_0 = init.sigma2
    theta0 = pack_theta(L0, s2_0, diagonal)

    cache = {}

    def evaluate(theta):
        key = theta.tobytes()
        if key not in cache:
            L, s2 = unpack_theta(theta, diagonal)
            try:
                res = _evaluate(st, L, s2, reml)
            except np.linalg.LinAlgError:
                return None, None
            cache.clear()
            cache[key] = (res["loglik"], _theta_grad(res, L, s2, diagonal))
        return cache[key]

    def objective(theta):
        ll, g = evaluate(theta)
        if ll is None or not np.isfinite(ll):
            return np.inf, np.zeros_like(theta)
        return -ll / N, -g / N

    history = [evaluate(theta0)[0]]

    def record(xk):
        history.append(evaluate(xk)[0])

    res = optimize.minimize(objective, theta0, jac=True, method="BFGS", callback=record,
                            options={"maxiter": maxiter, "gtol": 1e-9})
    theta = res.x
    ll, g = evaluate(theta)
    if not history or history[-1] != ll:
        history.append(ll)

    # Newton polish with a finite-difference Hessian of the analytic gradient
    for _ in range(20):
        if np.linalg.norm(g) <= 0.1 * grad_tol:
            break
        H = _fd_hessian(lambda th: evaluate(th)[1], theta)
        step = -np.linalg.lstsq(H, g, rcond=1e-12)[0]
        if g @ step <= 0:
            step = g / max(np.abs(np.diag(H)).max(), 1.0)
        accepted = False
        for shrink in 0.5 ** np.arange(30):
            cand = theta + shrink * step
            ll_c, g_c = evaluate(cand)
            if ll_c is not None and np.isfinite(ll_c) and ll_c >= ll:
                theta, ll, g = cand, ll_c, g_c
                history.append(ll)
                accepted = True
                break
        if not accepted:
            break

    grad_norm = float(np.linalg.norm(g))
    if grad_norm > grad_tol * max(1.0, N / 100):
        raise FitError(
            f"fit did not converge: gradient norm {grad_norm:.3g} after {res.nit} iterations ({res.message})",
            theta=theta, grad_norm=grad_norm,
        )
    L, s2 = unpack_theta(theta, diagonal)
    out = _evaluate(st, L, s2, reml, want_grad=False)
    inv_scale = 1.0 / scale
    sigma_gamma = (L @ L.T) * np.outer(inv_scale, inv_scale)
    meta = {
        "n_obs": int(train.n_obs),
        "n_drivers": int(train.n_drivers),
        "loglik": float(ll),
        "method": "REML" if reml else "ML",
        "diagonal": bool(diagonal),
        "iterations": int(res.nit),
        "grad_norm": grad_norm,
        "history": [float(h) for h in history],
    }
    return MixedModelParams(
        beta=out["beta"] * inv_scale,
        sigma2=s2,
        sigma_gamma=0.5 * (sigma_gamma + sigma_gamma.T),
        cov_beta=out["cov_beta"] * np.outer(inv_scale, inv_scale),
        meta=meta,
    )


def _fd_hessian(grad, theta, h=1e-5):
    n = len(theta)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


def theta_for(params: MixedModelParams, diagonal: bool = False) -> np.ndarray:
    """Unscaled theta corresponding to fitted parameters (for likelihood checks)."""
    return pack_theta(_chol_psd(params.sigma_gamma), params.sigma2, diagonal)


# ---------------------------------------------------------------------------
# simulator correction


def adjust_intercepts(params: MixedModelParams, delta_seconds: float = 0.3,
                      headway_ref: float = 2.0) -> MixedModelParams:
    """Shift each stimulus intercept so the population mean BRT at ``headway_ref`` grows by ``delta_seconds``.

    The mean is the lognormal mean exp(x'beta + sigma2/2) of the fitted curve.
    """
    beta = params.beta.copy()
    for stim in STIMULI:
        m = params.mean_brt(stim, headway_ref)
        beta[3 * stim.index] += math.log((m + delta_seconds) / m)
    meta = dict(params.meta)
    meta["sim_correction"] = {"delta_seconds": delta_seconds, "headway_ref": headway_ref}
    return MixedModelParams(beta, params.sigma2, params.sigma_gamma, params.cov_beta, meta)


# ---------------------------------------------------------------------------
# persistence


def _payload(params: MixedModelParams) -> str:
    body = {
        "beta": [float(v) for v in params.beta],
        "sigma2": params.sigma2,
        # column-major
        "sigma_gamma": [float(v) for v in params.sigma_gamma.flatten(order="F")],
        "cov_beta": [float(v) for v in params.cov_beta.flatten(order="F")],
        "meta": params.meta,
    }
    return json.dumps(body, indent=1, sort_keys=True)


def dumps_model(params: MixedModelParams) -> str:
    payload = _payload(params)
    digest = hashlib.sha256(payload.encode()).hexdigest()
    return f"{MODEL_FORMAT} {MODEL_VERSION}\n{payload}\nsha256 {digest}\n"


def loads_model(text: str) -> MixedModelParams:
    lines = text.split("\n")
    if not lines or not lines[0].startswith(MODEL_FORMAT + " "):
        raise ModelFileError("not a model file (missing format tag)")
    version = lines[0][len(MODEL_FORMAT) + 1:].strip()
    if version != str(MODEL_VERSION):
        raise VersionError(f"unsupported model version {version!r}; expected {MODEL_VERSION}")
    while lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3 or not lines[-1].startswith("sha256 "):
        raise ChecksumError("model file truncated: checksum line missing")
    payload = "\n".join(lines[1:-1])
    digest = lines[-1][len("sha256 "):].strip()
    if hashlib.sha256(payload.encode()).hexdigest() != digest:
        raise ChecksumError("model file checksum mismatch")
    body = json.loads(payload)
    return MixedModelParams(
        beta=np.array(body["beta"]),
        sigma2=body["sigma2"],
        sigma_gamma=np.array(body["sigma_gamma"]).reshape((N_COEF, N_COEF), order="F"),
        cov_beta=np.array(body["cov_beta"]).reshape((N_COEF, N_COEF), order="F"),
        meta=body.get("meta", {}),
    )


def save_model(params: MixedModelParams, path) -> None:
    Path(path).write_text(dumps_model(params))


def load_model(path) -> MixedModelParams:
    return loads_model(Path(path).read_text())

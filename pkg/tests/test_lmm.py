import math

import numpy as np
import pytest
from scipy import stats

from pbrt.detect import BrtObservation, StimulusType
from pbrt.estimator import estimate_driver, pbrt_distribution
from pbrt.lmm import (
    N_CHOL,
    N_COEF,
    ChecksumError,
    FitError,
    MixedModelParams,
    ModelFileError,
    VersionError,
    adjust_intercepts,
    basis,
    build_design,
    dumps_model,
    fit,
    gls_beta,
    load_model,
    loads_model,
    loglik,
    loglik_grad,
    n_theta,
    pack_theta,
    pinv_sym,
    save_model,
    theta_for,
    unpack_theta,
)
from pbrt.sim import SimConfig, block_covariance, simulate_observations

from conftest import random_observations


def test_basis_block_layout():
    np.testing.assert_array_equal(basis("signal", 2.0), [0, 0, 0, 0, 0, 0, 1, 2, 4])
    np.testing.assert_array_equal(basis(StimulusType.STEADY, 3.0), [1, 3, 9, 0, 0, 0, 0, 0, 0])


def test_unit_brt_gives_zero_response():
    train = build_design([BrtObservation("d", "nonsteady", 0.0, 1.0, 2.5)])
    assert train.drivers[0].y[0] == 0.0


def _reference_design(obs):
    """Second code path: stack indicator-weighted polynomial columns."""
    t = np.array([o.time_headway for o in obs])
    poly = np.column_stack([np.ones_like(t), t, t * t])
    ind = np.array([[o.stimulus is s for s in (StimulusType.STEADY, StimulusType.NONSTEADY, StimulusType.SIGNAL)]
                    for o in obs], dtype=float)
    return (ind[:, :, None] * poly[:, None, :]).reshape(len(obs), 9)


def test_mixed_batch_matches_reference(rng):
    obs = random_observations(rng, 30)
    train = build_design(obs)
    d = train.drivers[0]
    ordered = sorted(obs, key=lambda o: o.stimulus.index)
    np.testing.assert_array_equal(d.X, _reference_design(ordered))
    np.testing.assert_allclose(d.y, np.log([o.brt for o in ordered]))
    assert d.X.shape == (30, N_COEF)
    assert all(np.count_nonzero(row) == 3 for row in d.X)


def test_design_groups_by_driver(rng):
    obs = random_observations(rng, 5, "b") + random_observations(rng, 4, "a")
    train = build_design(obs)
    assert [d.driver_id for d in train.drivers] == ["a", "b"]
    assert train.n_obs == 9 and train.X.shape == (9, N_COEF)


# --- likelihood -------------------------------------------------------------


@pytest.fixture(scope="module")
def small_train():
    cfg = SimConfig(seed=3, n_drivers=15, obs_per_driver=(3, 2, 3))
    return simulate_observations(cfg)[0]


def _dense_loglik(train, theta, reml=False):
    """Oracle: explicit per-driver V, full GLS beta, multivariate normal densities."""
    L, s2 = unpack_theta(theta)
    S = L @ L.T
    Vs = [d.X @ S @ d.X.T + s2 * np.eye(len(d.y)) for d in train.drivers]
    C = sum(d.X.T @ np.linalg.solve(V, d.X) for d, V in zip(train.drivers, Vs))
    r = sum(d.X.T @ np.linalg.solve(V, d.y) for d, V in zip(train.drivers, Vs))
    beta = np.linalg.solve(C, r)
    ll = sum(stats.multivariate_normal(d.X @ beta, V).logpdf(d.y) for d, V in zip(train.drivers, Vs))
    if reml:
        ll += -0.5 * np.linalg.slogdet(C)[1] + 0.5 * N_COEF * math.log(2 * math.pi)
    return ll, beta, np.linalg.inv(C)


def _random_theta(rng):
    L = np.tril(rng.normal(0, 0.1, (N_COEF, N_COEF)))
    L[np.diag_indices(N_COEF)] = np.abs(L[np.diag_indices(N_COEF)]) + 0.02
    return pack_theta(L, float(rng.uniform(0.01, 0.1)))


@pytest.mark.parametrize("reml", [False, True])
def test_loglik_matches_dense_oracle(small_train, rng, reml):
    for _ in range(5):
        theta = _random_theta(rng)
        ll_ref, _, _ = _dense_loglik(small_train, theta, reml)
        assert loglik(small_train, theta, reml=reml) == pytest.approx(ll_ref, rel=1e-10, abs=1e-8)


def test_gls_beta_matches_dense_oracle(small_train, rng):
    theta = _random_theta(rng)
    L, s2 = unpack_theta(theta)
    _, beta_ref, cov_ref = _dense_loglik(small_train, theta)
    beta, cov = gls_beta(small_train, L @ L.T, s2)
    np.testing.assert_allclose(beta, beta_ref, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(cov, cov_ref, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("reml,diagonal", [(False, False), (True, False), (False, True)])
def test_gradient_matches_finite_differences(small_train, rng, reml, diagonal):
    h = 1e-6
    for _ in range(10):
        theta = _random_theta(rng)
        if diagonal:
            L, s2 = unpack_theta(theta)
            theta = pack_theta(L, s2, diagonal=True)
        g = loglik_grad(small_train, theta, reml, diagonal)
        fd = np.array([
            (loglik(small_train, theta + h * e, reml, diagonal) - loglik(small_train, theta - h * e, reml, diagonal))
            / (2 * h) for e in np.eye(len(theta))
        ])
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_theta_packing_round_trip(rng):
    theta = _random_theta(rng)
    L, s2 = unpack_theta(theta)
    np.testing.assert_array_equal(pack_theta(L, s2), theta)
    assert n_theta() == N_CHOL + 1 == 46 and n_theta(True) == 10


def test_pinv_sym_rank_deficient(rng):
    B = rng.normal(size=(6, 3))
    C = B @ B.T
    inv, logdet, rank = pinv_sym(C)
    assert rank == 3
    np.testing.assert_allclose(inv, np.linalg.pinv(C, rcond=1e-10, hermitian=True), atol=1e-10)
    w = np.linalg.eigvalsh(C)
    assert logdet == pytest.approx(np.log(w[w > 1e-8]).sum())


# --- fitting ----------------------------------------------------------------


def test_fit_recovers_truth(fitted, sim_cfg):
    params, train, _ = fitted
    se = np.sqrt(np.diag(params.cov_beta))
    z = np.abs(params.beta - sim_cfg.true_beta) / se
    assert (z <= 2).sum() >= 7 and z.max() <= 3.5
    assert abs(params.sigma2 / sim_cfg.true_sigma2 - 1) < 0.1
    assert params.meta["grad_norm"] <= 1e-5
    assert params.meta["n_obs"] == train.n_obs == 6000


def test_fit_history_monotone(fitted):
    params, _, _ = fitted
    h = np.array(params.meta["history"])
    assert len(h) >= 2
    assert np.all(np.diff(h) >= -1e-9 * np.abs(h[:-1]))
    assert h[-1] == pytest.approx(params.meta["loglik"])


def test_fit_gradient_zero_at_optimum(fitted):
    params, train, _ = fitted
    g = loglik_grad(train, theta_for(params))
    assert np.linalg.norm(g) < 1e-3 * max(1.0, train.n_obs / 100)


def test_fitted_covariances_valid(fitted):
    params, train, _ = fitted
    for M in (params.sigma_gamma, params.cov_beta):
        np.testing.assert_allclose(M, M.T, atol=1e-14)
        assert np.linalg.eigvalsh(M).min() >= -1e-10
    for d in train.drivers:
        np.linalg.cholesky(d.X @ params.sigma_gamma @ d.X.T + params.sigma2 * np.eye(len(d.y)))


@pytest.fixture(scope="module")
def no_effects():
    cfg = SimConfig(seed=5, n_drivers=300, true_sigma_gamma=np.zeros((N_COEF, N_COEF)))
    train, _ = simulate_observations(cfg)
    X, y = train.X, train.y
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return train, coef, float(np.sum((y - X @ coef) ** 2)) / len(y)


def test_profile_at_zero_effects_is_ols(no_effects):
    train, coef, s2_ols = no_effects
    theta = pack_theta(np.zeros((N_COEF, N_COEF)), s2_ols)
    g = loglik_grad(train, theta)
    assert abs(g[-1]) < 1e-8 * train.n_obs
    beta, _ = gls_beta(train, np.zeros((N_COEF, N_COEF)), s2_ols)
    np.testing.assert_allclose(beta, coef, atol=1e-10)


def test_fit_without_driver_effects_matches_ols(no_effects):
    train, coef, s2_ols = no_effects
    diag = fit(train, diagonal=True)
    assert diag.sigma2 == pytest.approx(s2_ols, rel=0.02)
    # the full covariance absorbs a little residual variance through 45 free parameters
    assert fit(train).sigma2 == pytest.approx(s2_ols, rel=0.05)
    np.testing.assert_allclose(diag.beta, coef, atol=3 * np.sqrt(np.diag(diag.cov_beta)).max())


def test_fit_diagonal_and_reml():
    cfg = SimConfig(seed=9, n_drivers=80, true_sigma_gamma=block_covariance(cross_corr=0.0, within_corr=0.0))
    train, _ = simulate_observations(cfg)
    diag = fit(train, diagonal=True)
    assert np.count_nonzero(diag.sigma_gamma - np.diag(np.diag(diag.sigma_gamma))) == 0
    ml = fit(train)
    reml = fit(train, reml=True)
    assert reml.meta["method"] == "REML"
    # REML corrects the downward bias of ML variance estimates
    assert reml.sigma2 >= ml.sigma2 * (1 - 1e-6)


def test_fit_warm_start(fitted):
    params, train, _ = fitted
    again = fit(train, init=params)
    assert again.meta["loglik"] >= params.meta["loglik"] - 1e-6
    np.testing.assert_allclose(again.beta, params.beta, atol=1e-4)


def test_fit_preconditions(rng):
    with pytest.raises(ValueError):
        fit(build_design(random_observations(rng, 40, "only")))
    with pytest.raises(ValueError):
        fit(build_design(random_observations(rng, 5, "a") + random_observations(rng, 5, "b")))


def test_fit_error_when_iterations_exhausted(fitted):
    _, train, _ = fitted
    with pytest.raises(FitError) as exc:
        fit(train, maxiter=1, grad_tol=1e-14)
    assert exc.value.grad_norm > 0


# --- simulator correction ---------------------------------------------------


def _unit_mean_params():
    beta = np.zeros(N_COEF)
    sigma2 = 0.04
    # mean BRT exactly 1 s at headway 2: intercept -sigma2/2
    for s in range(3):
        beta[3 * s] = -sigma2 / 2
    return MixedModelParams(beta, sigma2, np.eye(N_COEF) * 0.01, np.eye(N_COEF) * 1e-4)


def test_adjust_intercepts_unit_mean():
    p = _unit_mean_params()
    q = adjust_intercepts(p, 0.3, 2.0)
    np.testing.assert_allclose((q.beta - p.beta)[[0, 3, 6]], math.log(1.3))
    assert math.log(1.3) == pytest.approx(0.26236, abs=1e-5)
    np.testing.assert_array_equal((q.beta - p.beta)[[1, 2, 4, 5, 7, 8]], 0.0)


def test_adjust_intercepts_zero_delta():
    p = _unit_mean_params()
    np.testing.assert_array_equal(adjust_intercepts(p, 0.0).beta, p.beta)


def test_adjust_intercepts_shifts_mean(fitted):
    params, _, _ = fitted
    q = adjust_intercepts(params)
    for s in StimulusType:
        assert q.mean_brt(s, 2.0) == pytest.approx(params.mean_brt(s, 2.0) + 0.3, abs=1e-12)
    assert q.meta["sim_correction"]["delta_seconds"] == 0.3


# --- persistence ------------------------------------------------------------


def test_model_round_trip_bitwise(fitted, tmp_path):
    params, _, _ = fitted
    path = tmp_path / "m.txt"
    save_model(params, path)
    back = load_model(path)
    for f in ("beta", "sigma_gamma", "cov_beta"):
        assert np.array_equal(getattr(back, f), getattr(params, f))
    assert back.sigma2 == params.sigma2
    assert back.meta == params.meta
    assert dumps_model(back) == dumps_model(params)


def test_model_file_is_column_major(rng):
    S = np.arange(81, dtype=float).reshape(9, 9)
    S = S + S.T
    C = np.diag(np.arange(1.0, 10.0))
    C[0, 1] = 0.5
    p = MixedModelParams(np.zeros(9), 1.0, S, C)
    import json
    body = json.loads("\n".join(dumps_model(p).split("\n")[1:-2]))
    assert body["cov_beta"][9] == 0.5  # row 0 of column 1


def test_truncated_model_rejected(fitted):
    text = dumps_model(fitted[0])
    with pytest.raises(ChecksumError):
        loads_model(text[: len(text) // 2])
    with pytest.raises(ChecksumError):
        loads_model(text.replace('"sigma2": 0.', '"sigma2": 1.'))


def test_model_version_and_tag_checked(fitted):
    text = dumps_model(fitted[0])
    with pytest.raises(VersionError):
        loads_model(text.replace("pbrt-model 1", "pbrt-model 2", 1))
    with pytest.raises(ModelFileError):
        loads_model("hello\n")


def test_persistence_preserves_blup(fitted, tmp_path, rng):
    params, _, _ = fitted
    path = tmp_path / "m.txt"
    save_model(params, path)
    back = load_model(path)
    obs = random_observations(rng, 7, "x")
    e1, e2 = estimate_driver(params, "x", obs), estimate_driver(back, "x", obs)
    assert np.array_equal(e1.gamma_hat, e2.gamma_hat)
    assert np.array_equal(e1.cov_pred, e2.cov_pred)
    assert pbrt_distribution(e1, params) == pbrt_distribution(e2, back)

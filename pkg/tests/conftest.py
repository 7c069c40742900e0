import numpy as np
import pytest

from pbrt.detect import BrtObservation, StimulusType
from pbrt.lmm import N_COEF, MixedModelParams
from pbrt.sim import SimConfig
from pbrt.trajectory import TrajectorySample, VehicleTrack


def make_track(vehicle_id, t, position, speed, acceleration=None, driver_id=None, lane_id="L0", turns=()):
    t = np.asarray(t, dtype=float)
    position = np.broadcast_to(np.asarray(position, dtype=float), t.shape)
    speed = np.broadcast_to(np.asarray(speed, dtype=float), t.shape)
    if acceleration is None:
        acceleration = np.gradient(speed, t) if len(t) > 1 else np.zeros_like(t)
    acceleration = np.broadcast_to(np.asarray(acceleration, dtype=float), t.shape)
    samples = [TrajectorySample(float(a), float(b), float(c), float(d))
               for a, b, c, d in zip(t, position, speed, acceleration)]
    return VehicleTrack(vehicle_id, driver_id or vehicle_id, lane_id, samples, frozenset(turns))


def random_params(rng, scale=0.1, cov_beta_scale=1e-3, rank=None):
    """Random well-conditioned mixed-model parameters (PSD Sigma_gamma, optionally low rank)."""
    k = rank or N_COEF
    A = rng.normal(size=(N_COEF, k)) * scale
    B = rng.normal(size=(N_COEF, N_COEF)) * np.sqrt(cov_beta_scale)
    return MixedModelParams(
        beta=rng.normal(0.2, 0.1, N_COEF) * np.tile([1.0, 0.3, 0.03], 3),
        sigma2=float(rng.uniform(0.02, 0.1)),
        sigma_gamma=A @ A.T,
        cov_beta=B @ B.T / N_COEF,
    )


def random_observations(rng, n, driver_id="d", stimuli=None):
    out = []
    for i in range(n):
        stim = stimuli[i % len(stimuli)] if stimuli else list(StimulusType)[int(rng.integers(3))]
        out.append(BrtObservation(driver_id, stim, float(i), float(np.exp(rng.normal(0.2, 0.3))),
                                  float(rng.uniform(0.5, 6.0))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig(seed=7)


@pytest.fixture(scope="session")
def fitted(sim_cfg):
    """A model fitted once to the default simulated training set."""
    from pbrt.lmm import fit
    from pbrt.sim import simulate_observations
    train, gammas = simulate_observations(sim_cfg)
    return fit(train), train, gammas


def kin_track(vehicle_id, x0, v0, accel, t_end, dt=0.1, **kw):
    """Integrate piecewise-constant acceleration ``accel(t)``; speed floors at zero."""
    n = int(round(t_end / dt)) + 1
    t = np.round(np.arange(n) * dt, 10)
    x = np.empty(n)
    v = np.empty(n)
    a = np.empty(n)
    xi, vi = x0, v0
    for k in range(n):
        ak = accel(t[k]) if vi > 0 else max(accel(t[k]), 0.0)
        x[k], v[k], a[k] = xi, vi, ak
        step_v = vi + ak * dt
        if step_v < 0:
            xi += vi * vi / (2 * -ak)
            vi = 0.0
        else:
            xi += vi * dt + 0.5 * ak * dt * dt
            vi = step_v
    return make_track(vehicle_id, t, x, v, a, **kw)


def step(t0, value, t1=np.inf):
    """Acceleration profile equal to ``value`` on [t0, t1) and zero elsewhere."""
    return lambda t: value if t0 - 1e-9 <= t < t1 - 1e-9 else 0.0

import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stresonator.basis import DomainSpec
from stresonator.covariance import KernelSpec
from stresonator.estimator import ResonatorRegressor
from stresonator.inference import filter_pass, posterior_at, smooth_pass, stationary_prior
from stresonator.model import ComponentSpec, ModelSpec, assemble_system
from stresonator.simulator import SimulationPlan, sample_observations, sample_trajectory


def model():
    comps = (
        ComponentSpec(KernelSpec("matern", 0.4, 0.5, 1.5), omega=0.0, gamma=0.0, name="bias"),
        ComponentSpec(KernelSpec("matern", 0.3, 2.0, 1.5), omega=6.0, gamma=1.0, chi=0.01, name="osc"),
    )
    return ModelSpec(DomainSpec.interval(1.0), 8, comps, 0.01)


@pytest.fixture(scope="module")
def data():
    plan = SimulationPlan(model(), np.arange(1, 21) * 0.05, 6, seed=2, t0=0.0)
    system = plan.system()
    batch = sample_observations(sample_trajectory(plan, system), plan, system)
    t, X, y = batch.flat()
    return np.column_stack([t, X]), y, batch


def test_get_and_set_params():
    est = ResonatorRegressor(model=model(), restarts=3)
    params = est.get_params()
    assert params["restarts"] == 3 and params["optimize"] is False
    est.set_params(restarts=5)
    assert clone(est).restarts == 5


def test_predict_matches_direct_smoothing(data):
    X, y, batch = data
    m = model()
    est = ResonatorRegressor(model=m, t0=0.0).fit(X, y)
    basis = m.basis()
    system = assemble_system(m, batch.times, batch.locations, basis, t0=0.0)
    prior = stationary_prior(m, basis, 0.0)
    res = filter_pass(system, batch, prior, noise_var=m.noise_var)
    assert_allclose(est.log_marginal_likelihood_, res.loglik, rtol=1e-12)
    sm = smooth_pass(system, res)
    pts = np.array([[-0.5], [0.2]])
    ref = posterior_at([sm[9]], m, basis, pts)
    Xq = np.column_stack([np.full(2, batch.times[9]), pts])
    mean, std = est.predict(Xq, return_std=True)
    assert_allclose(mean, ref.total[0][0], rtol=1e-10, atol=1e-12)
    assert_allclose(std, ref.std()[0], rtol=1e-10)
    parts = est.transform(Xq)
    assert parts.shape == (2, 2)
    assert_allclose(parts.sum(axis=1), mean, atol=1e-12)


def test_predict_between_and_after_steps(data):
    X, y, _ = data
    est = ResonatorRegressor(model=model().to_config(), t0=0.0).fit(X, y)
    Xq = np.array([[0.125, 0.0], [0.5, 0.3], [2.0, 0.3]])
    mean, std = est.predict(Xq, return_std=True)
    assert np.all(np.isfinite(mean)) and np.all(std > 0)
    # far beyond the data the oscillator forgets and the variance grows back
    assert std[2] > std[1]


def test_score_is_r2(data):
    X, y, _ = data
    est = ResonatorRegressor(model=model(), t0=0.0).fit(X, y)
    assert est.score(X, y) > 0.9


def test_optimize_updates_model(data):
    X, y, _ = data
    est = ResonatorRegressor(model=model(), optimize=True, restarts=2, active=["noise_var"], t0=0.0).fit(X, y)
    assert est.fit_result_ is not None
    assert est.model_.noise_var == est.fit_result_.params["noise_var"]
    assert est.model_.components == model().components


def test_input_validation(data):
    X, y, _ = data
    est = ResonatorRegressor(model=model())
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(ValueError):
        est.fit(X[:, :1], y)
    with pytest.raises(ValueError):
        ResonatorRegressor(model="nope").fit(X, y)
    with pytest.raises(ValueError):
        ResonatorRegressor(model=model(), t0=1.0).fit(X, y)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.predict([[0.0, 0.1]])
    with pytest.raises(ValueError):
        est.predict([[0.5, 3.0]])

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import norm

from stresonator.basis import DomainSpec
from stresonator.covariance import KernelSpec
from stresonator.estimation import (
    FitError,
    Objective,
    ParamVector,
    fit,
    gradient_check,
    objective,
)
from stresonator.inference import filter_pass, stationary_prior
from stresonator.model import ComponentSpec, ModelSpec, assemble_system
from stresonator.simulator import SimulationPlan, demo_model, demo_plan, sample_observations, sample_trajectory


def small_model(lengthscale=0.3, magnitude=2.0, noise_var=0.05):
    comp = ComponentSpec(KernelSpec("matern", lengthscale, magnitude, 1.5), omega=4.0, gamma=1.0,
                         chi=0.01, name="r")
    return ModelSpec(DomainSpec.interval(1.0), 8, (comp,), noise_var)


def simulate(model, seed, n_steps=30, per_step=6):
    times = np.arange(1, n_steps + 1) * 0.05
    plan = SimulationPlan(model, times, per_step, seed=seed, t0=0.0)
    system = plan.system()
    return sample_observations(sample_trajectory(plan, system), plan, system)


def simulate_demo(seed):
    plan = demo_plan(seed)
    system = plan.system()
    return sample_observations(sample_trajectory(plan, system), plan, system)


def test_param_vector_defaults():
    comps = (
        ComponentSpec(KernelSpec("matern", 0.3, 2.0, 1.5), omega=0.0, gamma=0.0, name="bias"),
        ComponentSpec(KernelSpec("matern", 0.1, 1.0, 1.5), omega=3.0, gamma=0.5, chi=0.01, name="osc"),
    )
    model = ModelSpec(DomainSpec.interval(1.0), 4, comps, 0.01)
    p = ParamVector.from_model(model)
    assert p.active_names == ["bias.lengthscale", "bias.magnitude", "osc.gamma", "osc.chi",
                              "osc.lengthscale", "osc.magnitude", "noise_var"]
    assert p["osc.nu"] == 1.5
    q = ParamVector.from_model(model, ["lengthscale", "osc.nu"])
    assert q.active_names == ["bias.lengthscale", "osc.lengthscale", "osc.nu"]
    assert p.freeze("magnitude").active_names == ["bias.lengthscale", "osc.gamma", "osc.chi",
                                                   "osc.lengthscale", "noise_var"]
    with pytest.raises(ValueError):
        ParamVector.from_model(model, ["bias.gamma"])


def test_log_transform_round_trip():
    p = ParamVector.from_model(small_model())
    z = p.to_unconstrained()
    back = p.with_unconstrained(z)
    assert_allclose(back.values, p.values, rtol=1e-15)
    moved = p.with_unconstrained(z + 1.0)
    for name, old, new, act in zip(p.names, p.values, moved.values, p.active):
        assert new == pytest.approx(old * math.e, rel=1e-14) if act else new == old
    with pytest.raises(ValueError):
        p.with_unconstrained(z[:-1])


def test_apply_substitutes_values():
    model = small_model()
    p = ParamVector.from_model(model).with_values(**{"r.lengthscale": 0.7, "noise_var": 0.2, "r.chi": 0.3})
    out = p.apply(model)
    assert out.components[0].kernel.lengthscale == 0.7
    assert out.components[0].chi == 0.3
    assert out.noise_var == 0.2
    assert ParamVector.from_model(model).apply(model) == model


def test_objective_is_negative_filter_loglik():
    model = small_model()
    data = simulate(model, 0)
    theta = ParamVector.from_model(model)
    system = assemble_system(model, data.times, data.locations, t0=data.times[0])
    prior = stationary_prior(model, model.basis(), data.times[0])
    ref = -filter_pass(system, data, prior, noise_var=model.noise_var).loglik
    assert_allclose(objective(theta, model, data), ref, rtol=1e-10)
    sq = Objective(model, data, theta, method="sqrt")
    cov = Objective(model, data, theta)
    z = theta.to_unconstrained()
    # exp(log θ) may differ from θ in the last bit
    assert_allclose(sq(z), ref, rtol=1e-13)
    assert_allclose(cov(z), ref, rtol=1e-10)
    assert cov(z) == cov(z)
    with pytest.raises(ValueError):
        Objective(model, data, theta, method="other")


def test_objective_failure_is_infinite():
    model = small_model()
    data = simulate(model, 1)
    obj = Objective(model, data)
    z = obj.params.to_unconstrained()
    z[0] = 80.0
    assert obj(z) == math.inf
    assert obj.last_error


def test_large_noise_limit_is_iid_gaussian():
    model = small_model()
    data = simulate(model, 2)
    big = 1e10
    theta = ParamVector.from_model(model).with_values(noise_var=big)
    _, _, y = data.flat()
    ref = -norm(0, math.sqrt(big)).logpdf(y).sum()
    assert_allclose(objective(theta, model, data), ref, rtol=1e-9)


def test_gradient_check_on_quadratic():
    M = np.array([[3.0, 1.0, 0.0], [1.0, 2.0, 0.5], [0.0, 0.5, 1.0]])
    c = np.array([1.0, -2.0, 0.5])
    f = lambda x: 0.5 * x @ M @ x - c @ x + 4.0
    x = np.array([0.3, -1.2, 2.0])
    rep = gradient_check(f, x)
    assert_allclose(rep.gradient, M @ x - c, atol=1e-9)
    assert_allclose(rep.gradients, np.tile(M @ x - c, (3, 1)), atol=1e-9)


def test_gradient_check_second_order():
    f = lambda x: np.sum(np.exp(x) * np.sin(3 * x))
    x = np.array([0.2, -0.4, 1.1])
    rep = gradient_check(f, x, h=1e-2)
    assert_allclose(rep.ratios, 4.0, rtol=0.01)
    exact = np.exp(x) * (np.sin(3 * x) + 3 * np.cos(3 * x))
    assert_allclose(rep.gradient, exact, rtol=1e-8)


def test_likelihood_gradient_is_second_order():
    model = small_model()
    data = simulate(model, 3)
    obj = Objective(model, data, ParamVector.from_model(model, ["lengthscale", "noise_var"]))
    rep = gradient_check(obj, obj.params.to_unconstrained(), h=1e-1)
    assert np.all(np.abs(rep.ratios - 4.0) < 0.5)


@pytest.fixture(scope="module")
def small_fit():
    truth = small_model()
    data = simulate(truth, 4, n_steps=40, per_step=8)
    template = small_model(lengthscale=1.0, magnitude=1.0, noise_var=1.0)
    params = ParamVector.from_model(template, ["lengthscale", "magnitude", "noise_var"])
    res = fit(data, template, restarts=4, seed=11, params=params)
    return data, template, params, res


def test_fit_selects_best_restart(small_fit):
    _, _, _, res = small_fit
    assert len(res.traces) == 4
    assert all(res.objective <= t.objective for t in res.traces)
    assert res.traces[res.best_index].objective == res.objective
    assert all(v > 0 for v in res.params.values)


def test_fit_traces_are_monotone(small_fit):
    for t in small_fit[3].traces:
        h = np.asarray(t.history)
        assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))


def test_fit_ends_at_stationary_point(small_fit):
    data, template, params, res = small_fit
    best = res.traces[res.best_index]
    assert best.converged
    obj = Objective(template, data, res.params)
    g = obj.gradient(res.params.to_unconstrained())
    assert np.max(np.abs(g)) <= 1e-2


def test_fit_frozen_parameters_never_move(small_fit):
    _, template, params, res = small_fit
    for name, act, value in zip(params.names, params.active, res.params.values):
        if not act:
            assert value == params[name]


def test_fit_is_deterministic(small_fit):
    data, template, params, res = small_fit
    again = fit(data, template, restarts=4, seed=11, params=params)
    assert [t.to_record() for t in again.traces] == [t.to_record() for t in res.traces]


def test_restart_at_optimum_is_unchanged(small_fit):
    data, template, params, res = small_fit
    again = fit(data, template, params=params, init=[res.params])
    assert_allclose(again.params.values, res.params.values, rtol=1e-6)
    assert again.objective <= res.objective
    assert again.traces[0].iterations <= 1


def test_fit_argument_checks():
    model = small_model()
    data = simulate(model, 5, n_steps=5)
    none_active = ParamVector.from_model(model, [])
    with pytest.raises(ValueError):
        fit(data, model, params=none_active)
    with pytest.raises(ValueError):
        fit(data, model, restarts=0)


def test_all_restarts_failing_raises():
    model = small_model()
    data = simulate(model, 6, n_steps=5)
    params = ParamVector.from_model(model, ["lengthscale"])
    bad = params.with_values(**{"r.lengthscale": math.exp(60.0)})
    with pytest.raises(FitError) as err:
        fit(data, model, params=params, init=[bad, bad])
    assert len(err.value.traces) == 2


def test_true_lengthscale_beats_four_times_larger_on_average():
    truth = demo_model()
    p = ParamVector.from_model(truth)
    gaps = []
    for seed in range(10):
        data = simulate_demo(seed)
        obj = Objective(truth, data, p, t0=0.0)
        at_truth = obj.negloglik(p)
        at_wide = obj.negloglik(p.with_values(**{"resonator.lengthscale": 4 * p["resonator.lengthscale"]}))
        gaps.append(at_wide - at_truth)
    assert np.mean(gaps) > 0


def test_landscape_minimum_near_truth():
    truth = demo_model()
    p = ParamVector.from_model(truth)
    factors = 2.0 ** np.arange(-2, 3)
    hits = 0
    for seed in range(10):
        data = simulate_demo(seed)
        obj = Objective(truth, data, p, t0=0.0)
        grid = np.empty((5, 5))
        for i, fl in enumerate(factors):
            for j, fs in enumerate(factors):
                theta = p.with_values(**{"resonator.lengthscale": fl * p["resonator.lengthscale"],
                                         "resonator.magnitude": fs * p["resonator.magnitude"]})
                grid[i, j] = obj.negloglik(theta)
        i, j = np.unravel_index(np.argmin(grid), grid.shape)
        hits += max(abs(i - 2), abs(j - 2)) <= 1
    assert hits >= 8

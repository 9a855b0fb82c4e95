import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from stresonator.basis import DomainSpec
from stresonator.covariance import KernelSpec
from stresonator.model import ComponentSpec, ModelSpec, discretize_blocks, stationary_block_cov
from stresonator.simulator import (
    SimulationPlan,
    component_stream,
    demo_model,
    demo_plan,
    field_values,
    sample_observations,
    sample_trajectory,
    transition_moment_check,
    uniform_locations,
)

KERNEL = KernelSpec("matern", lengthscale=0.2, magnitude=1.0, nu=1.5)


def _model(comps=None, n_basis=4, noise_var=0.04, domain=None):
    comps = comps or (ComponentSpec(KERNEL, omega=3.0, gamma=1.0, chi=0.01, name="r"),)
    return ModelSpec(domain or DomainSpec.interval(1.0), n_basis, comps, noise_var)


def test_same_seed_same_draws():
    plan = SimulationPlan(_model(), np.linspace(0.1, 1, 10), 5, seed=42, t0=0.0)
    again = SimulationPlan(_model(), np.linspace(0.1, 1, 10), 5, seed=42, t0=0.0)
    x1, x2 = sample_trajectory(plan), sample_trajectory(again)
    assert_array_equal(x1, x2)
    y1, y2 = sample_observations(x1, plan), sample_observations(x2, again)
    for a, b in zip(y1.values, y2.values):
        assert_array_equal(a, b)
    other = SimulationPlan(_model(), np.linspace(0.1, 1, 10), 5, seed=43, t0=0.0)
    assert not np.array_equal(sample_trajectory(other), x1)


def test_identity_dynamics_without_noise_is_constant():
    model = _model()
    plan = SimulationPlan(model, [0.1, 0.2, 0.3], 0, t0=0.0, initial=np.arange(model.state_dim, dtype=float))
    system = plan.system()
    A = np.broadcast_to(np.eye(2), system.A.shape).copy()
    system = dataclasses.replace(system, A=A, Q=np.zeros_like(system.Q))
    x = sample_trajectory(plan, system)
    assert_array_equal(x, np.tile(np.arange(model.state_dim, dtype=float), (3, 1)))


def test_undamped_mode_oscillates():
    comp = ComponentSpec(KERNEL, omega=2 * np.pi, gamma=0.0, chi=0.0, name="r")
    model = _model((comp,), n_basis=1)
    plan = SimulationPlan(model, [0.25, 0.5], 0, t0=0.0, initial=[1.0, 0.0])
    system = plan.system()
    system = dataclasses.replace(system, Q=np.zeros_like(system.Q))
    x = sample_trajectory(plan, system)
    assert_allclose(x[0, 0], np.cos(np.pi / 2), atol=1e-15)
    assert_allclose(x[1, 0], -1.0, rtol=1e-14)


def test_zero_noise_observations_equal_field():
    model = _model(noise_var=0.0)
    plan = SimulationPlan(model, np.linspace(0.1, 1, 5), 7, seed=3, t0=0.0)
    x = sample_trajectory(plan)
    obs = sample_observations(x, plan)
    basis = model.basis()
    for k in range(5):
        truth = field_values(x[k:k + 1], model, basis, plan.locations[k])[0]
        assert_allclose(obs.values[k], truth, rtol=1e-13, atol=1e-15)


def test_measurement_noise_variance():
    model = _model(noise_var=0.04)
    plan = SimulationPlan(model, [0.5], 10_000, seed=9, t0=0.0)
    system = plan.system()
    x = sample_trajectory(plan, system)
    obs = sample_observations(x, plan, system)
    resid = obs.values[0] - system.H[0] @ x[0]
    assert abs(resid.var() / 0.04 - 1) < 0.05


def test_demo_plan_size():
    plan = demo_plan(seed=0)
    assert plan.times.size == 100
    assert sum(len(loc) for loc in plan.locations) == 2500
    pts = np.concatenate(plan.locations)
    assert pts.min() >= -1 and pts.max() <= 1
    assert plan.times[0] > 0 and plan.times[-1] == 1.0
    model = demo_model()
    assert model.n_basis == 32
    assert model.components[0].omega(0.0) == pytest.approx(2 * np.pi * 6)


def test_components_superpose():
    comps = (
        ComponentSpec(KERNEL, omega=0.0, gamma=0.0, name="bias"),
        ComponentSpec(KERNEL, omega=5.0, gamma=0.5, chi=0.01, name="osc"),
    )
    times = np.linspace(0.1, 2.0, 20)
    joint = _model(comps)
    plan = SimulationPlan(joint, times, 4, seed=5, t0=0.0)
    x = sample_trajectory(plan)
    pts = np.linspace(-0.9, 0.9, 9)[:, None]
    total = field_values(x, joint, joint.basis(), pts)
    parts = []
    for comp in comps:
        single = _model((comp,))
        xs = sample_trajectory(SimulationPlan(single, times, plan.locations, seed=5, t0=0.0))
        parts.append(field_values(xs, single, single.basis(), pts))
    assert_allclose(total, parts[0] + parts[1], rtol=1e-12, atol=1e-12)
    assert_allclose(field_values(x, joint, joint.basis(), pts, "osc"), parts[1], rtol=1e-12, atol=1e-12)


def test_component_streams_are_independent_of_order():
    a = component_stream(7, "bias").standard_normal(4)
    b = component_stream(7, "osc").standard_normal(4)
    assert_array_equal(a, component_stream(7, "bias").standard_normal(4))
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("domain", [
    DomainSpec.interval(2.0), DomainSpec.rectangle(1.0, 0.5), DomainSpec.disk(1.5), DomainSpec.sphere(3.0),
], ids=lambda d: d.kind)
def test_uniform_locations_inside_domain(domain):
    pts = uniform_locations(domain, 500, np.random.default_rng(0))
    domain.check_points(pts)
    assert pts.shape == (500, domain.coord_dim)


def test_long_run_marginal_is_stationary():
    comp = ComponentSpec(KERNEL, omega=3.0, gamma=2.0, name="r")
    model = _model((comp,), n_basis=1)
    times = np.arange(1, 40_001) * 0.5
    plan = SimulationPlan(model, times, [np.zeros((0, 1))] * times.size, seed=1, t0=0.0, initial="zero")
    x = sample_trajectory(plan)[100:]
    system = plan.system()
    P = stationary_block_cov(system.a[0, 0], system.b[0, 0], system.q[0, 0])
    emp = np.cov(x, rowvar=False)
    assert_allclose(np.diag(emp), np.diag(P), rtol=0.05)
    assert abs(emp[0, 1]) < 0.05 * np.sqrt(P[0, 0] * P[1, 1])


def test_moment_check_wiener_velocity():
    rep = transition_moment_check(0.0, 0.0, 1.0, 1.0, count=10_000, seed=0)
    assert_allclose(rep.exact_cov, [[1 / 3, 1 / 2], [1 / 2, 1.0]], rtol=1e-14)
    assert rep.passed


def test_moment_check_demo_block():
    model = demo_model()
    lam = model.basis().eigenvalues[0]
    comp = model.components[0]
    a = comp.gamma + comp.chi * lam
    b = a * a / 2 + comp.omega(0.0) ** 2
    rep = transition_moment_check(a, b, 3.0, 0.01, count=10_000, seed=1)
    _, Q = discretize_blocks(a, b, 3.0, 0.01)
    assert_array_equal(rep.exact_cov, Q[0])
    assert rep.passed


def test_moment_check_deterministic_block():
    rep = transition_moment_check(1.0, 4.0, 0.0, 0.3, count=1000)
    assert_array_equal(rep.empirical_cov, 0.0)
    assert rep.passed


def test_moment_check_needs_enough_samples():
    with pytest.raises(ValueError):
        transition_moment_check(1.0, 1.0, 1.0, 0.1, count=999)


def test_plan_validation():
    with pytest.raises(ValueError):
        SimulationPlan(_model(), [0.2, 0.1], 3)
    with pytest.raises(ValueError):
        SimulationPlan(_model(), [0.1, 0.2], [np.zeros((1, 1))])
    plan = SimulationPlan(_model(), [0.1], 2, initial="sideways")
    with pytest.raises(ValueError):
        sample_trajectory(plan)

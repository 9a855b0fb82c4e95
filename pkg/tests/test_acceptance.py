"""End-to-end acceptance criteria, each checked at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also collected in the
terminal summary) before asserting.
"""
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from oracles import condition, expm_series, random_instance
from stresonator.basis import DomainSpec, build_basis, fd_convergence_order, gram_deviation
from stresonator.covariance import KernelSpec
from stresonator.estimation import fit
from stresonator.inference import ObservationBatch, filter_pass, posterior_at, smooth_pass, stationary_prior
from stresonator.model import (
    ComponentSpec,
    ModelSpec,
    assemble_system,
    continuous_block,
    discretize_blocks,
    model_spectral_density,
    stationary_block_cov,
)
from stresonator.simulator import (
    SimulationPlan,
    demo_model,
    demo_plan,
    field_values,
    sample_observations,
    sample_trajectory,
    transition_moment_check,
)


def test_criterion_1_batch_oracle_equivalence(verdict):
    tic = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        model, system, data, prior = random_instance(seed, T=20, n_basis=8)
        assert any(v.size == 0 for v in data.values)
        res = filter_pass(system, data, prior, noise_var=model.noise_var)
        smoothed = smooth_pass(system, res)
        for k in range(system.n_steps):
            mu, covs, _ = condition(system, data, prior.mean, prior.cov, model.noise_var, upto=k + 1)
            worst = max(worst, np.abs(res.filtered[k].mean - mu[k]).max(),
                        np.abs(res.filtered[k].cov - covs[k]).max())
        mu, covs, ll = condition(system, data, prior.mean, prior.cov, model.noise_var)
        for k in range(system.n_steps):
            worst = max(worst, np.abs(smoothed[k].mean - mu[k]).max(), np.abs(smoothed[k].cov - covs[k]).max())
        worst = max(worst, abs(res.loglik - ll))
    elapsed = time.perf_counter() - tic
    ok = worst <= 1e-8 and elapsed < 10
    verdict("criterion 1, filter/smoother vs joint Gaussian", ok,
            f"max abs deviation {worst:.2e} <= 1e-8, {elapsed:.1f} s < 10 s")
    assert ok


def _noise_integral(a, b, q, dt):
    F = continuous_block(a, b)

    def integrand(tau):
        v = expm(tau * F)[:, 1]
        return q * np.outer(v, v)

    return integrate.quad_vec(integrand, 0.0, dt, epsabs=0, epsrel=1e-12)[0]


def test_criterion_2_discretization(verdict):
    tic = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 100
    regime = np.repeat(["under", "over", "critical"], [40, 40, 20])
    a = rng.uniform(0.05, 10.0, n)
    b = np.where(regime == "under", a**2 / 4 + rng.uniform(0.5, 400, n),
                 np.where(regime == "over", a**2 / 4 * rng.uniform(0.0, 0.95, n), a**2 / 4))
    q = rng.uniform(0.1, 10.0, n)
    dt = 10 ** rng.uniform(-3, np.log10(0.5), n)
    A, Q = discretize_blocks(a, b, q, dt)
    err_A = err_Q = 0.0
    for k in range(n):
        ref_A = expm_series(continuous_block(a[k], b[k]), dt[k])
        ref_Q = _noise_integral(a[k], b[k], q[k], dt[k])
        # errors relative to the largest entry of each reference block
        err_A = max(err_A, np.abs(A[k] - ref_A).max() / np.abs(ref_A).max())
        err_Q = max(err_Q, np.abs(Q[k] - ref_Q).max() / np.abs(ref_Q).max())
    elapsed = time.perf_counter() - tic
    ok = err_A <= 1e-10 and err_Q <= 1e-8 and elapsed < 5
    verdict("criterion 2, exact discretization", ok,
            f"A vs series {err_A:.1e} <= 1e-10, Q vs quadrature {err_Q:.1e} <= 1e-8, {elapsed:.1f} s < 5 s")
    assert ok


def _round_trip(seed):
    plan = demo_plan(seed)
    system = plan.system()
    traj = sample_trajectory(plan, system)
    data = sample_observations(traj, plan, system)
    truth = plan.model
    comp = truth.components[0]
    # neutral starting template: only the known frequency and the frozen ν carry over
    template = ModelSpec(
        truth.domain, truth.n_basis,
        (ComponentSpec(KernelSpec("matern", 0.5, 1.0, comp.kernel.nu), omega=comp.omega, gamma=0.5,
                       chi=0.05, name=comp.name),),
        noise_var=0.25,
    )
    res = fit(data, template, restarts=10, seed=seed, t0=0.0)
    fitted = res.model(template)
    basis = fitted.basis()
    fsys = assemble_system(fitted, data.times, data.locations, basis, t0=0.0)
    prior = stationary_prior(fitted, basis, 0.0)
    smoothed = smooth_pass(fsys, filter_pass(fsys, data, prior, noise_var=fitted.noise_var))
    k = int(np.argmin(np.abs(data.times - 0.5)))
    assert data.times[k] == 0.5
    x = np.linspace(-1, 1, 101)[:, None]
    est = posterior_at([smoothed[k]], fitted, basis, x).total[0][0]
    true = field_values(traj[k:k + 1], truth, plan.basis, x)[0]
    rmse = float(np.sqrt(np.mean((est - true) ** 2)))
    p = res.params
    return {
        "sigma": np.sqrt(p["noise_var"]),
        "l": p["resonator.lengthscale"],
        "s": p["resonator.magnitude"],
        "gamma": p["resonator.gamma"],
        "chi": p["resonator.chi"],
        "rmse": rmse,
        "converged": res.traces[res.best_index].converged,
    }


@pytest.mark.slow
def test_criterion_3_demo_round_trip(verdict):
    tic = time.perf_counter()
    runs = [_round_trip(seed) for seed in range(5)]
    elapsed = time.perf_counter() - tic
    med = {key: float(np.median([r[key] for r in runs])) for key in ("sigma", "l", "s", "gamma", "chi", "rmse")}
    for seed, r in enumerate(runs):
        print(f"  seed {seed}: " + ", ".join(f"{k}={v:.4g}" for k, v in r.items()))
    L = 1.0
    ok = (0.08 <= med["sigma"] <= 0.12 and 0.05 * L <= med["l"] <= 0.2 * L and 12 <= med["s"] <= 50
          and med["rmse"] < 0.1 and elapsed < 600)
    verdict("criterion 3, 1-D demo round trip", ok,
            f"median sigma {med['sigma']:.4f} in [0.08, 0.12], l {med['l']:.4f} in [0.05, 0.2], "
            f"s {med['s']:.2f} in [12, 50], t=0.5 RMSE {med['rmse']:.4f} < 0.1, "
            f"gamma {med['gamma']:.3f}, chi {med['chi']:.4f}, {elapsed:.0f} s < 600 s")
    assert ok


def test_criterion_4_linear_time(verdict):
    tic = time.perf_counter()
    rng = np.random.default_rng(4)
    comps = tuple(
        ComponentSpec(KernelSpec("matern", 0.2, 1.0, 1.5), omega=w, gamma=0.5, chi=0.01, name=f"c{i}")
        for i, w in enumerate([0.0, 6.0, 12.0])
    )
    model = ModelSpec(DomainSpec.interval(1.0), 32, comps, 0.01)
    basis = model.basis()
    prior = stationary_prior(model, basis, 0.0)
    sizes = np.array([1000, 2000, 4000])
    seconds = []
    for T in sizes:
        times = np.arange(1, T + 1) * 0.01
        locs = [rng.uniform(-1, 1, (5, 1)) for _ in range(T)]
        data = ObservationBatch(times, locs, [rng.normal(size=5) for _ in range(T)])
        system = assemble_system(model, times, locs, basis, t0=0.0)
        best = np.inf
        for _ in range(2):
            start = time.perf_counter()
            filter_pass(system, data, prior, noise_var=model.noise_var, store=False)
            best = min(best, time.perf_counter() - start)
        seconds.append(best)
    seconds = np.array(seconds)
    slope, icpt = np.polyfit(sizes, seconds, 1)
    pred = slope * sizes + icpt
    r2 = 1 - np.sum((seconds - pred) ** 2) / np.sum((seconds - seconds.mean()) ** 2)
    ratios = seconds[1:] / seconds[:-1]
    elapsed = time.perf_counter() - tic
    ok = r2 > 0.98 and np.all((ratios >= 1.6) & (ratios <= 2.6)) and elapsed < 120
    verdict("criterion 4, linear time in T", ok,
            f"times {np.round(seconds, 2).tolist()} s, R^2 {r2:.4f} > 0.98, "
            f"doubling ratios {np.round(ratios, 2).tolist()} in [1.6, 2.6], {elapsed:.0f} s < 120 s")
    assert ok


def test_criterion_5_basis_validity(verdict):
    tic = time.perf_counter()
    devs = {}
    for domain in (DomainSpec.interval(1.0), DomainSpec.rectangle(1.0, 0.5), DomainSpec.disk(1.0),
                   DomainSpec.sphere(1.0)):
        devs[domain.kind] = gram_deviation(build_basis(domain, 32), 256)
    orders = {
        "interval": fd_convergence_order(build_basis(DomainSpec.interval(1.0), 32), [0.01, 0.005, 0.0025]),
        "rectangle": fd_convergence_order(build_basis(DomainSpec.rectangle(1.0, 0.5), 32), [0.02, 0.01, 0.005]),
    }
    elapsed = time.perf_counter() - tic
    ok = max(devs.values()) < 1e-6 and min(orders.values()) >= 1.9 and elapsed < 60
    verdict("criterion 5, basis validity", ok,
            "Gram deviation " + ", ".join(f"{k} {v:.1e}" for k, v in devs.items()) + " < 1e-6; FD order "
            + ", ".join(f"{k} {v:.3f}" for k, v in orders.items()) + f" >= 1.9; {elapsed:.1f} s < 60 s")
    assert ok


def test_criterion_6_stability_and_positivity(verdict):
    tic = time.perf_counter()
    rng = np.random.default_rng(6)
    eps = np.finfo(float).eps
    worst_rho = 0.0
    min_eig = np.inf
    b_bitwise = True
    b_resid = 0.0
    density_ok = True
    domains = [DomainSpec.interval(1.0), DomainSpec.rectangle(1.0, 0.5), DomainSpec.disk(1.0), DomainSpec.sphere(1.0)]
    bases = {d.kind: build_basis(d, 16) for d in domains}
    for draw in range(1000):
        domain = domains[draw % 4]
        family = "squared_exponential" if draw % 5 == 0 else "matern"
        ell = 10 ** rng.uniform(-2, 0.5)
        kernel = KernelSpec(family, ell, 10 ** rng.uniform(-1, 2), float(rng.choice([0.5, 1.5, 2.5, 0.8])))
        gamma = 0.0 if draw % 7 == 0 else 10 ** rng.uniform(-3, 1)
        chi = 0.0 if draw % 11 == 0 else 10 ** rng.uniform(-4, -1)
        omega = 0.0 if draw % 3 == 0 else rng.uniform(0, 60)
        comp = ComponentSpec(kernel, omega=omega, gamma=gamma, chi=chi, name="c")
        model = ModelSpec(domain, 16, (comp,), 0.01)
        times = np.cumsum(10 ** rng.uniform(-3, 0.5, 5))
        system = assemble_system(model, times, [np.zeros((0, domain.coord_dim))] * 5, bases[domain.kind],
                                 t0=0.0)
        rho = np.abs(np.linalg.eigvals(system.A.reshape(-1, 2, 2))).max()
        worst_rho = max(worst_rho, rho)
        Q = system.Q.reshape(-1, 2, 2)
        tr = np.trace(Q, axis1=1, axis2=2)
        ev = np.linalg.eigvalsh(Q)[:, 0]
        min_eig = min(min_eig, float(np.min(np.where(tr > 0, ev / np.where(tr > 0, tr, 1), ev))))
        a, w = system.a, system.omega
        b_bitwise &= bool(np.array_equal(system.b, a * a / 2 + w * w))
        b_resid = max(b_resid, float(np.max(np.abs((system.b - a * a / 2) - w * w) / (eps * np.maximum(system.b, 1e-300)))))
        nu_x = np.linspace(0, 30 / ell, 61)
        nu_t = np.linspace(0, 2 * omega + 10, 61)
        S = model_spectral_density(comp, nu_x[:, None], nu_t[None, :], domain.spectral_dim)
        damped = (gamma + chi * nu_x**2 > 0)[:, None] & np.ones_like(S, bool)
        density_ok &= bool(np.all(S[damped] > 0))
    elapsed = time.perf_counter() - tic
    ok = (worst_rho <= 1 + 1e-12 and min_eig >= 0 and b_bitwise and b_resid <= 1.0 and density_ok
          and elapsed < 60)
    verdict("criterion 6, stability and positivity", ok,
            f"max spectral radius {worst_rho:.12f} <= 1 + 1e-12, min eig(Q)/tr(Q) {min_eig:.1e} >= 0, "
            f"b == fl(a^2/2 + w^2) bitwise {b_bitwise}, |b - a^2/2 - w^2| <= {b_resid:.2f} ulp(b), "
            f"S > 0 where damped {density_ok}, {elapsed:.1f} s < 60 s")
    assert ok


def test_criterion_7_simulator_fidelity(verdict):
    tic = time.perf_counter()
    wiener = transition_moment_check(0.0, 0.0, 1.0, 1.0, count=10_000, seed=7)
    model = demo_model()
    comp = model.components[0]
    lam = model.basis().eigenvalues
    a = comp.gamma + comp.chi * lam[0]
    demo = transition_moment_check(a, a * a / 2 + comp.omega(0.0) ** 2, 3.0, 0.01, count=10_000, seed=8)

    damped = ComponentSpec(KernelSpec("matern", 0.2, 1.0, 1.5), omega=3.0, gamma=2.0, name="r")
    one = ModelSpec(DomainSpec.interval(1.0), 1, (damped,), 0.01)
    times = np.arange(1, 40_001) * 0.5
    plan = SimulationPlan(one, times, [np.zeros((0, 1))] * times.size, seed=7, t0=0.0, initial="zero")
    system = plan.system()
    x = sample_trajectory(plan, system)[100:]
    P = stationary_block_cov(system.a[0, 0], system.b[0, 0], system.q[0, 0])
    emp = np.cov(x, rowvar=False)
    lyap_err = float(np.max(np.abs(np.diag(emp) / np.diag(P) - 1)))
    cross = float(abs(emp[0, 1]) / np.sqrt(P[0, 0] * P[1, 1]))
    elapsed = time.perf_counter() - tic
    ok = wiener.passed and demo.passed and lyap_err < 0.05 and cross < 0.05 and elapsed < 60
    verdict("criterion 7, simulator statistical fidelity", ok,
            f"Wiener-velocity max err {max(wiener.mean_error.max(), wiener.cov_error.max()):.4f}, "
            f"demo block max err {max(demo.mean_error.max(), demo.cov_error.max()):.4f} <= 3/sqrt(1e4) = 0.03; "
            f"long-run variance error {lyap_err:.3f} < 0.05, cross term {cross:.3f}; {elapsed:.1f} s < 60 s")
    assert ok

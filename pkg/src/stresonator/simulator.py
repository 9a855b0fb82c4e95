"""Exact sampling of resonator fields and noisy point observations."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import BasisSet, DomainSpec, eval_basis
from .covariance import KernelSpec
from .inference import ObservationBatch, _block_factor, stationary_prior
from .model import (
    ComponentSpec,
    DiscreteSystem,
    ModelSpec,
    assemble_system,
    block_parameters,
    discretize_blocks,
    measurement_matrix,
)

__all__ = [
    "SimulationPlan",
    "MomentReport",
    "uniform_locations",
    "component_stream",
    "sample_trajectory",
    "sample_observations",
    "field_values",
    "transition_moment_check",
    "demo_model",
    "demo_plan",
]

MEASUREMENT_STREAM = "__measurement__"


def component_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for one named stream; equal (seed, name) give equal draws."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(ss)


def uniform_locations(domain: DomainSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points drawn uniformly over the domain."""
    g = domain.geometry
    if domain.kind == "interval":
        return rng.uniform(-g[0], g[0], size=(count, 1))
    if domain.kind == "rectangle":
        return np.column_stack([rng.uniform(-g[0], g[0], count), rng.uniform(-g[1], g[1], count)])
    if domain.kind == "disk":
        r = g[0] * np.sqrt(rng.uniform(size=count))
        th = rng.uniform(0, 2 * np.pi, size=count)
        return np.column_stack([r * np.cos(th), r * np.sin(th)])
    v = rng.normal(size=(count, 3))
    return g[0] * v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(eq=False)
class SimulationPlan:
    """Everything needed to reproduce one simulated data set.

    ``locations`` is either a list of per-step point arrays or an integer
    count of uniformly random points per step (drawn from the plan seed).
    ``initial`` selects ``'stationary'`` (diffuse variance for undamped
    blocks), ``'zero'``, or an explicit state vector.
    """

    model: ModelSpec
    times: np.ndarray
    locations: object
    seed: int = 0
    t0: float | None = None
    initial: object = "stationary"
    basis: BasisSet | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("plan times must be strictly increasing")
        if self.basis is None:
            self.basis = self.model.basis()
        if isinstance(self.locations, (int, np.integer)):
            rng = component_stream(self.seed, "__locations__")
            self.locations = [
                uniform_locations(self.model.domain, int(self.locations), rng) for _ in self.times
            ]
        if len(self.locations) != self.times.size:
            raise ValueError("need one location set per step")

    @property
    def start(self) -> float:
        return self.times[0] if self.t0 is None else self.t0

    def system(self) -> DiscreteSystem:
        return assemble_system(self.model, self.times, self.locations, self.basis, t0=self.start)


def _component_slices(model: ModelSpec):
    N = model.n_basis
    start = 0
    for comp, name in zip(model.components, model.component_names):
        width = 2 * N * comp.harmonics
        yield name, slice(start, start + width)
        start += width


def sample_trajectory(plan: SimulationPlan, system: DiscreteSystem | None = None) -> np.ndarray:
    """Draw ``x_k = A_k x_{k-1} + w_k`` for every step; returns ``(T, n)``.

    Each component draws from its own named stream, so simulating
    components jointly or one at a time gives the same fields.
    """
    model = plan.model
    system = plan.system() if system is None else system
    T, n = system.n_steps, model.state_dim

    if isinstance(plan.initial, str):
        if plan.initial == "stationary":
            init_chol = stationary_prior(model, plan.basis, plan.start).chol
        elif plan.initial == "zero":
            init_chol = np.zeros((n, n))
        else:
            raise ValueError(f"unknown initial state mode {plan.initial!r}")
        init_mean = np.zeros(n)
    else:
        init_mean = np.asarray(plan.initial, dtype=float).ravel()
        if init_mean.size != n:
            raise ValueError(f"initial state has {init_mean.size} entries, state dim is {n}")
        init_chol = np.zeros((n, n))

    z = np.empty((T + 1, n))
    for name, sl in _component_slices(model):
        rng = component_stream(plan.seed, name)
        z[:, sl] = rng.standard_normal((T + 1, sl.stop - sl.start))

    x = init_mean + init_chol @ z[0]
    out = np.empty((T, n))
    B = system.n_blocks
    for k in range(T):
        L = _block_factor(system.Q[k], floor=0.0)
        zk = z[k + 1].reshape(B, 2)
        x = np.einsum("bij,bj->bi", system.A[k], x.reshape(B, 2)) + np.einsum("bij,bj->bi", L, zk)
        x = x.ravel()
        out[k] = x
    return out


def sample_observations(
    trajectory: np.ndarray, plan: SimulationPlan, system: DiscreteSystem | None = None
) -> ObservationBatch:
    """``y_k = H_k x_k + r_k`` with i.i.d. ``N(0, noise_var)`` errors."""
    system = plan.system() if system is None else system
    if trajectory.shape[0] != system.n_steps:
        raise ValueError("trajectory and plan have different step counts")
    rng = component_stream(plan.seed, MEASUREMENT_STREAM)
    sd = np.sqrt(plan.model.noise_var)
    values = []
    for k in range(system.n_steps):
        clean = system.H[k] @ trajectory[k]
        values.append(clean + sd * rng.standard_normal(clean.size))
    return ObservationBatch(plan.times, plan.locations, values)


def field_values(
    trajectory: np.ndarray, model: ModelSpec, basis: BasisSet, points, selector="all"
) -> np.ndarray:
    """True field at ``points`` for every step, ``(T, P)``; see ``posterior_at``."""
    from .inference import _field_mask

    H = measurement_matrix(model, eval_basis(basis, points), _field_mask(model, selector))
    return trajectory @ H.T


@dataclass
class MomentReport:
    """Empirical vs exact one-step transition moments."""

    count: int
    tolerance: float
    mean_error: np.ndarray
    cov_error: np.ndarray
    empirical_cov: np.ndarray
    exact_cov: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.mean_error <= self.tolerance) and np.all(self.cov_error <= self.tolerance))


def transition_moment_check(
    a: float,
    b: float,
    q: float,
    dt: float,
    count: int = 10_000,
    state=(1.0, 0.0),
    seed: int = 0,
) -> MomentReport:
    """Monte Carlo check of one block's transition against ``(A x, Q)``.

    Errors are scaled by ``sqrt(Q_ii Q_jj)`` (mean errors by ``sqrt(Q_ii)``)
    and compared with ``3 / sqrt(count)``.  A deterministic block must give
    an exactly zero empirical covariance.
    """
    if count < 1000:
        raise ValueError("moment check needs at least 1000 samples")
    A, Q = discretize_blocks(a, b, q, dt)
    A, Q = A[0], Q[0]
    L = _block_factor(Q[None], floor=0.0)[0]
    rng = np.random.default_rng(seed)
    x = np.asarray(state, dtype=float)
    # moments of the noise part, so a deterministic block gives exactly zero
    noise = rng.standard_normal((count, 2)) @ L.T
    emp_mean = A @ x + noise.mean(axis=0)
    emp_cov = np.cov(noise, rowvar=False, bias=False)
    scale = np.sqrt(np.diag(Q))
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_err = np.where(scale > 0, np.abs(emp_mean - A @ x) / scale, np.abs(emp_mean - A @ x))
        denom = np.outer(scale, scale)
        cov_err = np.where(denom > 0, np.abs(emp_cov - Q) / denom, np.abs(emp_cov - Q))
    return MomentReport(count, 3 / np.sqrt(count), mean_err, cov_err, emp_cov, Q)


def demo_model(half_length: float = 1.0) -> ModelSpec:
    """The one-dimensional 6 Hz resonator used for the demonstration run."""
    kernel = KernelSpec("matern", lengthscale=0.1 * half_length, magnitude=25.0, nu=1.5)
    comp = ComponentSpec(kernel=kernel, omega=2 * np.pi * 6.0, gamma=1.0, chi=0.01, name="resonator")
    return ModelSpec(DomainSpec.interval(half_length), 32, (comp,), noise_var=0.1**2)


def demo_plan(seed: int = 0, n_steps: int = 100, per_step: int = 25, half_length: float = 1.0) -> SimulationPlan:
    """2500 scattered observations over ``[-L, L] × (0, 1]`` by default."""
    times = np.arange(1, n_steps + 1) / n_steps
    return SimulationPlan(demo_model(half_length), times, per_step, seed=seed, t0=0.0)

"""Maximum marginal-likelihood fitting of the resonator hyperparameters."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .basis import BasisSet, eval_basis
from .inference import NumericalError, ObservationBatch, filter_pass, loglik_pass, stationary_prior
from .model import ModelSpec, assemble_system, block_omegas, block_parameters

__all__ = [
    "FitError",
    "ParamVector",
    "Objective",
    "RestartTrace",
    "FitResult",
    "objective",
    "fit",
    "gradient_check",
    "GradientReport",
]

logger = logging.getLogger(__name__)

COMPONENT_PARAMS = ("gamma", "chi", "lengthscale", "magnitude", "nu")
DEFAULT_ACTIVE = ("gamma", "chi", "lengthscale", "magnitude")
# |log θ| beyond this is far outside any meaningful parameter range
_LOG_LIMIT = 50.0


class FitError(RuntimeError):
    """Every restart failed; the traces are attached."""

    def __init__(self, message, traces):
        super().__init__(message)
        self.traces = traces


@dataclass(frozen=True)
class ParamVector:
    """Named positive hyperparameters with active/frozen flags.

    Names are ``'<component>.<param>'`` for component parameters and
    ``'noise_var'`` for the measurement noise.  Optimizers see the log of
    the active entries only.
    """

    names: tuple
    values: tuple
    active: tuple

    def __post_init__(self):
        if not (len(self.names) == len(self.values) == len(self.active)):
            raise ValueError("names, values and active flags must align")
        for name, value, act in zip(self.names, self.values, self.active):
            if act and not value > 0:
                raise ValueError(f"active parameter {name} must be positive, got {value}")

    @classmethod
    def from_model(cls, model: ModelSpec, active: Sequence[str] | None = None) -> "ParamVector":
        """Read every parameter from ``model``.

        ``active`` lists full names or bare parameter names (``'chi'``
        activates every component's ``chi``).  By default the damping,
        coupling, length-scale, magnitude and noise variance are active and
        ``nu`` is frozen; zero-valued parameters start frozen.
        """
        names, values = [], []
        for cname, comp in zip(model.component_names, model.components):
            for p in COMPONENT_PARAMS:
                names.append(f"{cname}.{p}")
                values.append(getattr(comp.kernel, p) if p in ("lengthscale", "magnitude", "nu") else getattr(comp, p))
        names.append("noise_var")
        values.append(model.noise_var)
        wanted = set(DEFAULT_ACTIVE + ("noise_var",)) if active is None else set(active)
        flags = []
        for n, v in zip(names, values):
            hit = n in wanted or n.split(".")[-1] in wanted
            flags.append(bool(hit and (v > 0 or active is not None)))
        return cls(tuple(names), tuple(float(v) for v in values), tuple(flags))

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    @property
    def active_names(self) -> list[str]:
        return [n for n, a in zip(self.names, self.active) if a]

    @property
    def n_active(self) -> int:
        return sum(self.active)

    def to_unconstrained(self) -> np.ndarray:
        return np.log([v for v, a in zip(self.values, self.active) if a])

    def with_unconstrained(self, z) -> "ParamVector":
        z = np.asarray(z, dtype=float).ravel()
        if z.size != self.n_active:
            raise ValueError(f"expected {self.n_active} free values, got {z.size}")
        vals = list(self.values)
        it = iter(np.exp(z))
        for i, a in enumerate(self.active):
            if a:
                vals[i] = float(next(it))
        return replace(self, values=tuple(vals))

    def with_values(self, **updates) -> "ParamVector":
        vals = list(self.values)
        for k, v in updates.items():
            vals[self.names.index(k)] = float(v)
        return replace(self, values=tuple(vals))

    def freeze(self, *names) -> "ParamVector":
        flags = [a and n not in names and n.split(".")[-1] not in names for n, a in zip(self.names, self.active)]
        return replace(self, active=tuple(flags))

    def apply(self, model: ModelSpec) -> ModelSpec:
        """Return ``model`` with these parameter values substituted."""
        vals = self.as_dict()
        comps = []
        for cname, comp in zip(model.component_names, model.components):
            kernel = replace(
                comp.kernel,
                lengthscale=vals[f"{cname}.lengthscale"],
                magnitude=vals[f"{cname}.magnitude"],
                nu=vals[f"{cname}.nu"],
            )
            comps.append(replace(comp, kernel=kernel, gamma=vals[f"{cname}.gamma"], chi=vals[f"{cname}.chi"]))
        return replace(model, components=tuple(comps), noise_var=vals["noise_var"])


class Objective:
    """Negative marginal log-likelihood of ``data`` as a function of θ.

    Design matrices are evaluated once; each call rebuilds the discrete
    system under θ and runs the filter.  The prior sits at ``t0`` (the
    first observation time by default) with the stationary law of θ.

    ``method='covariance'`` evaluates the likelihood with the cheaper
    covariance-form recursion and falls back to the square-root filter
    whenever that recursion meets a non-positive-definite innovation
    covariance; ``method='sqrt'`` always uses the square-root filter.
    """

    def __init__(self, template: ModelSpec, data: ObservationBatch, params: ParamVector | None = None,
                 t0: float | None = None, basis: BasisSet | None = None, method: str = "covariance"):
        if method not in ("covariance", "sqrt"):
            raise ValueError(f"unknown likelihood method {method!r}")
        self.method = method
        self.template = template
        self.data = data
        self.params = ParamVector.from_model(template) if params is None else params
        self.basis = template.basis() if basis is None else basis
        self.t0 = data.times[0] if t0 is None else float(t0)
        self.design = [
            eval_basis(self.basis, x) if v.size else np.zeros((0, self.basis.size))
            for x, v in zip(data.locations, data.values)
        ]
        self.n_evals = 0
        self.last_error = None

    def model_at(self, theta: ParamVector) -> ModelSpec:
        return theta.apply(self.template)

    def negloglik(self, theta: ParamVector) -> float:
        self.n_evals += 1
        try:
            model = self.model_at(theta)
            system = assemble_system(
                model, self.data.times, self.data.locations, self.basis, t0=self.t0, design=self.design
            )
            prior = stationary_prior(model, self.basis, self.t0)
            value = None
            if self.method == "covariance":
                try:
                    value = -loglik_pass(system, self.data, prior, model.noise_var)
                except NumericalError:
                    value = None
            if value is None:
                value = -filter_pass(system, self.data, prior, noise_var=model.noise_var, store=False).loglik
        except (NumericalError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            self.last_error = f"{type(exc).__name__}: {exc}"
            logger.debug("objective failed at %s: %s", theta.as_dict(), exc)
            return math.inf
        if not np.isfinite(value):
            self.last_error = "non-finite log-likelihood"
            return math.inf
        return float(value)

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        if not np.all(np.abs(z) < _LOG_LIMIT):
            # exp would under- or overflow; treat as an infeasible point
            self.n_evals += 1
            self.last_error = "log-parameter out of range"
            return math.inf
        return self.negloglik(self.params.with_unconstrained(z))

    def gradient(self, z, h: float = 1e-4) -> np.ndarray:
        return central_gradient(self, z, h)


def objective(theta: ParamVector, template: ModelSpec, data: ObservationBatch) -> float:
    """``-ℓ(θ)`` for one parameter vector; ``inf`` if the filter fails."""
    return Objective(template, data, theta).negloglik(theta)


def central_gradient(fun: Callable, x, h: float = 1e-4) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


@dataclass
class GradientReport:
    """Central differences at steps ``h``, ``h/2`` and ``h/4``."""

    steps: tuple
    gradients: np.ndarray  # (3, n)
    ratios: np.ndarray  # |g(h) - g(h/2)| / |g(h/2) - g(h/4)|, ≈ 4 for a smooth objective

    @property
    def gradient(self) -> np.ndarray:
        # Richardson extrapolation of the two finest estimates
        return (4 * self.gradients[2] - self.gradients[1]) / 3

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


def gradient_check(fun: Callable, x, h: float = 1e-2) -> GradientReport:
    """Compare central-difference gradients at halving step sizes."""
    steps = (h, h / 2, h / 4)
    grads = np.stack([central_gradient(fun, x, s) for s in steps])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.abs(grads[0] - grads[1]) / np.abs(grads[1] - grads[2])
    return GradientReport(steps, grads, ratios)


@dataclass
class RestartTrace:
    index: int
    init: dict
    final: dict
    objective: float
    history: list = field(default_factory=list)
    n_evals: int = 0
    iterations: int = 0
    grad_norm: float = math.inf
    converged: bool = False
    message: str = ""
    seconds: float = 0.0

    @property
    def loglik(self) -> float:
        return -self.objective

    def to_record(self) -> dict:
        return {
            "restart": self.index,
            "init": self.init,
            "final": self.final,
            "loglik": self.loglik if np.isfinite(self.objective) else None,
            "trajectory_length": len(self.history),
            "n_evals": self.n_evals,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm if np.isfinite(self.grad_norm) else None,
            "converged": self.converged,
            "message": self.message,
        }


@dataclass
class FitResult:
    params: ParamVector
    objective: float
    traces: list
    best_index: int

    @property
    def loglik(self) -> float:
        return -self.objective

    @property
    def any_converged(self) -> bool:
        return any(t.converged for t in self.traces)

    def model(self, template: ModelSpec) -> ModelSpec:
        return self.params.apply(template)


def default_scales(template: ModelSpec, data: ObservationBatch, params: ParamVector) -> dict:
    """Data-derived centres of the restart ranges, one per active parameter.

    Length-scales scale with the domain size, the noise variance with
    ``(0.1 · std y)²``, rates with the inverse time span.  Kernel
    magnitudes are set so that the implied stationary field variance
    matches the observed variance at the other parameters' template values.
    """
    _, _, y = data.flat()
    sd = float(np.std(y)) if y.size > 1 else 1.0
    sd = sd if sd > 0 else 1.0
    span = float(data.times[-1] - data.times[0]) or 1.0
    extent = template.domain.extent
    basis = template.basis()
    scales = {}
    for name in params.active_names:
        p = name.split(".")[-1]
        if p == "lengthscale":
            scales[name] = extent
        elif p == "noise_var":
            scales[name] = (0.1 * sd) ** 2
        elif p == "gamma":
            scales[name] = 1.0 / span
        elif p == "chi":
            scales[name] = 1.0 / (basis.eigenvalues[0] * span)
        elif p == "nu":
            scales[name] = 1.5
        elif p == "magnitude":
            scales[name] = _implied_magnitude(template, basis, name.split(".")[0], sd)
    return scales


def _implied_magnitude(template: ModelSpec, basis: BasisSet, cname: str, sd: float) -> float:
    j = template.component_names.index(cname)
    comp = template.components[j]
    single = replace(template, components=(replace(comp, kernel=replace(comp.kernel, magnitude=1.0)),))
    a, q, _ = block_parameters(single, basis)
    w = block_omegas(single, basis, [comp.omega.knots[0]])[0]
    b = a * a / 2 + w * w
    damped = (a > 0) & (b > 0)
    if not damped.any():
        return sd
    # mean pointwise variance of the field = Σ_n var_n / |Ω|
    var = np.sum(q[damped] / (2 * a[damped] * b[damped])) / template.domain.measure
    return sd / math.sqrt(var) if var > 0 else sd


def fit(
    data: ObservationBatch,
    template: ModelSpec,
    restarts: int = 10,
    seed: int = 0,
    params: ParamVector | None = None,
    init: Sequence[ParamVector] | None = None,
    log_range: float = 2.0,
    scales: Mapping[str, float] | None = None,
    gtol: float = 1e-2,
    maxiter: int = 200,
    explore_iter: int | None = 10,
    polish: int = 1,
    fd_step: float = 1e-4,
    t0: float | None = None,
    method: str = "covariance",
    callback: Callable | None = None,
) -> FitResult:
    """Maximize the marginal likelihood with multi-start conjugate gradients.

    Every restart first runs ``explore_iter`` conjugate-gradient
    iterations.  The ``polish`` restarts with the lowest objective then
    continue until the gradient test passes or ``maxiter`` iterations
    have been spent in total.  ``explore_iter=None`` runs every restart to
    convergence.

    Parameters
    ----------
    data, template :
        Observations and the model whose values seed frozen parameters.
    restarts : int
        Number of random initial points (ignored when ``init`` is given).
    seed : int
        Seed for the initial-point generator.
    params : ParamVector, optional
        Which parameters are active; defaults to ``ParamVector.from_model``.
    init : sequence of ParamVector, optional
        Explicit starting points.
    log_range : float
        Initial points are ``scale · 10^U(-log_range, log_range)``.
    gtol, maxiter, fd_step :
        Tolerance on the max-norm of the log-space gradient, total
        iteration cap per restart and central-difference step.
    method : {'covariance', 'sqrt'}
        Likelihood recursion used by the objective.

    Returns
    -------
    FitResult
        The best restart and every trace.
    """
    params = ParamVector.from_model(template) if params is None else params
    if params.n_active == 0:
        raise ValueError("no active parameters to fit")
    if explore_iter is not None and explore_iter < 1:
        raise ValueError("explore_iter must be positive or None")
    obj = Objective(template, data, params, t0=t0, method=method)

    if init is None:
        if restarts < 1:
            raise ValueError("restarts must be positive")
        rng = np.random.default_rng(seed)
        centre = default_scales(template, data, params)
        if scales:
            centre.update(scales)
        starts = []
        for _ in range(restarts):
            draws = {n: centre[n] * 10 ** rng.uniform(-log_range, log_range) for n in params.active_names}
            starts.append(params.with_values(**draws))
    else:
        starts = list(init)

    cache = {}

    def f(z):
        key = np.asarray(z, dtype=float).tobytes()
        if key not in cache:
            if len(cache) > 4096:
                cache.clear()
            cache[key] = obj(z)
        return cache[key]

    def jac(z):
        return central_gradient(f, z, fd_step)

    def run(trace, z0, budget):
        """Advance one restart by at most ``budget`` iterations from ``z0``."""
        tic = time.perf_counter()
        before = obj.n_evals
        f0 = f(z0)
        out = z0
        if np.isfinite(f0) and budget > 0:
            def record(zk):
                trace.history.append(f(zk))

            with np.errstate(all="ignore"):
                res = optimize.minimize(f, z0, jac=jac, method="CG", callback=record,
                                        options={"gtol": gtol, "maxiter": budget})
            trace.iterations += int(res.nit)
            trace.message = str(res.message)
            out = res.x if f(res.x) <= f0 else z0
            g = res.jac if res.jac is not None and out is res.x else jac(out)
            trace.grad_norm = float(np.max(np.abs(g)))
        elif not np.isfinite(f0):
            trace.message = f"initial objective failed: {obj.last_error}"
        trace.objective = f(out)
        trace.final = params.with_unconstrained(out).as_dict()
        trace.converged = bool(np.isfinite(trace.objective) and trace.grad_norm <= gtol)
        trace.n_evals += obj.n_evals - before
        trace.seconds += time.perf_counter() - tic
        return out

    first = maxiter if explore_iter is None else min(explore_iter, maxiter)
    traces, points = [], []
    for i, start in enumerate(starts):
        z0 = start.to_unconstrained()
        trace = RestartTrace(i, start.as_dict(), start.as_dict(), math.inf, [f(z0)])
        points.append(run(trace, z0, first))
        traces.append(trace)
        logger.info("restart %d: -loglik %.6g after %d evals (%s)", i, trace.objective, trace.n_evals, trace.message)

    if explore_iter is not None and polish > 0:
        order = sorted((t for t in traces if np.isfinite(t.objective)), key=lambda t: t.objective)
        for trace in order[:polish]:
            if trace.converged or trace.iterations >= maxiter:
                continue
            points[trace.index] = run(trace, points[trace.index], maxiter - trace.iterations)
            logger.info("restart %d polished: -loglik %.6g after %d evals (%s)",
                        trace.index, trace.objective, trace.n_evals, trace.message)
    for trace in traces:
        if not trace.converged and trace.message.startswith("Maximum number of iterations") \
                and trace.iterations < maxiter:
            trace.message = f"stopped after {trace.iterations} exploratory iterations"
        if callback is not None:
            callback(trace)

    finite = [t for t in traces if np.isfinite(t.objective)]
    if not finite:
        raise FitError("all restarts failed", traces)
    best = min(finite, key=lambda t: t.objective)
    best_params = replace(params, values=tuple(best.final[n] for n in params.names))
    return FitResult(best_params, best.objective, traces, best.index)

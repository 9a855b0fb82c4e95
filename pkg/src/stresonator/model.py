"""Coefficient-space state-space form of the spatio-temporal resonator.

Each component ``j`` with damping ``γ``, diffusion coupling ``χ`` and
frequency ``ω`` acts on eigenmode ``λ`` as the scalar oscillator

    f'' + a f' + b f = noise,   a = γ + χλ,   b = a²/2 + ω²,

so the full model is block diagonal with one 2×2 block per
(component, harmonic, mode).  Blocks are discretized exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .basis import BasisSet, DomainSpec, build_basis, eval_basis
from .covariance import KernelSpec, project_noise, spectral_density

__all__ = [
    "FrequencySchedule",
    "ComponentSpec",
    "ModelSpec",
    "DiscreteSystem",
    "mode_coefficients",
    "continuous_block",
    "discretize_block",
    "discretize_blocks",
    "stationary_block_cov",
    "assemble_system",
    "model_spectral_density",
]

# |d·Δt²| below this switches the cos/cosh branches to their power series
_SERIES_SWITCH = 1e-2
_TAYLOR_TERMS = 14


class FrequencySchedule:
    """Piecewise-constant angular frequency ω(t) in rad per time unit.

    ``values[i]`` holds on ``(knots[i], knots[i+1]]``; the first value is
    extended to the left and the last one to the right.
    """

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=float).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if knots.shape != values.shape or knots.size == 0:
            raise ValueError("schedule needs matching, non-empty knots and values")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("schedule knots must be strictly increasing")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("frequencies must be finite and non-negative")
        self.knots = knots
        self.values = values

    @classmethod
    def constant(cls, omega: float) -> "FrequencySchedule":
        return cls([0.0], [omega])

    @classmethod
    def from_csv(cls, path) -> "FrequencySchedule":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["t"]) for r in rows], [float(r["omega"]) for r in rows])

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(self.knots, t, side="left") - 1, 0, self.knots.size - 1)
        return self.values[i]

    def __eq__(self, other):
        return (
            isinstance(other, FrequencySchedule)
            and np.array_equal(self.knots, other.knots)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        if self.is_constant:
            return f"FrequencySchedule.constant({self.values[0]!r})"
        return f"FrequencySchedule(<{self.knots.size} knots>)"

    def to_config(self):
        if self.is_constant:
            return float(self.values[0])
        return {"t": self.knots.tolist(), "omega": self.values.tolist()}


def _as_schedule(omega) -> FrequencySchedule:
    if isinstance(omega, FrequencySchedule):
        return omega
    if isinstance(omega, Mapping):
        if "csv" in omega:
            return FrequencySchedule.from_csv(omega["csv"])
        return FrequencySchedule(omega["t"], omega["omega"])
    return FrequencySchedule.constant(float(omega))


@dataclass(frozen=True)
class ComponentSpec:
    """One resonator component and its harmonics.

    Harmonic ``h`` (1-based) oscillates at ``h·ω(t)``, shares ``gamma``,
    ``chi`` and the kernel, and scales the kernel magnitude by
    ``harmonic_scales[h-1]``.  ``omega = 0`` gives the bias component.
    """

    kernel: KernelSpec
    omega: FrequencySchedule = field(default_factory=lambda: FrequencySchedule.constant(0.0))
    gamma: float = 0.0
    chi: float = 0.0
    harmonics: int = 1
    harmonic_scales: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "omega", _as_schedule(self.omega))
        for attr in ("gamma", "chi"):
            value = float(getattr(self, attr))
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{attr} must be non-negative, got {value}")
            object.__setattr__(self, attr, value)
        if int(self.harmonics) < 1:
            raise ValueError("harmonics must be a positive integer")
        object.__setattr__(self, "harmonics", int(self.harmonics))
        scales = tuple(float(s) for s in self.harmonic_scales) or (1.0,) * self.harmonics
        if len(scales) != self.harmonics or any(s <= 0 for s in scales):
            raise ValueError("harmonic_scales needs one positive factor per harmonic")
        object.__setattr__(self, "harmonic_scales", scales)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ComponentSpec":
        return cls(
            kernel=KernelSpec.from_config(cfg["kernel"]),
            omega=cfg.get("omega", 0.0),
            gamma=cfg.get("gamma", 0.0),
            chi=cfg.get("chi", 0.0),
            harmonics=cfg.get("harmonics", 1),
            harmonic_scales=tuple(cfg.get("harmonic_scales", ())),
            name=cfg.get("name", ""),
        )

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "omega": self.omega.to_config(),
            "gamma": self.gamma,
            "chi": self.chi,
            "harmonics": self.harmonics,
            "harmonic_scales": list(self.harmonic_scales),
            "kernel": self.kernel.to_config(),
        }


@dataclass(frozen=True)
class ModelSpec:
    """Domain, basis size, components and measurement noise variance.

    ``diffuse_var`` is the prior variance given to blocks without a
    stationary law (``a = 0`` or ``b = 0``).
    """

    domain: DomainSpec
    n_basis: int
    components: tuple
    noise_var: float
    diffuse_var: float = 1.0

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("model needs at least one component")
        object.__setattr__(self, "components", comps)
        if int(self.n_basis) < 1:
            raise ValueError("n_basis must be at least 1")
        object.__setattr__(self, "n_basis", int(self.n_basis))
        if not (float(self.noise_var) >= 0):
            raise ValueError("measurement noise variance must be non-negative")
        object.__setattr__(self, "noise_var", float(self.noise_var))
        names = self.component_names
        if len(set(names)) != len(names):
            raise ValueError(f"component names must be unique, got {names}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ModelSpec":
        return cls(
            domain=DomainSpec.from_config(cfg["domain"]),
            n_basis=cfg["n_basis"],
            components=tuple(ComponentSpec.from_config(c) for c in cfg["components"]),
            noise_var=cfg["noise_var"] if "noise_var" in cfg else cfg["noise_std"] ** 2,
            diffuse_var=cfg.get("diffuse_var", 1.0),
        )

    def to_config(self) -> dict:
        return {
            "domain": self.domain.to_config(),
            "n_basis": self.n_basis,
            "noise_var": self.noise_var,
            "diffuse_var": self.diffuse_var,
            "components": [c.to_config() for c in self.components],
        }

    @property
    def component_names(self) -> list[str]:
        return [c.name or f"c{j}" for j, c in enumerate(self.components)]

    @property
    def n_fields(self) -> int:
        """Number of scalar fields, one per (component, harmonic)."""
        return sum(c.harmonics for c in self.components)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_basis * self.n_fields

    def basis(self) -> BasisSet:
        return build_basis(self.domain, self.n_basis)

    def field_owner(self) -> np.ndarray:
        """Component index of every scalar field."""
        return np.repeat(np.arange(len(self.components)), [c.harmonics for c in self.components])


def mode_coefficients(gamma: float, chi: float, lam: float, omega: float) -> tuple[float, float]:
    """Scalar actions ``a = γ + χλ`` and ``b = a²/2 + ω²`` on one eigenmode."""
    for name, value in (("gamma", gamma), ("chi", chi), ("lambda", lam), ("omega", omega)):
        if value < 0:
            raise ValueError(f"{name} must be non-negative, got {value}")
    a = gamma + chi * lam
    return a, a * a / 2 + omega * omega


def continuous_block(a: float, b: float) -> np.ndarray:
    """Companion matrix ``[[0, 1], [-b, -a]]`` of one mode."""
    if a < 0 or b < 0:
        raise ValueError("a and b must be non-negative")
    return np.array([[0.0, 1.0], [-b, -a]])


def _even_odd_series(z):
    """Power series of cosh(√z) and sinh(√z)/√z for small |z|."""
    c = np.ones_like(z)
    s = np.ones_like(z)
    tc = np.ones_like(z)
    ts = np.ones_like(z)
    for k in range(1, 10):
        tc = tc * z / ((2 * k - 1) * (2 * k))
        ts = ts * z / ((2 * k) * (2 * k + 1))
        c = c + tc
        s = s + ts
    return c, s


def _transition(a, b, t):
    """Closed-form exp(tF) for stacks of companion blocks, shape (K, 2, 2)."""
    a, b, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, t)))
    half = 0.5 * a
    d = half * half - b
    z = d * t * t
    decay_c = np.empty_like(z)  # e^{-at/2}·C
    decay_s = np.empty_like(z)  # e^{-at/2}·S·t, S = sinh(√z)/√z or its trig twin

    small = np.abs(z) < _SERIES_SWITCH
    under = (~small) & (z < 0)
    over = (~small) & (z > 0)
    with np.errstate(over="ignore", invalid="ignore"):
        if small.any():
            c, s = _even_odd_series(z[small])
            e = np.exp(-half[small] * t[small])
            decay_c[small] = e * c
            decay_s[small] = e * s * t[small]
        if under.any():
            beta = np.sqrt(-d[under])
            e = np.exp(-half[under] * t[under])
            decay_c[under] = e * np.cos(beta * t[under])
            decay_s[under] = e * np.sin(beta * t[under]) / beta
        if over.any():
            beta = np.sqrt(d[over])
            # exponents stay <= 0 because beta <= a/2 when b >= 0
            ep = np.exp((beta - half[over]) * t[over])
            em = np.exp((-beta - half[over]) * t[over])
            decay_c[over] = 0.5 * (ep + em)
            decay_s[over] = 0.5 * (ep - em) / beta

    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = decay_c + half * decay_s
    out[..., 0, 1] = decay_s
    out[..., 1, 0] = -b * decay_s
    out[..., 1, 1] = decay_c - half * decay_s
    return out


def _noise_taylor(a, b, t):
    """∫₀ᵗ e^{τF} L Lᵀ e^{τF}ᵀ dτ by double power series (needs ‖F‖t small)."""
    K = a.shape[0]
    vecs = np.zeros((_TAYLOR_TERMS, K, 2))
    vecs[0, :, 1] = 1.0
    for m in range(1, _TAYLOR_TERMS):
        prev = vecs[m - 1]
        # F v = (v1, -b v0 - a v1), scaled by t/m to carry t^m/m!
        vecs[m, :, 0] = prev[:, 1] * t / m
        vecs[m, :, 1] = (-b * prev[:, 0] - a * prev[:, 1]) * t / m
    idx = np.arange(_TAYLOR_TERMS)
    weights = 1.0 / (idx[:, None] + idx[None, :] + 1)
    Q = np.einsum("mn,mki,nkj->kij", weights, vecs, vecs)
    return Q * t[:, None, None]


def discretize_blocks(a, b, q, dt):
    """Vectorized exact discretization of companion blocks.

    Parameters
    ----------
    a, b, q, dt : array_like
        Broadcastable arrays of damping, stiffness, noise intensity and step.

    Returns
    -------
    A, Q : ndarray, shape (K, 2, 2)
        Transition ``exp(dt F)`` and noise covariance
        ``q ∫₀^dt exp(τF) L Lᵀ exp(τF)ᵀ dτ`` with ``L = [0, 1]ᵀ``.

    Notes
    -----
    Q is evaluated by a power series at ``dt / 2^k`` with ``k`` chosen so
    that ``‖F‖ dt / 2^k <= 1/4``, then lifted by the semigroup relation
    ``Q(2s) = A(s) Q(s) A(s)ᵀ + Q(s)``, which only ever adds PSD terms.
    """
    a, b, q, dt = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a, b, q, dt))
    a, b, q, dt = (np.ravel(v) for v in np.broadcast_arrays(a, b, q, dt))
    if np.any(a < 0) or np.any(b < 0) or np.any(q < 0):
        raise ValueError("a, b and q must be non-negative")
    if np.any(dt < 0):
        raise ValueError("time steps must be non-negative")

    A = _transition(a, b, dt)

    norm = np.maximum(1.0, a + b) * dt
    with np.errstate(divide="ignore"):
        levels = np.where(norm > 0.25, np.ceil(np.log2(np.maximum(norm, 1e-300) / 0.25)), 0)
    levels = levels.astype(int)
    t0 = dt / 2.0**levels
    Q = _noise_taylor(a, b, t0)
    for i in range(int(levels.max(initial=0))):
        active = levels > i
        Ai = _transition(a[active], b[active], t0[active] * 2.0**i)
        Qi = Q[active]
        Q[active] = Ai @ Qi @ np.swapaxes(Ai, -1, -2) + Qi
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2)) * q[:, None, None]

    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Q))):
        bad = int(np.flatnonzero(~(np.isfinite(A).all((1, 2)) & np.isfinite(Q).all((1, 2))))[0])
        raise FloatingPointError(
            f"non-finite discretization for a={a[bad]!r}, b={b[bad]!r}, dt={dt[bad]!r}"
        )
    return A, Q


def discretize_block(F, q: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``(A, Q)`` of one companion block ``F = [[0, 1], [-b, -a]]``."""
    F = np.asarray(F, dtype=float)
    if F.shape != (2, 2) or F[0, 0] != 0 or F[0, 1] != 1:
        raise ValueError("F must have the companion form [[0, 1], [-b, -a]]")
    if not dt > 0:
        raise ValueError("time step must be positive")
    if not q >= 0:
        raise ValueError("noise intensity must be non-negative")
    A, Q = discretize_blocks(-F[1, 1], -F[1, 0], q, dt)
    return A[0], Q[0]


def stationary_block_cov(a, b, q) -> np.ndarray:
    """Stationary covariance ``diag(q/(2ab), q/(2a))`` of damped blocks."""
    a, b, q = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, q)))
    out = np.zeros(a.shape + (2, 2))
    out[..., 0, 0] = q / (2 * a * b)
    out[..., 1, 1] = q / (2 * a)
    return out


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """Per-step block-diagonal transitions, noises and measurement matrices.

    ``A`` and ``Q`` have shape ``(T, n_blocks, 2, 2)``; ``H[k]`` is
    ``(d_k, state_dim)``.  Step 0 propagates from ``t0`` to ``times[0]``.
    """

    times: np.ndarray
    dt: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    H: list
    a: np.ndarray
    b: np.ndarray
    omega: np.ndarray
    q: np.ndarray
    design: list

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def n_blocks(self) -> int:
        return self.A.shape[1]

    @property
    def state_dim(self) -> int:
        return 2 * self.n_blocks

    def dense_A(self, k: int) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.A[k])

    def dense_Q(self, k: int) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.Q[k])


def block_parameters(model: ModelSpec, basis: BasisSet):
    """Static per-block quantities: owner field, damping ``a``, noise ``q``.

    Blocks are ordered component-major, then harmonic, then mode.
    """
    a_list, q_list, harm = [], [], []
    lam = basis.eigenvalues
    for comp in model.components:
        a_modes = comp.gamma + comp.chi * lam
        for h, scale in enumerate(comp.harmonic_scales, start=1):
            a_list.append(a_modes)
            q_list.append(project_noise(comp.kernel.scaled(scale), basis))
            harm.append(np.full(basis.size, h))
    return np.concatenate(a_list), np.concatenate(q_list), np.concatenate(harm)


def block_omegas(model: ModelSpec, basis: BasisSet, times) -> np.ndarray:
    """Frequency of every block at every time, shape ``(T, n_blocks)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    cols = []
    for comp in model.components:
        w = comp.omega(times)
        for h in range(1, comp.harmonics + 1):
            cols.append(np.repeat((h * w)[:, None], basis.size, axis=1))
    return np.concatenate(cols, axis=1)


def measurement_matrix(model: ModelSpec, design: np.ndarray, fields=None) -> np.ndarray:
    """Rows ``[Φ, 0, Φ, 0, ...]`` reading the summed position fields.

    ``fields`` optionally restricts the read-out to a subset of the scalar
    fields (a boolean mask over ``model.n_fields``).
    """
    design = np.asarray(design, dtype=float)
    n_fields = model.n_fields
    mask = np.ones(n_fields, bool) if fields is None else np.asarray(fields, bool)
    H = np.zeros((design.shape[0], model.state_dim))
    N = model.n_basis
    for f in np.flatnonzero(mask):
        H[:, 2 * N * f : 2 * N * (f + 1) : 2] = design
    return H


def assemble_system(
    model: ModelSpec,
    times,
    locations: Sequence,
    basis: BasisSet | None = None,
    t0: float | None = None,
    design: Sequence | None = None,
) -> DiscreteSystem:
    """Discretize ``model`` on the step grid ``times``.

    Parameters
    ----------
    model : ModelSpec
    times : array_like, shape (T,)
        Strictly increasing step times.
    locations : sequence of T point arrays
        Observation locations per step; empty entries are allowed.
    basis : BasisSet, optional
        Defaults to ``model.basis()``.
    t0 : float, optional
        Time of the prior.  Defaults to ``times[0]``, in which case the first
        step is the identity with zero noise.
    design : sequence of arrays, optional
        Precomputed ``eval_basis`` results per step, reused across rebuilds.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.ndim != 1:
        raise ValueError("times must be one-dimensional")
    if times.size and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if len(locations) != times.size:
        raise ValueError("need one location set per step")
    basis = model.basis() if basis is None else basis
    if basis.size != model.n_basis or basis.domain != model.domain:
        raise ValueError("basis does not match the model domain/size")
    start = times[0] if (t0 is None and times.size) else t0
    if times.size and start > times[0]:
        raise ValueError("t0 must not exceed the first step time")

    a_blk, q_blk, _ = block_parameters(model, basis)
    dt = np.diff(np.concatenate([[start], times])) if times.size else np.empty(0)
    omega = block_omegas(model, basis, times)
    a = np.broadcast_to(a_blk, omega.shape)
    b = a * a / 2 + omega * omega
    q = np.broadcast_to(q_blk, omega.shape)
    dts = np.broadcast_to(dt[:, None], omega.shape)

    # distinct (a, b, q, dt) rows are discretized once
    keys = np.stack([a.ravel(), b.ravel(), q.ravel(), dts.ravel()], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    A_u, Q_u = discretize_blocks(uniq[:, 0], uniq[:, 1], uniq[:, 2], uniq[:, 3])
    inverse = inverse.ravel()
    shape = omega.shape + (2, 2)
    A = A_u[inverse].reshape(shape)
    Q = Q_u[inverse].reshape(shape)

    if design is None:
        design = [
            eval_basis(basis, loc) if np.size(loc) else np.zeros((0, basis.size))
            for loc in locations
        ]
    H = [measurement_matrix(model, Phi) for Phi in design]
    return DiscreteSystem(
        times=times, dt=dt, A=A, Q=Q, H=H, a=np.array(a), b=b, omega=omega, q=np.array(q),
        design=list(design),
    )


def model_spectral_density(
    component: ComponentSpec, nu_x, nu_t, dim: int = 1, omega: float | None = None
):
    """Space-time spectral density of one component (diagnostic).

    ``S = Q(ν_x) / ((ν_t² - A²/2 - ω²)² + ν_t² A²)`` with ``A = γ + χ ν_x²``.
    ``omega`` overrides the component frequency (defaults to its value at
    the first knot).
    """
    nu_x = np.asarray(nu_x, dtype=float)
    nu_t = np.asarray(nu_t, dtype=float)
    w = component.omega.values[0] if omega is None else float(omega)
    A = component.gamma + component.chi * nu_x**2
    Qx = spectral_density(component.kernel, np.abs(nu_x), dim)
    denom = (nu_t**2 - A**2 / 2 - w**2) ** 2 + nu_t**2 * A**2
    with np.errstate(divide="ignore"):
        out = Qx / denom
    return float(out) if np.ndim(out) == 0 else out

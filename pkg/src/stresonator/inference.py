"""Square-root Kalman filtering and RTS smoothing on the coefficient state."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .basis import BasisSet, eval_basis
from .model import (
    DiscreteSystem,
    ModelSpec,
    block_omegas,
    block_parameters,
    measurement_matrix,
    stationary_block_cov,
)

__all__ = [
    "NumericalError",
    "GaussianBelief",
    "ObservationBatch",
    "PosteriorField",
    "FilterResult",
    "stationary_prior",
    "predict_step",
    "update_step",
    "filter_pass",
    "loglik_pass",
    "smooth_pass",
    "posterior_at",
    "amplitude_map",
]

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
_Q_FLOOR = 1e-12


class NumericalError(ArithmeticError):
    """A filter or smoother step hit a numerically singular matrix."""


def _triangularize(pre: np.ndarray) -> np.ndarray:
    """Lower-triangular ``S`` with ``S Sᵀ = pre preᵀ`` (LQ via QR of ``preᵀ``)."""
    n, m = pre.shape
    if m < n:
        pre = np.hstack([pre, np.zeros((n, n - m))])
    qr, _, _, info = lapack.dgeqrf(pre.T)
    if info != 0:
        raise NumericalError(f"QR factorization failed (info={info})")
    return np.tril(qr[:n, :n].T)


def _psd_factor(C: np.ndarray) -> np.ndarray:
    C = 0.5 * (C + C.T)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(C)
        return _triangularize(V * np.sqrt(np.clip(w, 0, None)))


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Mean and lower-triangular covariance factor of the coefficient state."""

    mean: np.ndarray
    chol: np.ndarray

    @classmethod
    def from_cov(cls, mean, cov) -> "GaussianBelief":
        return cls(np.asarray(mean, float).copy(), _psd_factor(np.asarray(cov, float)))

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """Time-stamped point measurements; steps may carry zero values."""

    times: np.ndarray
    locations: list
    values: list

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if not (len(self.locations) == len(self.values) == times.size):
            raise ValueError("need one location set and one value set per step")
        locs, vals = [], []
        for k, (x, y) in enumerate(zip(self.locations, self.values)):
            y = np.asarray(y, dtype=float).ravel()
            x = np.asarray(x, dtype=float)
            if x.ndim <= 1:
                x = x.reshape(y.size, -1) if y.size else x.reshape(0, max(x.size, 1))
            if x.shape[0] != y.size:
                raise ValueError(f"step {k}: {x.shape[0]} locations but {y.size} values")
            locs.append(x)
            vals.append(y)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_arrays(cls, t, X, y) -> "ObservationBatch":
        """Group flat ``(t, x…, y)`` records into steps of equal time."""
        t = np.asarray(t, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        X = X.reshape(t.size, -1)
        y = np.asarray(y, dtype=float).ravel()
        order = np.argsort(t, kind="stable")
        t, X, y = t[order], X[order], y[order]
        times, start = np.unique(t, return_index=True)
        stop = np.append(start[1:], t.size)
        return cls(times, [X[i:j] for i, j in zip(start, stop)], [y[i:j] for i, j in zip(start, stop)])

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def counts(self) -> np.ndarray:
        return np.array([v.size for v in self.values], dtype=int)

    @property
    def n_obs(self) -> int:
        return int(self.counts.sum())

    def flat(self):
        """Flat ``(t, X, y)`` arrays, one row per measurement."""
        t = np.repeat(self.times, self.counts)
        dim = next((x.shape[1] for x in self.locations if x.size), 1)
        X = np.vstack([x.reshape(-1, dim) for x in self.locations]) if self.n_obs else np.zeros((0, dim))
        y = np.concatenate(self.values) if self.values else np.zeros(0)
        return t, X, y

    def with_times(self, extra_times) -> "ObservationBatch":
        """Insert prediction-only steps at ``extra_times`` (existing ones are kept)."""
        extra = np.setdiff1d(np.asarray(extra_times, float), self.times)
        times = np.concatenate([self.times, extra])
        order = np.argsort(times, kind="stable")
        dim = next((x.shape[1] for x in self.locations if x.size), 1)
        locs = list(self.locations) + [np.zeros((0, dim))] * extra.size
        vals = list(self.values) + [np.zeros(0)] * extra.size
        return ObservationBatch(times[order], [locs[i] for i in order], [vals[i] for i in order])


class FilterResult(NamedTuple):
    filtered: list
    loglik: float
    predicted: list
    increments: np.ndarray


@dataclass
class PosteriorField:
    """Posterior mean/variance per component on an evaluation set.

    ``components[name]`` and ``total`` are ``(mean, var)`` pairs of shape
    ``(T, P)``.
    """

    times: np.ndarray
    points: np.ndarray
    components: dict = field(default_factory=dict)
    total: tuple = None

    def std(self, name: str | None = None) -> np.ndarray:
        mean, var = self.total if name is None else self.components[name]
        return np.sqrt(np.clip(var, 0, None))


def stationary_prior(model: ModelSpec, basis: BasisSet, t0: float = 0.0) -> GaussianBelief:
    """Zero-mean prior: stationary covariance for damped blocks, diffuse otherwise."""
    a, q, _ = block_parameters(model, basis)
    omega = block_omegas(model, basis, [t0])[0]
    b = a * a / 2 + omega * omega
    damped = (a > 0) & (b > 0)
    blocks = np.zeros((a.size, 2, 2))
    blocks[damped] = stationary_block_cov(a[damped], b[damped], q[damped])
    blocks[~damped] = model.diffuse_var * np.eye(2)
    chol = np.zeros((2 * a.size, 2 * a.size))
    idx = np.arange(a.size) * 2
    chol[idx, idx] = np.sqrt(blocks[:, 0, 0])
    chol[idx + 1, idx + 1] = np.sqrt(blocks[:, 1, 1])
    return GaussianBelief(np.zeros(2 * a.size), chol)


def _block_factor(Q_blocks: np.ndarray, floor: float = _Q_FLOOR) -> np.ndarray:
    """Lower 2×2 Cholesky factors of PSD blocks with a relative diagonal floor."""
    tr = Q_blocks[:, 0, 0] + Q_blocks[:, 1, 1]
    q11 = Q_blocks[:, 0, 0] + floor * tr
    q22 = Q_blocks[:, 1, 1] + floor * tr
    out = np.zeros_like(Q_blocks)
    l11 = np.sqrt(q11)
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = np.where(l11 > 0, Q_blocks[:, 1, 0] / l11, 0.0)
    out[:, 0, 0] = l11
    out[:, 1, 0] = l21
    out[:, 1, 1] = np.sqrt(np.clip(q22 - l21 * l21, 0, None))
    return out


def _apply_blocks(blocks: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Block-diagonal ``blocks`` times a dense ``(2B, m)`` matrix."""
    B = blocks.shape[0]
    M3 = M.reshape(B, 2, -1)
    out = np.empty_like(M3)
    out[:, 0] = blocks[:, 0, 0, None] * M3[:, 0] + blocks[:, 0, 1, None] * M3[:, 1]
    out[:, 1] = blocks[:, 1, 0, None] * M3[:, 0] + blocks[:, 1, 1, None] * M3[:, 1]
    return out.reshape(2 * B, -1)


def _dense_factor(Q_blocks: np.ndarray) -> np.ndarray:
    L = _block_factor(Q_blocks)
    idx = 2 * np.arange(L.shape[0])
    out = np.zeros((2 * L.shape[0], 2 * L.shape[0]))
    out[idx, idx] = L[:, 0, 0]
    out[idx + 1, idx] = L[:, 1, 0]
    out[idx + 1, idx + 1] = L[:, 1, 1]
    return out


def predict_step(belief: GaussianBelief, A_k, Q_k) -> GaussianBelief:
    """Propagate a belief through ``x' = A x + w``, ``w ~ N(0, Q)``.

    ``A_k`` and ``Q_k`` are either stacks of 2×2 blocks ``(B, 2, 2)`` or
    dense ``(n, n)`` matrices.
    """
    A_k = np.asarray(A_k, dtype=float)
    Q_k = np.asarray(Q_k, dtype=float)
    n = belief.dim
    if A_k.ndim == 3:
        if A_k.shape[0] * 2 != n or Q_k.shape != A_k.shape:
            raise ValueError(f"block shapes {A_k.shape}/{Q_k.shape} do not match state dim {n}")
        both = _apply_blocks(A_k, np.hstack([belief.chol, belief.mean[:, None]]))
        AS, mean = both[:, :n], both[:, n]
        SQ = _dense_factor(Q_k)
    else:
        if A_k.shape != (n, n) or Q_k.shape != (n, n):
            raise ValueError(f"matrix shapes {A_k.shape}/{Q_k.shape} do not match state dim {n}")
        mean = A_k @ belief.mean
        AS = A_k @ belief.chol
        SQ = _psd_factor(Q_k)
    return GaussianBelief(mean, _triangularize(np.hstack([AS, SQ])))


def update_step(belief: GaussianBelief, H_k, R_k, y_k, method: str = "sqrt"):
    """Condition on ``y = H x + r``; returns ``(belief, loglik increment)``.

    ``R_k`` may be a scalar variance, a vector of variances or a full
    matrix.  ``method='joseph'`` uses the dense Joseph-form covariance
    update instead of the square-root array.
    """
    H = np.atleast_2d(np.asarray(H_k, dtype=float))
    y = np.asarray(y_k, dtype=float).ravel()
    d, n = H.shape
    if n != belief.dim or y.size != d:
        raise ValueError(f"H is {H.shape}, state dim {belief.dim}, {y.size} values")
    if d == 0:
        return belief, 0.0
    R = np.asarray(R_k, dtype=float)
    if R.ndim == 0:
        R = np.full(d, float(R))
    if R.ndim == 1:
        SR = np.diag(np.sqrt(R))
        R = np.diag(R)
    else:
        SR = _psd_factor(R)
    innov = y - H @ belief.mean
    HS = H @ belief.chol

    if method == "sqrt":
        pre = np.zeros((d + n, d + n))
        pre[:d, :d] = SR
        pre[:d, d:] = HS
        pre[d:, d:] = belief.chol
        post = _triangularize(pre)
        X = post[:d, :d]
        Y = post[d:, :d]
        chol = post[d:, d:]
        diag = np.abs(np.diag(X))
    elif method == "joseph":
        S = HS @ HS.T + R
        try:
            X = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance not positive definite: {exc}") from None
        diag = np.abs(np.diag(X))
        P = belief.cov
        K = linalg.cho_solve((X, True), H @ P).T
        IKH = np.eye(n) - K @ H
        chol = _psd_factor(IKH @ P @ IKH.T + K @ R @ K.T)
        Y = K @ X
    else:
        raise ValueError(f"unknown update method {method!r}")

    if diag.min() <= 1e-150 or diag.min() / diag.max() < 1e-8:
        cond = (diag.max() / max(diag.min(), 1e-300)) ** 2
        raise NumericalError(f"innovation covariance is numerically singular (cond ≈ {cond:.3g})")
    e = linalg.solve_triangular(X, innov, lower=True, check_finite=False)
    mean = belief.mean + Y @ e
    ll = -0.5 * (d * LOG_2PI + 2 * np.sum(np.log(diag)) + e @ e)
    return GaussianBelief(mean, chol), float(ll)


def _noise_arg(R, k):
    if callable(R):
        return R(k)
    return R


def filter_pass(
    system: DiscreteSystem,
    data: ObservationBatch | None,
    prior: GaussianBelief,
    noise_var=None,
    store: bool = True,
    method: str = "sqrt",
) -> FilterResult:
    """Run the Kalman filter over every step of ``system``.

    ``data`` supplies the values; the measurement matrices come from
    ``system.H``.  Steps without values only predict.  With ``store=False``
    only the final belief is kept (cheaper inside optimizers).
    """
    T = system.n_steps
    if data is not None and data.n_steps != T:
        raise ValueError(f"system has {T} steps but data has {data.n_steps}")
    if noise_var is None:
        raise ValueError("noise_var is required")
    filtered, predicted = [], []
    incs = np.zeros(T)
    belief = prior
    for k in range(T):
        belief = predict_step(belief, system.A[k], system.Q[k])
        if store:
            predicted.append(belief)
        y = data.values[k] if data is not None else np.zeros(0)
        if system.H[k].shape[0] != y.size:
            raise ValueError(f"step {k}: H has {system.H[k].shape[0]} rows but {y.size} values")
        if y.size:
            belief, incs[k] = update_step(belief, system.H[k], _noise_arg(noise_var, k), y, method)
        if store:
            filtered.append(belief)
    if not store:
        filtered = [belief]
    return FilterResult(filtered, float(incs.sum()), predicted, incs)


def _dense_blocks(blocks: np.ndarray) -> np.ndarray:
    """Block-diagonal matrix in position-first order (all f, then all df/dt)."""
    B = blocks.shape[0]
    idx = np.arange(B)
    out = np.zeros((2 * B, 2 * B))
    for i in range(2):
        for j in range(2):
            out[idx + i * B, idx + j * B] = blocks[:, i, j]
    return out


def loglik_pass(
    system: DiscreteSystem,
    data: ObservationBatch,
    prior: GaussianBelief,
    noise_var: float,
) -> float:
    """Total log-likelihood from a covariance-form recursion.

    Same quantity as ``filter_pass(...).loglik`` without the factor
    bookkeeping; a few times cheaper, which matters inside the optimizer.
    Only the likelihood is returned.  Raises ``NumericalError`` when an
    innovation covariance is not positive definite, so callers can fall
    back to the square-root filter.
    """
    T = system.n_steps
    if data.n_steps != T:
        raise ValueError(f"system has {T} steps but data has {data.n_steps}")
    r = float(noise_var)
    n = prior.dim
    B = n // 2
    # positions first, so H touches a contiguous leading block
    perm = np.r_[0:n:2, 1:n:2]
    mean = prior.mean[perm]
    P = prior.cov[np.ix_(perm, perm)]
    A = Q = None
    total = 0.0
    for k in range(T):
        if A is None or not (np.array_equal(system.A[k], system.A[k - 1])
                             and np.array_equal(system.Q[k], system.Q[k - 1])):
            A = _dense_blocks(system.A[k])
            Qb = system.Q[k].copy()
            tr = _Q_FLOOR * (Qb[:, 0, 0] + Qb[:, 1, 1])
            Qb[:, 0, 0] += tr
            Qb[:, 1, 1] += tr
            Q = _dense_blocks(Qb)
        mean = A @ mean
        P = A @ P @ A.T + Q
        y = data.values[k]
        if not y.size:
            continue
        He = system.H[k][:, 0::2]
        HP = He @ P[:B]
        S = He @ HP[:, :B].T
        S.flat[:: y.size + 1] += r
        X, info = lapack.dpotrf(S, lower=1)
        if info != 0:
            raise NumericalError(f"step {k}: innovation covariance not positive definite")
        diag = np.diag(X)
        if diag.min() / diag.max() < 1e-8:
            raise NumericalError(f"step {k}: innovation covariance is numerically singular")
        rhs = np.empty((y.size, n + 1))
        rhs[:, 0] = y - He @ mean[:B]
        rhs[:, 1:] = HP
        W, info = lapack.dtrtrs(X, rhs, lower=1)
        e, V = W[:, 0], W[:, 1:]
        mean = mean + V.T @ e
        P = P - V.T @ V
        total -= 0.5 * (y.size * LOG_2PI + 2 * np.sum(np.log(diag)) + e @ e)
    return float(total)


def smooth_pass(system: DiscreteSystem, result: FilterResult) -> list:
    """Rauch-Tung-Striebel backward sweep in square-root form.

    The smoothed covariance is assembled as
    ``(I - G A) C_f (I - G A)ᵀ + G Q Gᵀ + G C_s Gᵀ`` so each factor is a
    triangularization of PSD pieces.
    """
    filtered, predicted = result.filtered, result.predicted
    T = len(filtered)
    if T == 0:
        return []
    if len(predicted) != T:
        raise ValueError("filter result was produced with store=False")
    smoothed = [None] * T
    smoothed[-1] = filtered[-1]
    n = filtered[0].dim
    eye = np.eye(n)
    for k in range(T - 2, -1, -1):
        A_next = system.A[k + 1]
        fk = filtered[k]
        pk = predicted[k + 1]
        # G = C_f Aᵀ P⁻¹ with P = S_p S_pᵀ
        CAt = fk.chol @ _apply_blocks(A_next, fk.chol).T
        diag = np.abs(np.diag(pk.chol))
        if diag.min() > 1e-14 * diag.max():
            tmp = linalg.solve_triangular(pk.chol, CAt.T, lower=True, check_finite=False)
            G = linalg.solve_triangular(pk.chol.T, tmp, lower=False, check_finite=False).T
        else:
            # exactly degenerate directions (zero noise and zero prior) carry no gain
            logger.warning("predicted covariance at step %d is singular; using pseudo-inverse", k + 1)
            G = CAt @ np.linalg.pinv(pk.cov, rcond=1e-14, hermitian=True)
        if not np.all(np.isfinite(G)):
            raise NumericalError(f"smoother gain at step {k} is not finite")
        mean = fk.mean + G @ (smoothed[k + 1].mean - pk.mean)
        GA = _apply_blocks(np.swapaxes(A_next, 1, 2), G.T).T
        pre = np.hstack([(eye - GA) @ fk.chol, G @ _dense_factor(system.Q[k + 1]), G @ smoothed[k + 1].chol])
        smoothed[k] = GaussianBelief(mean, _triangularize(pre))
    return smoothed


def _field_mask(model: ModelSpec, selector) -> np.ndarray:
    owner = model.field_owner()
    names = model.component_names
    if selector is None or selector == "all":
        return np.ones(owner.size, bool)
    picks = [selector] if isinstance(selector, (str, int, np.integer)) else list(selector)
    idx = []
    for p in picks:
        if isinstance(p, str):
            if p not in names:
                raise KeyError(f"unknown component {p!r}; have {names}")
            idx.append(names.index(p))
        else:
            idx.append(int(p))
    return np.isin(owner, idx)


def posterior_at(
    beliefs: Sequence[GaussianBelief],
    model: ModelSpec,
    basis: BasisSet,
    points,
    selector="all",
    times=None,
) -> PosteriorField:
    """Posterior mean and pointwise variance of the selected fields.

    Every component is reported individually; ``total`` is the field read
    out by ``selector`` (``'all'`` sums every component).
    """
    Phi = eval_basis(basis, points)
    pts = basis.domain.check_points(points)
    T = len(beliefs)
    M = np.stack([b.mean for b in beliefs]) if T else np.zeros((0, model.state_dim))

    def moments(H):
        mean = M @ H.T
        var = np.stack([np.sum((H @ b.chol) ** 2, axis=1) for b in beliefs]) if T else np.zeros((0, H.shape[0]))
        return mean, var

    out = PosteriorField(np.asarray(times) if times is not None else np.arange(T), pts)
    for j, name in enumerate(model.component_names):
        out.components[name] = moments(measurement_matrix(model, Phi, _field_mask(model, j)))
    out.total = moments(measurement_matrix(model, Phi, _field_mask(model, selector)))
    return out


def amplitude_map(
    beliefs: Sequence[GaussianBelief],
    model: ModelSpec,
    basis: BasisSet,
    points,
    component,
    times,
) -> np.ndarray:
    """Time-averaged oscillation envelope of one component's posterior mean.

    Per field the envelope is ``sqrt(f² + (∂f/∂t / ω)²)``; zero-frequency
    fields contribute ``|f|``.  Harmonics are summed.
    """
    Phi = eval_basis(basis, points)
    mask = _field_mask(model, component)
    N = model.n_basis
    M = np.stack([b.mean for b in beliefs])
    omegas = block_omegas(model, basis, times)[:, ::N]  # one column per field
    env = np.zeros((M.shape[0], Phi.shape[0]))
    for f in np.flatnonzero(mask):
        pos = M[:, 2 * N * f : 2 * N * (f + 1) : 2] @ Phi.T
        vel = M[:, 2 * N * f + 1 : 2 * N * (f + 1) : 2] @ Phi.T
        w = omegas[:, f][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            env += np.where(w > 0, np.sqrt(pos**2 + (vel / w) ** 2), np.abs(pos))
    return env.mean(axis=0)

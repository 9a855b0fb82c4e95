"""Truncated eigenbases of the negative Laplacian on simple domains.

Fields are represented by their coefficients in the N lowest eigenfunctions
of ``-∇²`` (Dirichlet on bounded domains, Laplace-Beltrami on the sphere).
Every basis here is orthonormal in L²(Ω) under the natural area measure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "DomainSpec",
    "BasisSet",
    "bessel_zeros",
    "build_basis",
    "eval_basis",
    "quadrature_grid",
    "fd_eigen_residual",
    "fd_convergence_order",
    "gram_deviation",
    "lonlat_to_cartesian",
]

KINDS = ("interval", "rectangle", "disk", "sphere")

# relative slack when deciding whether a point lies inside the domain
_INSIDE_RTOL = 1e-9


class DomainError(ValueError):
    """Raised for points that fall outside the domain.

    The offending row is available as ``index``.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class DomainSpec:
    """A spatial domain.

    Parameters
    ----------
    kind : {'interval', 'rectangle', 'disk', 'sphere'}
    geometry : tuple of float
        ``(L,)`` half-length, ``(Lx, Ly)`` half-lengths, ``(R,)`` disk radius
        or ``(R,)`` sphere radius.
    """

    kind: str
    geometry: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported domain kind {self.kind!r}")
        geometry = tuple(float(g) for g in np.atleast_1d(self.geometry))
        expected = 2 if self.kind == "rectangle" else 1
        if len(geometry) != expected:
            raise ValueError(
                f"{self.kind} expects {expected} geometry value(s), got {len(geometry)}"
            )
        if not all(np.isfinite(g) and g > 0 for g in geometry):
            raise ValueError(f"geometry must be strictly positive, got {geometry}")
        object.__setattr__(self, "geometry", geometry)

    @classmethod
    def interval(cls, half_length: float) -> "DomainSpec":
        return cls("interval", (half_length,))

    @classmethod
    def rectangle(cls, half_x: float, half_y: float) -> "DomainSpec":
        return cls("rectangle", (half_x, half_y))

    @classmethod
    def disk(cls, radius: float) -> "DomainSpec":
        return cls("disk", (radius,))

    @classmethod
    def sphere(cls, radius: float = 1.0) -> "DomainSpec":
        return cls("sphere", (radius,))

    @classmethod
    def from_config(cls, cfg: Mapping) -> "DomainSpec":
        kind = cfg["kind"]
        if kind == "interval":
            return cls.interval(cfg.get("half_length", cfg.get("L")))
        if kind == "rectangle":
            return cls.rectangle(cfg["half_x"], cfg["half_y"])
        if kind in ("disk", "sphere"):
            return cls(kind, (cfg["radius"],))
        raise ValueError(f"unsupported domain kind {kind!r}")

    def to_config(self) -> dict:
        if self.kind == "interval":
            return {"kind": "interval", "half_length": self.geometry[0]}
        if self.kind == "rectangle":
            return {"kind": "rectangle", "half_x": self.geometry[0], "half_y": self.geometry[1]}
        return {"kind": self.kind, "radius": self.geometry[0]}

    @property
    def boundary(self) -> str | None:
        """Boundary condition: ``'dirichlet'``, or ``None`` for the sphere."""
        return None if self.kind == "sphere" else "dirichlet"

    @property
    def coord_dim(self) -> int:
        """Number of coordinates per point (the sphere uses Cartesian 3-vectors)."""
        return {"interval": 1, "rectangle": 2, "disk": 2, "sphere": 3}[self.kind]

    @property
    def spectral_dim(self) -> int:
        """Dimension used when evaluating isotropic spectral densities."""
        return 1 if self.kind == "interval" else 2

    @property
    def measure(self) -> float:
        """Length, area or surface area of the domain."""
        g = self.geometry
        if self.kind == "interval":
            return 2.0 * g[0]
        if self.kind == "rectangle":
            return 4.0 * g[0] * g[1]
        if self.kind == "disk":
            return np.pi * g[0] ** 2
        return 4.0 * np.pi * g[0] ** 2

    @property
    def extent(self) -> float:
        """Characteristic size (half-length or radius), used for scaling."""
        return max(self.geometry)

    def check_points(self, points) -> np.ndarray:
        """Return ``points`` as an ``(P, coord_dim)`` array or raise DomainError."""
        pts = np.asarray(points, dtype=float)
        if self.coord_dim == 1 and pts.ndim <= 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] != self.coord_dim:
            raise DomainError(
                f"{self.kind} points need {self.coord_dim} coordinate(s), got shape {pts.shape}"
            )
        bad = ~np.all(np.isfinite(pts), axis=1)
        g = self.geometry
        if self.kind == "interval":
            bad |= np.abs(pts[:, 0]) > g[0] * (1 + _INSIDE_RTOL)
        elif self.kind == "rectangle":
            bad |= np.abs(pts[:, 0]) > g[0] * (1 + _INSIDE_RTOL)
            bad |= np.abs(pts[:, 1]) > g[1] * (1 + _INSIDE_RTOL)
        elif self.kind == "disk":
            bad |= np.hypot(pts[:, 0], pts[:, 1]) > g[0] * (1 + _INSIDE_RTOL)
        else:
            bad |= np.abs(np.linalg.norm(pts, axis=1) - g[0]) > 1e-6 * g[0]
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"point {i} {pts[i].tolist()} lies outside the {self.kind}", i)
        return pts


def lonlat_to_cartesian(lon_deg, lat_deg, radius: float = 1.0) -> np.ndarray:
    """Longitude/latitude in degrees to Cartesian points on a sphere."""
    lon = np.deg2rad(np.asarray(lon_deg, dtype=float))
    lat = np.deg2rad(np.asarray(lat_deg, dtype=float))
    return radius * np.column_stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


def bessel_zeros(order: int, upper: float) -> np.ndarray:
    """All positive zeros of ``J_order`` below ``upper``.

    Zeros are bracketed on a 0.25-spaced scan (consecutive zeros are more than
    2.5 apart) and refined by bisection to 1e-12 relative width.
    """
    start = max(float(order), 0.25)
    if upper <= start:
        return np.empty(0)
    grid = np.arange(start, upper + 0.25, 0.25)
    vals = special.jv(order, grid)
    idx = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)
    lo, hi = grid[idx].copy(), grid[idx + 1].copy()
    flo = special.jv(order, lo)
    for _ in range(200):
        if np.all(hi - lo <= 1e-12 * hi):
            break
        mid = 0.5 * (lo + hi)
        fmid = special.jv(order, mid)
        left = np.sign(fmid) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fmid, flo)
        hi = np.where(left, hi, mid)
    zeros = 0.5 * (lo + hi)
    return zeros[zeros < upper]


@dataclass(frozen=True, eq=False)
class BasisSet:
    """The N lowest Laplacian eigenpairs of a domain.

    ``indices`` holds the analytic index of every mode: ``(n,)`` on the
    interval, ``(nx, ny)`` on the rectangle, ``(m, k, parity)`` on the disk
    (parity 0 = cos, 1 = sin) and ``(l, m)`` on the sphere.
    """

    domain: DomainSpec
    eigenvalues: np.ndarray
    indices: tuple
    _scale: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.eigenvalues.setflags(write=False)
        if self._scale is not None:
            self._scale.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def sqrt_eigenvalues(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    @property
    def descriptors(self) -> list[str]:
        kind = self.domain.kind
        out = []
        for idx in self.indices:
            if kind == "interval":
                out.append(f"n={idx[0]}")
            elif kind == "rectangle":
                out.append(f"nx={idx[0]};ny={idx[1]}")
            elif kind == "disk":
                out.append(f"m={idx[0]};k={idx[1]};{'sin' if idx[2] else 'cos'}")
            else:
                out.append(f"l={idx[0]};m={idx[1]}")
        return out

    def __call__(self, points) -> np.ndarray:
        return eval_basis(self, points)


def _lexsort_modes(lams: np.ndarray, keys: Sequence[tuple]) -> np.ndarray:
    # eigenvalues equal up to rounding count as ties, broken by the index tuple
    rounded = np.array([float(f"{lam:.11e}") for lam in lams])
    order = sorted(range(len(lams)), key=lambda i: (rounded[i], keys[i]))
    return np.asarray(order, dtype=int)


def build_basis(domain: DomainSpec, n_modes: int, include_constant: bool = False) -> BasisSet:
    """Return the ``n_modes`` lowest-eigenvalue modes of ``domain``.

    Parameters
    ----------
    domain : DomainSpec
    n_modes : int
        Number of basis functions, at least 1.
    include_constant : bool
        Sphere only; keep the ``l = 0`` constant mode with eigenvalue 0.
    """
    if not isinstance(domain, DomainSpec):
        raise TypeError("domain must be a DomainSpec")
    n_modes = int(n_modes)
    if n_modes < 1:
        raise ValueError("basis size must be at least 1")

    kind, g = domain.kind, domain.geometry
    if kind == "interval":
        n = np.arange(1, n_modes + 1)
        lams = (n * np.pi / (2 * g[0])) ** 2
        return BasisSet(domain, lams.astype(float), tuple((int(i),) for i in n))

    if kind == "rectangle":
        nx, ny = np.meshgrid(np.arange(1, n_modes + 1), np.arange(1, n_modes + 1), indexing="ij")
        nx, ny = nx.ravel(), ny.ravel()
        lams = (nx * np.pi / (2 * g[0])) ** 2 + (ny * np.pi / (2 * g[1])) ** 2
        keys = list(zip(nx.tolist(), ny.tolist()))
        order = _lexsort_modes(lams, keys)[:n_modes]
        return BasisSet(domain, lams[order].astype(float), tuple(keys[i] for i in order))

    if kind == "disk":
        radius = g[0]
        upper = 8.0
        while True:
            lams, keys, zeros = [], [], []
            for m in range(int(upper) + 1):
                for k, z in enumerate(bessel_zeros(m, upper), start=1):
                    for parity in ((0,) if m == 0 else (0, 1)):
                        lams.append((z / radius) ** 2)
                        keys.append((m, k, parity))
                        zeros.append(z)
            if len(keys) >= n_modes:
                break
            upper *= 1.5
        lams = np.asarray(lams)
        order = _lexsort_modes(lams, keys)[:n_modes]
        zeros = np.asarray(zeros)[order]
        ms = np.array([keys[i][0] for i in order])
        # analytic norm: ∫|J_m(z r/R)|² r dr = R² J_{m+1}(z)² / 2, angular part π or 2π
        angular = np.where(ms == 0, 2 * np.pi, np.pi)
        scale = 1.0 / np.sqrt(angular * radius**2 * special.jv(ms + 1, zeros) ** 2 / 2)
        return BasisSet(
            domain, lams[order], tuple(keys[i] for i in order), np.column_stack([zeros, scale])
        )

    radius = g[0]
    lams, keys = [], []
    l = 0 if include_constant else 1
    while len(keys) < n_modes:
        for m in range(-l, l + 1):
            lams.append(l * (l + 1) / radius**2)
            keys.append((l, m))
        l += 1
    return BasisSet(domain, np.asarray(lams[:n_modes], dtype=float), tuple(keys[:n_modes]))


def _real_sph_harm(degrees, orders, theta, phi):
    """Orthonormal real spherical harmonics on the unit sphere, (P, M)."""
    cos_t = np.cos(theta)[:, None]
    l = np.asarray(degrees)[None, :]
    m = np.asarray(orders)[None, :]
    am = np.abs(m)
    log_ratio = special.gammaln(l - am + 1) - special.gammaln(l + am + 1)
    norm = np.sqrt((2 * l + 1) / (4 * np.pi) * np.exp(log_ratio))
    leg = special.lpmv(am, l, cos_t)
    ph = phi[:, None]
    azim = np.where(m > 0, np.sqrt(2) * np.cos(am * ph), np.where(m < 0, np.sqrt(2) * np.sin(am * ph), 1.0))
    return norm * leg * azim


def eval_basis(basis: BasisSet, points) -> np.ndarray:
    """Evaluate the basis at ``points``; rows are points, columns modes.

    Points on a Dirichlet boundary give exact zeros.
    """
    domain = basis.domain
    pts = domain.check_points(points)
    kind, g = domain.kind, domain.geometry
    idx = np.asarray(basis.indices)

    if kind == "interval":
        L = g[0]
        x = np.clip(pts[:, 0], -L, L)
        phi = np.sin(np.outer(x + L, basis.sqrt_eigenvalues)) / np.sqrt(L)
        phi[np.abs(x) >= L] = 0.0
        return phi

    if kind == "rectangle":
        Lx, Ly = g
        x = np.clip(pts[:, 0], -Lx, Lx)
        y = np.clip(pts[:, 1], -Ly, Ly)
        kx = idx[:, 0] * np.pi / (2 * Lx)
        ky = idx[:, 1] * np.pi / (2 * Ly)
        phi = np.sin(np.outer(x + Lx, kx)) * np.sin(np.outer(y + Ly, ky)) / np.sqrt(Lx * Ly)
        phi[(np.abs(x) >= Lx) | (np.abs(y) >= Ly)] = 0.0
        return phi

    if kind == "disk":
        R = g[0]
        r = np.minimum(np.hypot(pts[:, 0], pts[:, 1]), R)
        theta = np.arctan2(pts[:, 1], pts[:, 0])
        zeros, scale = basis._scale[:, 0], basis._scale[:, 1]
        m = idx[:, 0]
        radial = special.jv(m[None, :], np.outer(r / R, zeros))
        angle = np.outer(theta, m)
        angular = np.where(idx[:, 2][None, :] == 1, np.sin(angle), np.cos(angle))
        phi = scale * radial * angular
        phi[r >= R] = 0.0
        return phi

    R = g[0]
    rad = np.linalg.norm(pts, axis=1)
    theta = np.arccos(np.clip(pts[:, 2] / rad, -1.0, 1.0))
    az = np.arctan2(pts[:, 1], pts[:, 0])
    return _real_sph_harm(idx[:, 0], idx[:, 1], theta, az) / R


def quadrature_grid(domain: DomainSpec, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and positive weights approximating ``∫_Ω · dΩ``.

    Gauss-Legendre along bounded coordinates and uniform nodes along
    periodic ones; weights sum to the domain measure.
    """
    resolution = int(resolution)
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    kind, g = domain.kind, domain.geometry
    nodes, w = np.polynomial.legendre.leggauss(resolution)

    if kind == "interval":
        return (g[0] * nodes).reshape(-1, 1), g[0] * w

    if kind == "rectangle":
        X, Y = np.meshgrid(g[0] * nodes, g[1] * nodes, indexing="ij")
        W = np.outer(g[0] * w, g[1] * w)
        return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()

    n_az = resolution if kind == "disk" else 2 * resolution
    az = 2 * np.pi * np.arange(n_az) / n_az
    w_az = 2 * np.pi / n_az

    if kind == "disk":
        R = g[0]
        r = 0.5 * R * (nodes + 1)
        w_r = 0.5 * R * w * r
        rr, aa = np.meshgrid(r, az, indexing="ij")
        pts = np.column_stack([(rr * np.cos(aa)).ravel(), (rr * np.sin(aa)).ravel()])
        return pts, np.repeat(w_r * w_az, n_az)

    R = g[0]
    ct, aa = np.meshgrid(nodes, az, indexing="ij")
    st = np.sqrt(1 - ct**2)
    pts = R * np.column_stack([(st * np.cos(aa)).ravel(), (st * np.sin(aa)).ravel(), ct.ravel()])
    return pts, np.repeat(R**2 * w * w_az, n_az)


def fd_eigen_residual(basis: BasisSet, spacing: float) -> np.ndarray:
    """Relative residual ``‖-∇²_h ψ_n - λ_n ψ_n‖ / (λ_n ‖ψ_n‖)`` per mode.

    Uses the second-order central stencil on a uniform grid of the given
    spacing over the interval or rectangle interior.
    """
    domain = basis.domain
    if domain.kind not in ("interval", "rectangle"):
        raise ValueError("finite-difference residual is defined on interval and rectangle only")
    h = float(spacing)
    if domain.kind == "interval":
        L = domain.geometry[0]
        n = int(round(2 * L / h))
        h = 2 * L / n
        x = -L + h * np.arange(n + 1)
        psi = eval_basis(basis, x)
        lap = -(psi[2:] - 2 * psi[1:-1] + psi[:-2]) / h**2
        core = psi[1:-1]
    else:
        Lx, Ly = domain.geometry
        nx, ny = int(round(2 * Lx / h)), int(round(2 * Ly / h))
        x = -Lx + 2 * Lx * np.arange(nx + 1) / nx
        y = -Ly + 2 * Ly * np.arange(ny + 1) / ny
        hx, hy = x[1] - x[0], y[1] - y[0]
        X, Y = np.meshgrid(x, y, indexing="ij")
        psi = eval_basis(basis, np.column_stack([X.ravel(), Y.ravel()]))
        psi = psi.reshape(nx + 1, ny + 1, -1)
        core = psi[1:-1, 1:-1]
        lap = -(
            (psi[2:, 1:-1] - 2 * core + psi[:-2, 1:-1]) / hx**2
            + (psi[1:-1, 2:] - 2 * core + psi[1:-1, :-2]) / hy**2
        )
        core = core.reshape(-1, basis.size)
        lap = lap.reshape(-1, basis.size)
    resid = lap - core * basis.eigenvalues
    return np.linalg.norm(resid, axis=0) / (basis.eigenvalues * np.linalg.norm(core, axis=0))


def gram_deviation(basis: BasisSet, resolution: int = 256) -> float:
    """``max |∫ψ_i ψ_j - δ_ij|`` by quadrature; zero for an exact orthonormal set."""
    pts, w = quadrature_grid(basis.domain, resolution)
    Phi = eval_basis(basis, pts)
    G = Phi.T @ (w[:, None] * Phi)
    return float(np.max(np.abs(G - np.eye(basis.size))))


def fd_convergence_order(basis: BasisSet, spacings: Sequence[float]) -> float:
    """Least-squares slope of ``log max residual`` against ``log h``."""
    h = np.asarray(spacings, dtype=float)
    if h.size < 2:
        raise ValueError("need at least two spacings")
    res = np.array([fd_eigen_residual(basis, s).max() for s in h])
    return float(np.polyfit(np.log(h), np.log(res), 1)[0])

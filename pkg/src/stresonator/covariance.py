"""Stationary spatial covariances for the driving noise and their spectra."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
from scipy import special

from .basis import BasisSet

__all__ = ["KernelSpec", "kernel_eval", "spectral_density", "project_noise"]

FAMILIES = ("matern", "squared_exponential")


@dataclass(frozen=True)
class KernelSpec:
    """Isotropic stationary covariance ``C(r)``.

    Parameters
    ----------
    family : {'matern', 'squared_exponential'}
    lengthscale : float
    magnitude : float
        ``C(0) = magnitude**2``.
    nu : float
        Matérn smoothness; ignored by the squared exponential.
    """

    family: str = "matern"
    lengthscale: float = 1.0
    magnitude: float = 1.0
    nu: float = 1.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unsupported kernel family {self.family!r}")
        for name in ("lengthscale", "magnitude", "nu"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"kernel {name} must be positive, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "KernelSpec":
        return cls(
            family=cfg.get("family", "matern"),
            lengthscale=cfg["lengthscale"],
            magnitude=cfg["magnitude"],
            nu=cfg.get("nu", 1.5),
        )

    def to_config(self) -> dict:
        out = {"family": self.family, "lengthscale": self.lengthscale, "magnitude": self.magnitude}
        if self.family == "matern":
            out["nu"] = self.nu
        return out

    def scaled(self, factor: float) -> "KernelSpec":
        return replace(self, magnitude=self.magnitude * factor)


def _matern_unit(nu: float, r: np.ndarray) -> np.ndarray:
    """Matérn correlation at scaled distance ``r / l``."""
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        z = np.sqrt(3.0) * r
        return (1 + z) * np.exp(-z)
    if nu == 2.5:
        z = np.sqrt(5.0) * r
        return (1 + z + z**2 / 3) * np.exp(-z)
    z = np.sqrt(2 * nu) * r
    out = np.ones_like(z)
    pos = z > 0
    zp = z[pos]
    with np.errstate(over="ignore", invalid="ignore"):
        vals = 2 ** (1 - nu) / special.gamma(nu) * zp**nu * special.kv(nu, zp)
    # kv underflows to 0 for huge arguments; the limit there is 0 too
    out[pos] = np.nan_to_num(vals, nan=0.0)
    return out


def kernel_eval(spec: KernelSpec, r):
    """Covariance at distance ``r >= 0``.  Scalar in, scalar out."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0) or not np.all(np.isfinite(r_arr)):
        raise ValueError("distance must be finite and non-negative")
    scaled = r_arr / spec.lengthscale
    if spec.family == "squared_exponential":
        out = np.exp(-0.5 * scaled**2)
    else:
        out = _matern_unit(spec.nu, np.atleast_1d(scaled)).reshape(scaled.shape)
    out = spec.magnitude**2 * out
    return float(out) if out.ndim == 0 else out


def spectral_density(spec: KernelSpec, w, dim: int = 1):
    """Isotropic ``dim``-dimensional Fourier transform of the covariance.

    Convention ``S(w) = ∫ C(|x|) exp(-i w·x) dx`` so that ``S(0) = ∫ C``.
    """
    if dim not in (1, 2):
        raise ValueError(f"spectral density supports dim 1 or 2, got {dim}")
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("frequency must be non-negative")
    s2, ell = spec.magnitude**2, spec.lengthscale
    if spec.family == "squared_exponential":
        out = s2 * (2 * np.pi * ell**2) ** (dim / 2) * np.exp(-0.5 * (w * ell) ** 2)
    else:
        nu = spec.nu
        kappa2 = 2 * nu / ell**2
        log_const = (
            dim * np.log(2)
            + 0.5 * dim * np.log(np.pi)
            + special.gammaln(nu + dim / 2)
            - special.gammaln(nu)
            + nu * np.log(kappa2)
        )
        out = s2 * np.exp(log_const - (nu + dim / 2) * np.log(kappa2 + w**2))
    return float(out) if out.ndim == 0 else out


def project_noise(spec: KernelSpec, basis: BasisSet) -> np.ndarray:
    """Diagonal noise weights ``q_n = S(sqrt(λ_n))`` in the eigenbasis."""
    return np.asarray(
        spectral_density(spec, basis.sqrt_eigenvalues, basis.domain.spectral_dim), dtype=float
    ).reshape(basis.size)

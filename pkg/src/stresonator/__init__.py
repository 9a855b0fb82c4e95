"""Spatio-temporal stochastic resonators in a truncated Laplacian eigenbasis.

The field is a sum of damped, spatially coupled oscillators driven by
spatially correlated white noise.  Each Laplacian eigenmode evolves as an
independent two-state linear SDE, discretized exactly, so filtering,
smoothing and likelihood evaluation cost time linear in the number of
steps.
"""
__version__ = "0.1.0"

from .basis import BasisSet, DomainError, DomainSpec, build_basis, eval_basis, quadrature_grid
from .covariance import KernelSpec, kernel_eval, project_noise, spectral_density
from .estimation import FitError, FitResult, Objective, ParamVector, fit, gradient_check, objective
from .inference import (
    GaussianBelief,
    NumericalError,
    ObservationBatch,
    PosteriorField,
    amplitude_map,
    filter_pass,
    loglik_pass,
    posterior_at,
    predict_step,
    smooth_pass,
    stationary_prior,
    update_step,
)
from .model import (
    ComponentSpec,
    DiscreteSystem,
    FrequencySchedule,
    ModelSpec,
    assemble_system,
    discretize_block,
    discretize_blocks,
    model_spectral_density,
)
from .simulator import SimulationPlan, sample_observations, sample_trajectory, transition_moment_check

__all__ = [
    "BasisSet",
    "DomainError",
    "DomainSpec",
    "build_basis",
    "eval_basis",
    "quadrature_grid",
    "KernelSpec",
    "kernel_eval",
    "project_noise",
    "spectral_density",
    "FitError",
    "FitResult",
    "Objective",
    "ParamVector",
    "fit",
    "gradient_check",
    "objective",
    "GaussianBelief",
    "NumericalError",
    "ObservationBatch",
    "PosteriorField",
    "amplitude_map",
    "filter_pass",
    "loglik_pass",
    "posterior_at",
    "predict_step",
    "smooth_pass",
    "stationary_prior",
    "update_step",
    "ComponentSpec",
    "DiscreteSystem",
    "FrequencySchedule",
    "ModelSpec",
    "assemble_system",
    "discretize_block",
    "discretize_blocks",
    "model_spectral_density",
    "SimulationPlan",
    "sample_observations",
    "sample_trajectory",
    "transition_moment_check",
]

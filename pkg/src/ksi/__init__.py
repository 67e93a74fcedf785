"""Kernelized stochastic-interpolant sampling.

Drift of the generative SDE is estimated as ``grad_phi(x).T @ eta_t`` where
``eta_t`` solves a small P x P Gram system, then samples are produced by an
integrator that is robust to the endpoint-singular optimal diffusion.
"""

__version__ = "0.1.0"

from ksi.errors import (
    ConfigError,
    CorruptTableError,
    GenerationError,
    KsiError,
    NumericalError,
)
from ksi.schedules import Schedule
from ksi.features import (
    FeatureMap,
    LinearCoordinates,
    RadialQuadratic,
    Monomials,
    HaarScattering1D,
    RandomFourier,
    LaggedLeverage,
    MarginalBumps,
    EnsembleVelocity,
    Concat,
    haar_scattering_1d,
    random_fourier,
    concat,
)
from ksi.fit import DataPairs, DriftTable, fit_table, interpolate, assemble, solve_eta
from ksi.oracle import GaussianTarget, OracleDrift, path_kl_estimate
from ksi.sampler import Diffusion, GenConfig, TableDrift, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptTableError",
    "GenerationError",
    "KsiError",
    "NumericalError",
    "Schedule",
    "FeatureMap",
    "LinearCoordinates",
    "RadialQuadratic",
    "Monomials",
    "HaarScattering1D",
    "RandomFourier",
    "LaggedLeverage",
    "MarginalBumps",
    "EnsembleVelocity",
    "Concat",
    "haar_scattering_1d",
    "random_fourier",
    "concat",
    "DataPairs",
    "DriftTable",
    "fit_table",
    "interpolate",
    "assemble",
    "solve_eta",
    "GaussianTarget",
    "OracleDrift",
    "path_kl_estimate",
    "Diffusion",
    "GenConfig",
    "TableDrift",
    "generate",
]

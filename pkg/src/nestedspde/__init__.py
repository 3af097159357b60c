"""Gaussian random fields defined by nested stochastic PDEs.

Sparse finite-element approximations on planar meshes and the sphere,
closed-form covariances for stationary operators, likelihood-based
estimation with kriging, and a scikit-learn style regressor.
"""
__version__ = "0.1.0"

from .cholesky import CholeskyFactor, NotPositiveDefiniteError, cholesky, logdet, logdet_diff, solve
from .covariance import (MaternParams, StationarySpec, matern_cov, matern_variance, nested_cov,
                         spectral_density)
from .harmonics import ScalarHarmonicBasis, VectorHarmonicBasis, sph_harmonic, vsh
from .inference import (FitOptions, FittedModel, ObservationSet, TrendModel, fit, hessian_uncertainty,
                        kriging, log_marginal_posterior, posterior_canonical, residual_diagnostics,
                        select_models)
from .mesh import TriangularMesh, assemble, build_icosphere, build_planar_mesh, evaluate_basis
from .spde import (L1Factor, L2Factor, OperatorSystemSpec, ParamField, discretize, matern_spec, simulate,
                   smoothness_check)
from .estimator import NestedSPDERegressor

__all__ = [
    "CholeskyFactor", "NotPositiveDefiniteError", "cholesky", "logdet", "logdet_diff", "solve",
    "MaternParams", "StationarySpec", "matern_cov", "matern_variance", "nested_cov", "spectral_density",
    "ScalarHarmonicBasis", "VectorHarmonicBasis", "sph_harmonic", "vsh",
    "FitOptions", "FittedModel", "ObservationSet", "TrendModel", "fit", "hessian_uncertainty", "kriging",
    "log_marginal_posterior", "posterior_canonical", "residual_diagnostics", "select_models",
    "TriangularMesh", "assemble", "build_icosphere", "build_planar_mesh", "evaluate_basis",
    "L1Factor", "L2Factor", "OperatorSystemSpec", "ParamField", "discretize", "matern_spec", "simulate",
    "smoothness_check", "NestedSPDERegressor",
]

"""Extrinsic Gaussian processes on manifolds."""

from .errors import EgpError, KernelError, ManifoldError, NumericalError
from .gp import (
    ClassificationModel,
    RegressionModel,
    fit_laplace,
    fit_regression,
    log_marginal_likelihood,
    predict,
    predict_prob,
)
from .hmc import GammaPrior, HmcChain, HmcConfig, LogPosterior, chain_predict, hmc_sample
from .kernels import INTRINSIC, MATERN, SQEXP, KernelSpec, gram, gram_cross, kernel_eval
from .manifolds import (
    Grassmann,
    ManifoldPoint,
    PlanarShape,
    Spd,
    Sphere,
    Stiefel,
    embed,
    extrinsic_distance,
    intrinsic_sphere_distance,
    preshape,
    sample_uniform,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "EgpError",
    "KernelError",
    "ManifoldError",
    "NumericalError",
    "ClassificationModel",
    "RegressionModel",
    "fit_laplace",
    "fit_regression",
    "log_marginal_likelihood",
    "predict",
    "predict_prob",
    "GammaPrior",
    "HmcChain",
    "HmcConfig",
    "LogPosterior",
    "chain_predict",
    "hmc_sample",
    "INTRINSIC",
    "MATERN",
    "SQEXP",
    "KernelSpec",
    "gram",
    "gram_cross",
    "kernel_eval",
    "Grassmann",
    "ManifoldPoint",
    "PlanarShape",
    "Spd",
    "Sphere",
    "Stiefel",
    "embed",
    "extrinsic_distance",
    "intrinsic_sphere_distance",
    "preshape",
    "sample_uniform",
    "validate",
]

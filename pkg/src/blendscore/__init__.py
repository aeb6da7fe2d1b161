"""Variance-reduced nonparametric score estimation for diffusion sampling."""

from .estimators import (
    ScoreEstimate,
    blended_objective,
    estimate_score,
    gaussian_error_pair,
    lambda_star,
    variance_time_factors,
)
from .kernels import AffineKernel, ou_kernel, ve_kernel, vp_kernel
from .proxy import ProxyConfig, bank_with_proxy, fit_proxy
from .sampler import SamplerConfig, make_time_grid, mala_sample, sample
from .snis import ReferenceBank, posterior_weights, prior_weights, tilt_bank
from .targets import GaussianMixture, LinearGaussianLikelihood, conjugate_posterior

__version__ = "0.1.0"

__all__ = [
    "AffineKernel",
    "GaussianMixture",
    "LinearGaussianLikelihood",
    "ProxyConfig",
    "ReferenceBank",
    "SamplerConfig",
    "ScoreEstimate",
    "bank_with_proxy",
    "blended_objective",
    "conjugate_posterior",
    "estimate_score",
    "fit_proxy",
    "gaussian_error_pair",
    "lambda_star",
    "make_time_grid",
    "mala_sample",
    "ou_kernel",
    "posterior_weights",
    "prior_weights",
    "sample",
    "tilt_bank",
    "variance_time_factors",
    "ve_kernel",
    "vp_kernel",
]

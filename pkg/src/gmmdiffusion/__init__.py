"""Learning Gaussian-mixture scores with piecewise polynomials and sampling by reverse diffusion."""

from .mixture import (ConditioningError, ConditioningParams, GaussianComponent, GaussianMixture,
                      exact_score, forward_sample, log_density, make_mixture, noised_mixture,
                      posterior_weights, restrict, sample_mixture)
from .rng import make_rng

__version__ = "0.1.0"

__all__ = [
    "ConditioningError", "ConditioningParams", "GaussianComponent", "GaussianMixture",
    "exact_score", "forward_sample", "log_density", "make_mixture", "make_rng",
    "noised_mixture", "posterior_weights", "restrict", "sample_mixture",
]

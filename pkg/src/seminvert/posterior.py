"""Gaussian likelihood and the log-posterior decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernel import (
    FoldedNormalHyper,
    FreeKernel,
    ParametricKernel,
    parametric_log_jacobian,
    prior_log_density_free,
    prior_log_density_parametric,
)
from .sparsity import log_prior_field

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseModel:
    fraction: float = 0.05
    floor: float = 1e-6

    def __post_init__(self):
        if not 0 < self.fraction <= 0.1:
            raise ValueError("noise fraction must lie in (0, 0.1]")
        if not self.floor > 0:
            raise ValueError("noise floor must be positive")

    def sigma(self, data) -> np.ndarray:
        return np.maximum(self.fraction * np.abs(np.asarray(data, dtype=float)), self.floor)


def log_likelihood(projections: np.ndarray, data: np.ndarray, sigma: np.ndarray) -> float:
    projections = np.asarray(projections, dtype=float)
    if projections.shape != np.shape(data) or np.shape(sigma) != np.shape(data):
        raise ValueError("projection, data and noise shapes differ")
    if not np.all(np.isfinite(projections)):
        raise FloatingPointError("non-finite projection value")
    resid = projections - data
    return float(np.sum(-np.log(sigma) - _LOG_SQRT_2PI - resid * resid / (2.0 * sigma * sigma)))


@dataclass(frozen=True)
class PosteriorTerms:
    log_likelihood: float
    log_prior_density: float
    log_prior_kernel: float
    log_prior_hyper: float

    @property
    def total(self) -> float:
        return self.log_likelihood + self.log_prior_density + self.log_prior_kernel + self.log_prior_hyper


def kernel_log_prior(kernel, kernel_depths, hyper: Optional[FoldedNormalHyper] = None) -> float:
    """Kernel prior term for either representation.

    The parametric term includes the change of variables from the sampled
    (Q, eta0) pair to the (Q, s) pair the prior is written on.
    """
    if isinstance(kernel, ParametricKernel):
        if hyper is None:
            raise ValueError("parametric kernel prior needs hyperparameters")
        return (prior_log_density_parametric(kernel.q, kernel.s, hyper)
                + parametric_log_jacobian(kernel.q, kernel.eta_surface))
    if isinstance(kernel, FreeKernel):
        return prior_log_density_free(kernel, kernel_depths)
    raise TypeError(f"unsupported kernel type {type(kernel).__name__}")


def hyper_log_prior(p: float, p_range=(0.6, 0.99), kernel=None, q_max=None, eta0_max=None) -> float:
    """Uniform hyperpriors: 0 inside the box, -inf outside."""
    if not p_range[0] <= p <= p_range[1]:
        return -math.inf
    if isinstance(kernel, FreeKernel):
        if q_max is not None and not 0 < kernel.q <= q_max:
            return -math.inf
        if eta0_max is not None and not 0 <= kernel.eta0 <= eta0_max:
            return -math.inf
    return 0.0


def log_posterior_terms(field: np.ndarray, kernel, projections: np.ndarray, data: np.ndarray,
                        sigma: np.ndarray, p: float, kernel_depths,
                        hyper: Optional[FoldedNormalHyper] = None, p_range=(0.6, 0.99),
                        q_max=None, eta0_max=None) -> PosteriorTerms:
    """Unnormalised log posterior split into its four components.

    Any non-finite piece makes the caller treat the state as impossible.
    """
    try:
        ll = log_likelihood(projections, data, sigma)
    except FloatingPointError:
        ll = -math.inf
    return PosteriorTerms(
        ll,
        log_prior_field(field, projections, p),
        kernel_log_prior(kernel, kernel_depths, hyper),
        hyper_log_prior(p, p_range, kernel, q_max, eta0_max),
    )


def log_posterior(*args, **kwargs) -> float:
    total = log_posterior_terms(*args, **kwargs).total
    return total if math.isfinite(total) else -math.inf

"""Depth correction kernel: parametric folded-normal form and free per-bin form.

Kernel vectors are stored surface-first: ``values[0]`` is the kernel at the
sample surface (depth 0) and ``values[k]`` applies at the top of depth bin
``k + 1``. The surface value is measured and never sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import _core

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class KernelError(ValueError):
    """Kernel parameters are outside their feasible domain."""


class InfeasibleKernelError(KernelError):
    """No real depth offset reproduces the surface value (2Q < surface)."""


def folded_normal_logpdf(x, mean, sd):
    """Log density of |X| with X ~ N(mean, sd^2); ``-inf`` for x < 0."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    a = -((x - mean) ** 2) / (2.0 * sd * sd)
    b = -((x + mean) ** 2) / (2.0 * sd * sd)
    out = np.logaddexp(a, b) - math.log(sd) - _LOG_SQRT_2PI
    out = np.where(x >= 0, out, -np.inf)
    return float(out) if out.ndim == 0 else out


def folded_shape(z, q, eta0, s):
    """Unnormalised folded-normal profile ``q * (g(z - eta0) + g(z + eta0))``."""
    z = np.asarray(z, dtype=float)
    val = q * (np.exp(-((z - eta0) ** 2) / (2 * s * s)) + np.exp(-((z + eta0) ** 2) / (2 * s * s)))
    return float(val) if val.ndim == 0 else val


def solve_eta0(q: float, s: float, eta_surface: float) -> float:
    """Depth offset that makes the profile hit ``eta_surface`` at z = 0."""
    if not (eta_surface > 0 and s > 0 and q > 0):
        raise KernelError("q, s and eta_surface must be positive")
    if 2.0 * q < eta_surface:
        raise InfeasibleKernelError(f"2Q = {2 * q:g} is below the surface value {eta_surface:g}")
    return s * math.sqrt(2.0 * math.log(2.0 * q / eta_surface))


def solve_width(q: float, eta0: float, eta_surface: float) -> float:
    """Inverse of :func:`solve_eta0` for the width ``s`` given ``eta0``."""
    if not (eta_surface > 0 and q > 0 and eta0 > 0):
        raise KernelError("q, eta0 and eta_surface must be positive")
    log_term = 2.0 * math.log(2.0 * q / eta_surface)
    if log_term <= 0:
        raise InfeasibleKernelError("need 2Q > surface value for a positive offset")
    return eta0 / math.sqrt(log_term)


@dataclass(frozen=True)
class ParametricKernel:
    q: float
    eta0: float
    s: float
    eta_surface: float

    def __post_init__(self):
        if not (self.q > 0 and self.s > 0 and self.eta_surface > 0 and self.eta0 >= 0):
            raise KernelError("parametric kernel needs q, s, eta_surface > 0 and eta0 >= 0")
        if 2.0 * self.q < self.eta_surface:
            raise InfeasibleKernelError("2Q must be at least the surface value")
        # compared at the surface: eta0 from the log is ill-conditioned near 2Q = surface
        surface = folded_shape(0.0, self.q, self.eta0, self.s)
        if not math.isclose(surface, self.eta_surface, rel_tol=1e-9):
            raise KernelError(f"eta0={self.eta0:g} gives surface value {surface:g}, "
                              f"not {self.eta_surface:g}")

    @classmethod
    def from_q_s(cls, q: float, s: float, eta_surface: float) -> "ParametricKernel":
        return cls(q, solve_eta0(q, s, eta_surface), s, eta_surface)

    @classmethod
    def from_q_eta0(cls, q: float, eta0: float, eta_surface: float) -> "ParametricKernel":
        return cls(q, eta0, solve_width(q, eta0, eta_surface), eta_surface)

    def values(self, depths) -> np.ndarray:
        return np.atleast_1d(eval_parametric(self, depths))


def eval_parametric(kern: ParametricKernel, z):
    return folded_shape(z, kern.q, kern.eta0, kern.s)


@dataclass(frozen=True)
class FoldedNormalHyper:
    """(mean, sd) pairs of the folded-normal priors on Q and s."""

    q_mean: float
    q_sd: float
    s_mean: float
    s_sd: float

    def __post_init__(self):
        if not (self.q_sd > 0 and self.s_sd > 0):
            raise KernelError("prior sds must be positive")


def prior_log_density_parametric(q: float, s: float, hyper: FoldedNormalHyper) -> float:
    if q < 0 or s < 0:
        return -math.inf
    return (folded_normal_logpdf(q, hyper.q_mean, hyper.q_sd)
            + folded_normal_logpdf(s, hyper.s_mean, hyper.s_sd))


def parametric_log_jacobian(q: float, eta_surface: float) -> float:
    """log |ds/d eta0| for the (Q, eta0) -> (Q, s) change of variables."""
    log_term = 2.0 * math.log(2.0 * q / eta_surface)
    if log_term <= 0:
        return -math.inf
    return -0.5 * math.log(log_term)


# ---------------------------------------------------------------------------
# Free-form kernel
# ---------------------------------------------------------------------------

def solve_free_prior_width(q: float, eta0: float, eta_surface: float) -> float:
    """Prior sd ``s`` at which the folded-normal prior density of the surface value is 1.

    The prior mean itself depends on ``s`` (it is the folded profile at depth
    0). The density can only reach 1 for ``s < 2 / sqrt(2 pi)``; scanning down
    from there in 2% steps and bisecting returns the largest root.
    :class:`InfeasibleKernelError` is raised when the density never reaches 1.
    """
    if not (q > 0 and eta0 >= 0 and eta_surface > 0):
        raise KernelError("q, eta_surface must be positive and eta0 non-negative")
    s = _core.solve_free_width(float(q), float(eta0), float(eta_surface))
    if s <= 0:
        raise InfeasibleKernelError(
            f"no prior width gives unit density at the surface value "
            f"(q={q:g}, eta0={eta0:g}, surface={eta_surface:g})")
    return s


@dataclass(frozen=True)
class FreeKernel:
    """Per-bin kernel values with uniform-prior hyperparameters ``q`` and ``eta0``."""

    values: tuple
    q: float
    eta0: float

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) < 1:
            raise KernelError("kernel needs at least one bin")
        if any(v < 0 for v in self.values):
            raise KernelError("kernel values must be non-negative")
        if not (self.q > 0 and self.eta0 >= 0):
            raise KernelError("q must be positive and eta0 non-negative")

    @property
    def eta_surface(self) -> float:
        return self.values[0]

    @property
    def s(self) -> float:
        return solve_free_prior_width(self.q, self.eta0, self.eta_surface)


def free_prior_means(q: float, eta0: float, s: float, depths) -> np.ndarray:
    return np.atleast_1d(folded_shape(depths, q, eta0, s))


def prior_log_density_free(kern: FreeKernel, depths: Sequence[float],
                           s: Optional[float] = None) -> float:
    """Sum of folded-normal log densities of every bin around the profile means.

    ``depths`` are the depths at which each stored value applies (surface
    first). By default ``s`` is solved from the surface constraint, which
    makes the surface term exactly 0; pass ``s`` to override.
    """
    depths = np.asarray(depths, dtype=float)
    if depths.shape != (len(kern.values),):
        raise KernelError("need one depth per kernel value")
    s = kern.s if s is None else s
    means = free_prior_means(kern.q, kern.eta0, s, depths)
    return float(np.sum(folded_normal_logpdf(np.asarray(kern.values), means, s)))


# ---------------------------------------------------------------------------
# Seed and normalisation
# ---------------------------------------------------------------------------

SEED_LOCATION_UM = 5.0
SEED_SCALE_UM = 5.0


def seed_parameters(eta_surface: float, location: float = SEED_LOCATION_UM,
                    scale: float = SEED_SCALE_UM) -> tuple[float, float, float]:
    """(Q, eta0, s) of the folded starting profile whose surface value is ``eta_surface``."""
    q = 0.5 * eta_surface * math.exp(location**2 / (2 * scale * scale))
    return q, location, scale


def seed_kernel(depths, eta_surface: float, location: float = SEED_LOCATION_UM,
                scale: float = SEED_SCALE_UM) -> np.ndarray:
    """Starting kernel: broad folded profile peaked at ``location``, pinned at the surface."""
    q, eta0, s = seed_parameters(eta_surface, location, scale)
    values = np.atleast_1d(folded_shape(np.asarray(depths, dtype=float), q, eta0, s))
    values[0] = eta_surface
    return values


def normalize_kernel(learnt, measured_surface: float):
    """Rescale a learnt kernel so its surface value equals ``measured_surface``.

    Accepts an array of values, a :class:`FreeKernel` or a
    :class:`ParametricKernel`; returns the same kind.
    """
    if isinstance(learnt, ParametricKernel):
        if learnt.eta_surface <= 0:
            raise KernelError("cannot normalise a kernel with zero surface value")
        factor = measured_surface / learnt.eta_surface
        return ParametricKernel(learnt.q * factor, learnt.eta0, learnt.s, measured_surface)
    if isinstance(learnt, FreeKernel):
        scaled = normalize_kernel(np.asarray(learnt.values), measured_surface)
        return replace(learnt, values=tuple(scaled), q=learnt.q * measured_surface / learnt.values[0])
    values = np.asarray(learnt, dtype=float)
    if values[..., 0].min() <= 0:
        raise KernelError("cannot normalise a kernel with zero surface value")
    out = values * (measured_surface / values[..., :1])
    out[..., 0] = measured_surface
    return out

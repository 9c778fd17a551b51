"""Sparsity-adaptive density prior.

The penalty on each voxel depends on how the projected signal changes
between successive energies at that pointing. A drop in signal (ratio
``tau < 1``) relaxes the penalty, so voxels below a sharp decline can stay
near zero cheaply while still allowing large values where signal grows.
"""

from __future__ import annotations

import numpy as np

P_RANGE = (0.6, 0.99)
P_STEP = 0.02


def compute_tau(projections: np.ndarray, i: int, k: int) -> float:
    """Signal ratio for voxel (i, k), both 1-based; 1 for the surface bin."""
    if k == 1:
        return 1.0
    cur = projections[i - 1, k - 1]
    prev = projections[i - 1, k - 2]
    if prev != 0 and cur <= prev:
        return float(cur / prev)
    return 1.0


def tau_matrix(projections: np.ndarray) -> np.ndarray:
    proj = np.asarray(projections, dtype=float)
    tau = np.ones_like(proj)
    prev, cur = proj[:, :-1], proj[:, 1:]
    shrink = (prev != 0) & (cur <= prev)
    ratio = np.divide(cur, prev, out=np.ones_like(cur), where=shrink)
    tau[:, 1:] = np.where(shrink, ratio, 1.0)
    return tau


def nu(tau, p):
    """Response ``p**tau * (1 - p)**(1 - tau)``."""
    tau = np.asarray(tau, dtype=float)
    out = np.exp(tau * np.log(p) + (1.0 - tau) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def log_prior_xi(xi, tau, p):
    val = np.asarray(xi, dtype=float) * nu(tau, p)
    out = -(val * val)
    return float(out) if np.ndim(out) == 0 else out


def log_prior_field(field: np.ndarray, projections: np.ndarray, p: float) -> float:
    return float(np.sum(log_prior_xi(field, tau_matrix(projections), p)))


def reflect_into(x: float, lo: float, hi: float) -> float:
    """Fold ``x`` back into ``[lo, hi]`` by mirroring at the ends."""
    width = hi - lo
    y = (x - lo) % (2 * width)
    if y > width:
        y = 2 * width - y
    return lo + y


def propose_p(p: float, u: float, step: float = P_STEP, bounds=P_RANGE) -> float:
    """Reflective uniform random walk driven by a uniform variate ``u`` in [0, 1)."""
    return reflect_into(p + step * (2.0 * u - 1.0), *bounds)

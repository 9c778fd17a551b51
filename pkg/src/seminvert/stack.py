"""Measured or simulated image stacks and the constant-offset split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class ImageStack:
    """Image data ``(n_data, n_eng)`` with matching per-pixel noise sd.

    ``offsets`` holds the per-energy constants removed by
    :func:`decompose_low_rank` (zeros if none were removed) and
    ``rounding`` the exact float error of that subtraction, so the
    original data can be rebuilt bit for bit.
    """

    data: np.ndarray
    sigma: np.ndarray
    decomposed: bool = False
    offsets: Optional[np.ndarray] = None
    rounding: Optional[np.ndarray] = None
    energies: Optional[tuple] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if data.ndim != 2:
            raise StackError("image data must be a 2-D (n_data, n_eng) array")
        if sigma.shape != data.shape:
            raise StackError(f"noise shape {sigma.shape} does not match data {data.shape}")
        if not np.all(np.isfinite(data)):
            raise StackError("image data contains non-finite values")
        if not np.all(sigma > 0):
            raise StackError("noise sd must be strictly positive everywhere")
        offsets = np.zeros(data.shape[1]) if self.offsets is None else np.asarray(self.offsets, float)
        if offsets.shape != (data.shape[1],):
            raise StackError("need one offset per energy")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sigma", sigma)
        rounding = np.zeros_like(data) if self.rounding is None else np.asarray(self.rounding, float)
        if rounding.shape != data.shape:
            raise StackError("rounding term must match the data shape")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "rounding", rounding)

    @property
    def n_data(self) -> int:
        return self.data.shape[0]

    @property
    def n_eng(self) -> int:
        return self.data.shape[1]

    def reconstructed(self) -> np.ndarray:
        """Data with the removed offsets added back, correctly rounded."""
        out = np.empty_like(self.data)
        for idx, value in np.ndenumerate(self.data):
            out[idx] = math.fsum((value, self.rounding[idx], self.offsets[idx[1]]))
        return out


def decompose_low_rank(stack: ImageStack, noise=None):
    """Remove the per-energy minimum from every plane.

    Returns the residual stack and the removed offsets. ``noise`` (a
    :class:`~seminvert.posterior.NoiseModel`) recomputes sd from the
    residual; otherwise the original sd is kept.
    """
    offsets = stack.data.min(axis=0)
    residual, error = _difference_with_error(stack.data, offsets)
    sigma = noise.sigma(residual) if noise is not None else stack.sigma
    out = replace(stack, data=residual, sigma=sigma, decomposed=True,
                  offsets=stack.offsets + offsets, rounding=stack.rounding + error)
    return out, offsets



def _difference_with_error(a: np.ndarray, b: np.ndarray):
    """``a - b`` rounded, plus its exact rounding error (Knuth's two-sum)."""
    neg = -b
    diff = a + neg
    b_virtual = diff - a
    a_virtual = diff - b_virtual
    error = (a - a_virtual) + (neg - b_virtual)
    return diff, error

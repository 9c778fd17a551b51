"""Sample discretisation, beam pointings and interaction-volume geometry.

The sample is a cuboid whose top face (z = 0) is tiled by ``n_side x n_side``
square columns of edge ``omega``. Beam pointing ``i`` (1-based, row-major)
hits the centre of column ``i``. At energy index ``k`` the interaction volume
is a hemisphere of radius ``R0[k] = h[k]`` centred on that point, and depth
bin ``k`` spans ``[h[k-1], h[k])`` with ``h[0] = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

KANAYA_COEFFICIENT = 0.0276

# 2**14 Sobol points per column footprint; depth is integrated exactly.
_QMC_LOG2_POINTS = 14


class GridError(ValueError):
    """Invalid discretisation parameters."""


@dataclass(frozen=True)
class MaterialConstants:
    atomic_number: float
    atomic_weight: float
    mass_density: float
    kanaya_coefficient: float = KANAYA_COEFFICIENT

    def __post_init__(self):
        for name in ("atomic_number", "atomic_weight", "mass_density"):
            if not getattr(self, name) > 0:
                raise GridError(f"{name} must be strictly positive")


def kanaya_depth(mat: MaterialConstants, eps) -> np.ndarray | float:
    """Maximal beam penetration depth in um for beam energy ``eps`` in kV."""
    eps_arr = np.asarray(eps, dtype=float)
    if np.any(eps_arr < 0):
        raise GridError("beam energy must be non-negative")
    depth = (
        mat.kanaya_coefficient
        * mat.atomic_weight
        * eps_arr**1.67
        / (mat.mass_density * mat.atomic_number**0.89)
    )
    return float(depth) if depth.ndim == 0 else depth


def beam_xy(i: int, n_data: int) -> tuple[int, int]:
    """1-based (x, y) bins of beam pointing ``i`` (1 <= i <= n_data).

    Agrees with ``x = i mod n, y = int(i / n) + 1`` whenever ``i`` is not a
    multiple of ``n``; multiples map to the last column of their row.
    """
    n = _side(n_data)
    if not 1 <= i <= n_data:
        raise IndexError(f"beam pointing {i} outside 1..{n_data}")
    return (i - 1) % n + 1, (i - 1) // n + 1


def beam_index(x: int, y: int, n_data: int) -> int:
    n = _side(n_data)
    if not (1 <= x <= n and 1 <= y <= n):
        raise IndexError(f"bin ({x}, {y}) outside the {n}x{n} grid")
    return (y - 1) * n + x


def _side(n_data: int) -> int:
    n = math.isqrt(n_data)
    if n < 1 or n * n != n_data:
        raise GridError(f"n_data={n_data} is not a perfect square")
    return n


@dataclass(frozen=True)
class Grid:
    """Discretisation of the imaged sample.

    ``depths`` holds ``h[0..n_eng]`` with ``h[0] = 0``; interaction-volume
    radii equal the depths.
    """

    omega: float
    n_side: int
    energies: tuple
    depths: tuple

    def __post_init__(self):
        object.__setattr__(self, "energies", tuple(float(e) for e in self.energies))
        object.__setattr__(self, "depths", tuple(float(h) for h in self.depths))
        if not self.omega > 0:
            raise GridError("omega must be positive")
        if self.n_side < 1:
            raise GridError("n_side must be >= 1")
        if len(self.energies) < 1:
            raise GridError("need at least one beam energy")
        if np.any(np.diff(self.energies) <= 0):
            raise GridError("beam energies must be strictly increasing")
        if len(self.depths) != len(self.energies) + 1:
            raise GridError("depths must have n_eng + 1 entries (h0 = 0 first)")
        if self.depths[0] != 0.0:
            raise GridError("h[0] must be 0")
        if np.any(np.diff(self.depths) <= 0):
            raise GridError("depths must be strictly increasing")

    @classmethod
    def from_material(cls, mat: MaterialConstants, omega: float, n_side: int,
                      energies: Sequence[float]) -> "Grid":
        h = kanaya_depth(mat, np.asarray(energies, dtype=float))
        return cls(omega, n_side, tuple(energies), (0.0, *np.atleast_1d(h)))

    @property
    def n_data(self) -> int:
        return self.n_side * self.n_side

    @property
    def n_eng(self) -> int:
        return len(self.energies)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.depths)

    @property
    def radii(self) -> np.ndarray:
        """``R0[0..n_eng]``; equal to the depths for hemispheres."""
        return np.asarray(self.depths)

    @property
    def bin_widths(self) -> np.ndarray:
        return np.diff(self.depths)

    @property
    def kernel_depths(self) -> np.ndarray:
        """Depth at which each stored kernel value applies (top of its bin)."""
        return np.asarray(self.depths[:-1])

    def column_centre(self, i: int) -> tuple[float, float]:
        x, y = beam_xy(i, self.n_data)
        return (x - 0.5) * self.omega, (y - 0.5) * self.omega

    def column_centres(self) -> np.ndarray:
        """(n_data, 2) column centres relative to the centre of the sample."""
        idx = np.arange(self.n_data)
        half = 0.5 * self.n_side * self.omega
        x = (idx % self.n_side + 0.5) * self.omega - half
        y = (idx // self.n_side + 0.5) * self.omega - half
        return np.column_stack([x, y])


@dataclass(frozen=True)
class ResolutionRegime:
    """Which projection model applies: 1, 2 (with ``k_in``) or 3."""

    model: int
    k_in: Optional[int] = None

    def __post_init__(self):
        if self.model not in (1, 2, 3):
            raise GridError(f"unknown resolution model {self.model}")
        if self.model == 2 and (self.k_in is None or self.k_in < 1):
            raise GridError("Model2 needs k_in >= 1")

    def __str__(self):
        return f"Model2(k_in={self.k_in})" if self.model == 2 else f"Model{self.model}"


def classify_regime(grid: Grid) -> ResolutionRegime:
    inside = np.pi * grid.radii[1:] ** 2 <= grid.omega**2
    if inside.all():
        return ResolutionRegime(1)
    if not inside.any():
        return ResolutionRegime(3)
    k_in = int(np.flatnonzero(inside).max()) + 1
    return ResolutionRegime(2, k_in)


# ---------------------------------------------------------------------------
# Footprint areas (Model 2 neighbour weights)
# ---------------------------------------------------------------------------

def _quadrant_disk_area(x: float, y: float, r: float) -> float:
    """Area of disk(0, r) within [0, x] x [0, y] for x, y >= 0."""
    x = min(x, r)
    y = min(y, r)
    if x <= 0 or y <= 0:
        return 0.0
    if x * x + y * y <= r * r:
        return x * y

    def col_integral(a):
        # integral of sqrt(r^2 - s^2) ds over [0, a]
        return 0.5 * (a * math.sqrt(max(r * r - a * a, 0.0)) + r * r * math.asin(min(a / r, 1.0)))

    s_star = math.sqrt(r * r - y * y)
    lo = min(x, s_star)
    return y * lo + col_integral(x) - col_integral(lo)


def _signed_corner(x: float, y: float, r: float) -> float:
    return math.copysign(1.0, x) * math.copysign(1.0, y) * _quadrant_disk_area(abs(x), abs(y), r)


def disk_rect_area(r: float, x0: float, x1: float, y0: float, y1: float) -> float:
    """Exact area of disk(0, r) intersected with [x0, x1] x [y0, y1]."""
    if r <= 0 or x1 <= x0 or y1 <= y0:
        return 0.0
    return (_signed_corner(x1, y1, r) - _signed_corner(x0, y1, r)
            - _signed_corner(x1, y0, r) + _signed_corner(x0, y0, r))


def footprint_weights(omega: float, radius: float) -> np.ndarray:
    """3x3 overlap areas of a centred disk with the neighbouring columns.

    Entry ``[dy + 1, dx + 1]`` is the area shared with the column offset by
    ``(dx, dy)``. Not normalised.
    """
    w = np.zeros((3, 3))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            w[dy + 1, dx + 1] = disk_rect_area(
                radius, (dx - 0.5) * omega, (dx + 0.5) * omega,
                (dy - 0.5) * omega, (dy + 0.5) * omega)
    return w


def neighbour_weights(grid: Grid, i: int, k: int, k_prime: int) -> list[tuple[int, float]]:
    """Model 2 averaging weights ``w[k'](i'|i)`` for interaction volume ``(i, k)``.

    The lateral extent at depth bin ``k'`` is the hemisphere's circular
    section at the bin midpoint. Weights cover at most the 3x3 block around
    ``i``, are clipped to the grid and normalised to 1. Indices are 1-based.
    """
    if not 1 <= k_prime <= k <= grid.n_eng:
        raise IndexError("need 1 <= k' <= k <= n_eng")
    h = grid.h
    z_mid = 0.5 * (h[k_prime - 1] + h[k_prime])
    radius = math.sqrt(max(h[k] ** 2 - z_mid**2, 0.0))
    area = footprint_weights(grid.omega, radius)
    x, y = beam_xy(i, grid.n_data)
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            a = area[dy + 1, dx + 1]
            xn, yn = x + dx, y + dy
            if a > 0 and 1 <= xn <= grid.n_side and 1 <= yn <= grid.n_side:
                out.append((beam_index(xn, yn, grid.n_data), a))
    if not out:  # radius 0: the column itself
        return [(i, 1.0)]
    total = sum(a for _, a in out)
    return [(j, a / total) for j, a in out]


# ---------------------------------------------------------------------------
# Hemisphere / voxel overlaps (Model 3)
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def _unit_square_lattice() -> np.ndarray:
    return qmc.Sobol(d=2, scramble=False).random_base2(_QMC_LOG2_POINTS)


def column_depth_fractions(omega: float, radius: float, depths: Sequence[float],
                           dx: int, dy: int) -> np.ndarray:
    """Fraction of each depth-bin voxel of column offset ``(dx, dy)`` inside the hemisphere.

    The hemisphere (radius ``radius``) is centred on the top-face centre of
    column (0, 0). Voxels whose eight corners are inside get exactly 1, those
    wholly outside exactly 0; the rest are integrated with a fixed Sobol
    lattice over the footprint and the exact depth overlap per point.
    """
    h = np.asarray(depths, dtype=float)
    x0, x1 = (dx - 0.5) * omega, (dx + 0.5) * omega
    y0, y1 = (dy - 0.5) * omega, (dy + 0.5) * omega
    near2 = _interval_min_sq(x0, x1) + _interval_min_sq(y0, y1)
    far2 = max(x0 * x0, x1 * x1) + max(y0 * y0, y1 * y1)
    r2 = radius * radius
    top, bot = h[:-1], h[1:]
    frac = np.zeros(len(h) - 1)
    full = far2 + bot**2 <= r2
    empty = near2 + top**2 >= r2
    partial = ~(full | empty)
    frac[full] = 1.0
    if partial.any():
        pts = _unit_square_lattice()
        px = x0 + pts[:, 0] * omega
        py = y0 + pts[:, 1] * omega
        zcap = np.sqrt(np.maximum(r2 - px * px - py * py, 0.0))
        for t in np.flatnonzero(partial):
            inside = np.clip(zcap, top[t], bot[t]) - top[t]
            frac[t] = inside.mean() / (bot[t] - top[t])
    return frac


def _interval_min_sq(a: float, b: float) -> float:
    if a <= 0 <= b:
        return 0.0
    return min(a * a, b * b)


@lru_cache(maxsize=256)
def hemisphere_offsets(omega: float, radius: float, depths: tuple, max_offset: int):
    """Translation-invariant overlap pattern of one interaction volume.

    Returns ``(dx, dy, t, r)`` arrays over voxels with ``r > 0`` and
    ``|dx|, |dy| <= max_offset``; ``t`` is the 0-based depth bin. Computed for
    one quadrant and mirrored.
    """
    reach = min(int(math.ceil(radius / omega + 0.5)), max_offset)
    cache = {}
    dxs, dys, ts, rs = [], [], [], []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            key = (abs(dx), abs(dy)) if abs(dx) >= abs(dy) else (abs(dy), abs(dx))
            if key not in cache:
                cache[key] = column_depth_fractions(omega, radius, depths, *key)
            frac = cache[key]
            for t in np.flatnonzero(frac > 0):
                dxs.append(dx)
                dys.append(dy)
                ts.append(int(t))
                rs.append(float(frac[t]))
    return (np.array(dxs, dtype=np.int64), np.array(dys, dtype=np.int64),
            np.array(ts, dtype=np.int64), np.array(rs))


@dataclass(frozen=True)
class OverlapTable:
    """Voxels inside interaction volume ``(i, k)`` (both 1-based).

    ``entries`` lists ``((j, t), r)`` with 1-based pointing ``j`` and depth bin
    ``t``. ``clipped`` flags a hemisphere reaching past the gridded footprint;
    ``volume_in_grid`` and ``hemisphere_volume`` let callers renormalise.
    """

    i: int
    k: int
    entries: tuple
    clipped: bool
    volume_in_grid: float
    hemisphere_volume: float
    voxel_volumes: dict = field(default_factory=dict, compare=False, repr=False)


def build_overlap_table(grid: Grid, i: int, k: int) -> OverlapTable:
    if not 1 <= k <= grid.n_eng:
        raise IndexError(f"energy index {k} outside 1..{grid.n_eng}")
    radius = grid.radii[k]
    depths = tuple(grid.depths[: k + 1])
    dx, dy, t, r = hemisphere_offsets(grid.omega, radius, depths, grid.n_side - 1)
    x, y = beam_xy(i, grid.n_data)
    xn, yn = x + dx, y + dy
    ok = (xn >= 1) & (xn <= grid.n_side) & (yn >= 1) & (yn <= grid.n_side)
    clipped = _reaches_outside(grid, x, y, radius)
    widths = grid.bin_widths
    entries = []
    vol = 0.0
    for xx, yy, tt, rr in zip(xn[ok], yn[ok], t[ok], r[ok]):
        j = beam_index(int(xx), int(yy), grid.n_data)
        entries.append(((j, int(tt) + 1), float(rr)))
        vol += rr * grid.omega**2 * widths[tt]
    return OverlapTable(i, k, tuple(entries), clipped, vol, 2.0 / 3.0 * math.pi * radius**3)


def _reaches_outside(grid: Grid, x: int, y: int, radius: float) -> bool:
    """True when the hemisphere's footprint disk leaves the gridded area."""
    cx, cy = (x - 0.5) * grid.omega, (y - 0.5) * grid.omega
    size = grid.n_side * grid.omega
    return cx - radius < 0 or cy - radius < 0 or cx + radius > size or cy + radius > size

"""Forward projection of a density field through the depth kernel.

Two layers live here. The ``project_model*`` functions evaluate a single
image cell directly and are meant to be read. :class:`Projector` assembles
the same operator once as a sparse table of
``(cell, voxel, kernel lag, geometric weight)`` entries, which the sampler
uses for fast full and incremental evaluation.

Indices in the public single-cell API are 1-based (pointing ``i``, energy
``k``); arrays are 0-based with shape ``(n_data, n_eng)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import (
    Grid,
    OverlapTable,
    ResolutionRegime,
    build_overlap_table,
    classify_regime,
    neighbour_weights,
)


class ProjectionError(ValueError):
    pass


def convolve(xi_column, kernel, t: int) -> float:
    """Depth convolution at bin ``t`` (1-based): sum_m xi[m] * kernel[t - m + 1]."""
    if not 1 <= t <= len(xi_column):
        raise IndexError(f"bin {t} outside 1..{len(xi_column)}")
    total = 0.0
    for m in range(1, t + 1):
        total += xi_column[m - 1] * kernel[t - m]
    return total


def project_model1(xi: np.ndarray, kernel, grid: Grid, i: int, k: int) -> float:
    """Nested ring/bin sum for an interaction volume inside a single column."""
    col = xi[i - 1]
    radii, h = grid.radii, grid.h
    total = 0.0
    for q in range(1, k + 1):
        ring = 0.5 * (radii[q] ** 2 - radii[q - 1] ** 2)
        inner = 0.0
        for t in range(1, q + 1):
            inner += (h[t] - h[t - 1]) * convolve(col, kernel, t)
        total += ring * inner
    return total / radii[k] ** 2


WeightFn = Callable[[Grid, int, int, int], list]


def project_model2(xi: np.ndarray, kernel, grid: Grid, k_in: int, i: int, k: int,
                   weights: WeightFn = neighbour_weights) -> float:
    """As :func:`project_model1` up to ``k_in``; above it each depth bin is
    replaced by the footprint-weighted average over neighbouring columns."""
    if k <= k_in:
        return project_model1(xi, kernel, grid, i, k)
    averaged = np.empty(grid.n_eng)
    for m in range(1, k + 1):
        averaged[m - 1] = sum(w * xi[j - 1, m - 1] for j, w in weights(grid, i, k, m))
    return project_model1(averaged[None, :], kernel, grid, 1, k)


def project_model3(xi: np.ndarray, kernel, grid: Grid, table: Optional[OverlapTable],
                   i: int, k: int, renormalize: bool = True) -> float:
    """Volume-fraction sum over voxels intersecting a wide interaction volume.

    Each voxel contributes its overlap volume ``r * omega^2 * dh_t`` times the
    convolved density at its depth bin, and the sum is divided by the
    footprint area ``pi * R^2``. This is the volume integral of the convolved
    density over the hemisphere per unit footprint area.
    """
    if table is None:
        raise ProjectionError("model 3 projection needs an overlap table")
    if (table.i, table.k) != (i, k):
        raise ProjectionError(f"overlap table is for cell {(table.i, table.k)}, not {(i, k)}")
    widths = grid.bin_widths
    total = 0.0
    for (j, t), r in table.entries:
        total += r * widths[t - 1] * convolve(xi[j - 1], kernel, t)
    scale = grid.omega**2 / (np.pi * grid.radii[k] ** 2)
    if renormalize and table.clipped and table.volume_in_grid > 0:
        scale *= table.hemisphere_volume / table.volume_in_grid
    return scale * total


def depth_weights(grid: Grid, k: int) -> np.ndarray:
    """Collapsed model-1 weights ``G[t]`` so that C = sum_t G[t] * conv(t)."""
    r2 = grid.radii**2
    t = np.arange(1, k + 1)
    return grid.bin_widths[:k] * (r2[k] - r2[t - 1]) / (2.0 * r2[k])


@dataclass
class Projector:
    """Sparse forward operator for one grid and regime.

    Row ``r = i * n_eng + k`` (0-based) gives image cell (i, k); column
    ``c = j * n_eng + m`` gives voxel (j, m). A row evaluates to
    ``sum(weight * kernel[lag] * xi_flat[col])`` over its entries.
    """

    grid: Grid
    regime: ResolutionRegime
    row_ptr: np.ndarray
    cols: np.ndarray
    lags: np.ndarray
    weights: np.ndarray
    col_ptr: np.ndarray
    col_rows: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.n_data, self.grid.n_eng

    @classmethod
    def build(cls, grid: Grid, regime: Optional[ResolutionRegime] = None) -> "Projector":
        regime = regime or classify_regime(grid)
        if regime.model == 2 and regime.k_in > grid.n_eng:
            raise ProjectionError("k_in exceeds the number of energies")
        n_eng = grid.n_eng
        rows: list[dict] = []
        for i in range(1, grid.n_data + 1):
            for k in range(1, n_eng + 1):
                rows.append(_cell_entries(grid, regime, i, k))
        row_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
        cols, lags, weights = [], [], []
        for r, entries in enumerate(rows):
            for (c, lag) in sorted(entries):
                cols.append(c)
                lags.append(lag)
                weights.append(entries[(c, lag)])
            row_ptr[r + 1] = len(cols)
        cols_a = np.asarray(cols, dtype=np.int64)
        row_of = np.repeat(np.arange(len(rows)), np.diff(row_ptr))
        col_ptr, col_rows = _column_index(cols_a, row_of, len(rows))
        return cls(grid, regime, row_ptr, cols_a, np.asarray(lags, dtype=np.int64),
                   np.asarray(weights, dtype=float), col_ptr, col_rows)

    def project(self, xi: np.ndarray, kernel) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != self.shape:
            raise ProjectionError(f"field shape {xi.shape} does not match grid {self.shape}")
        kernel = np.asarray(kernel, dtype=float)
        if kernel.shape != (self.grid.n_eng,):
            raise ProjectionError("kernel length must equal n_eng")
        from ._core import project_rows_all
        out = np.empty(xi.size)
        project_rows_all(self.row_ptr, self.cols, self.lags, self.weights, kernel, xi.ravel(), out)
        return out.reshape(self.shape)

    def affected_cells(self, j: int, m: int) -> np.ndarray:
        """0-based flat rows whose value depends on voxel (j, m), 0-based."""
        c = j * self.grid.n_eng + m
        return self.col_rows[self.col_ptr[c]:self.col_ptr[c + 1]]

    def update(self, proj: np.ndarray, xi: np.ndarray, kernel, j: int, m: int) -> None:
        """Refresh ``proj`` in place after voxel (j, m) (0-based) changed."""
        from ._core import project_row
        kernel = np.asarray(kernel, dtype=float)
        flat_xi = np.ascontiguousarray(xi, dtype=float).ravel()
        flat = proj.reshape(-1)
        for r in self.affected_cells(j, m):
            flat[r] = project_row(self.row_ptr, self.cols, self.lags, self.weights, kernel, flat_xi, r)

    def dense(self, kernel) -> np.ndarray:
        """Dense (n_cells, n_voxels) matrix for a given kernel."""
        kernel = np.asarray(kernel, dtype=float)
        n = self.grid.n_data * self.grid.n_eng
        mat = np.zeros((n, n))
        row_of = np.repeat(np.arange(n), np.diff(self.row_ptr))
        np.add.at(mat, (row_of, self.cols), self.weights * kernel[self.lags])
        return mat


def _cell_entries(grid: Grid, regime: ResolutionRegime, i: int, k: int) -> dict:
    n_eng = grid.n_eng
    entries: dict = {}

    def add(j, m, lag, w):
        key = ((j - 1) * n_eng + (m - 1), lag)
        entries[key] = entries.get(key, 0.0) + w

    if regime.model == 1 or (regime.model == 2 and k <= regime.k_in):
        g = depth_weights(grid, k)
        for t in range(1, k + 1):
            for m in range(1, t + 1):
                add(i, m, t - m, g[t - 1])
    elif regime.model == 2:
        g = depth_weights(grid, k)
        for m in range(1, k + 1):
            for j, w in neighbour_weights(grid, i, k, m):
                for t in range(m, k + 1):
                    add(j, m, t - m, g[t - 1] * w)
    else:
        table = build_overlap_table(grid, i, k)
        scale = grid.omega**2 / (np.pi * grid.radii[k] ** 2)
        if table.clipped and table.volume_in_grid > 0:
            scale *= table.hemisphere_volume / table.volume_in_grid
        widths = grid.bin_widths
        for (j, t), r in table.entries:
            for m in range(1, t + 1):
                add(j, m, t - m, scale * r * widths[t - 1])
    return entries


def _column_index(cols: np.ndarray, row_of: np.ndarray, n: int):
    pairs = np.unique(np.column_stack([cols, row_of]), axis=0)
    counts = np.bincount(pairs[:, 0], minlength=n)
    col_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return col_ptr, pairs[:, 1].astype(np.int64).copy()


def project_all(xi: np.ndarray, kernel, grid: Grid,
                regime: Optional[ResolutionRegime] = None) -> np.ndarray:
    """Full projection matrix, dispatching each cell to its regime model."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (grid.n_data, grid.n_eng):
        raise ProjectionError(f"field shape {xi.shape} does not match grid")
    regime = regime or classify_regime(grid)
    out = np.empty_like(xi)
    for i in range(1, grid.n_data + 1):
        for k in range(1, grid.n_eng + 1):
            if regime.model == 3:
                out[i - 1, k - 1] = project_model3(xi, kernel, grid, build_overlap_table(grid, i, k), i, k)
            elif regime.model == 2:
                out[i - 1, k - 1] = project_model2(xi, kernel, grid, regime.k_in, i, k)
            else:
                out[i - 1, k - 1] = project_model1(xi, kernel, grid, i, k)
    return out


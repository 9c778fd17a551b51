"""Synthetic density fields, kernels and noisy image stacks."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .forward import Projector
from .geometry import Grid, MaterialConstants, ResolutionRegime, classify_regime
from .stack import ImageStack

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class SimSpec:
    name: str
    grid: Grid
    material: Optional[MaterialConstants] = None
    sparse: bool = False
    eps_soft: float = 1.0
    b_multiplier: int = 3
    gamma: float = 0.2
    d_s: float = 0.4
    noise_fraction: float = 0.03
    seed: int = 0
    regime: Optional[ResolutionRegime] = None

    def __post_init__(self):
        if not self.eps_soft > 0:
            raise ValueError("eps_soft must be positive")
        if int(self.b_multiplier) < 1:
            raise ValueError("b_multiplier must be a positive integer")
        if not (self.gamma >= 0 and self.d_s > 0):
            raise ValueError("kernel needs gamma >= 0 and d_s > 0")
        if not 0 <= self.noise_fraction <= 0.1:
            raise ValueError("noise fraction must lie in [0, 0.1]")

    def resolved_regime(self) -> ResolutionRegime:
        return self.regime or classify_regime(self.grid)


def gen_true_density(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth blob per pointing, optionally scaled by a random integer level.

    In sparse mode the level ``int(n_eng * U)`` is 0 for a share of
    pointings, which zeroes their whole column.
    """
    grid = spec.grid
    n_data, n_eng = grid.n_data, grid.n_eng
    centres = grid.column_centres()
    depth = grid.h[1:]
    b_max = spec.b_multiplier * grid.omega
    out = np.empty((n_data, n_eng))
    for i in range(n_data):
        level = int(n_eng * rng.random()) if spec.sparse else 1
        amp = rng.random()
        b = 0.0
        while b == 0.0:
            b = rng.uniform(0.0, b_max)
        q = 1.0
        while q == 1.0:
            q = rng.random()
        x, y = centres[i]
        denom = spec.eps_soft**2 + (x * x + y * y) / b**2 + depth**2 / (b**2 * (1.0 - q * q))
        out[i] = level * amp / denom
    return out


def gen_true_kernel(spec: SimSpec, depths=None) -> np.ndarray:
    """Folded-Gaussian kernel sampled at the kernel depths (surface first)."""
    z = spec.grid.kernel_depths if depths is None else np.asarray(depths, dtype=float)
    g, d = spec.gamma, spec.d_s
    return np.exp(-((z - g) ** 2) / (2 * d * d)) + np.exp(-((z + g) ** 2) / (2 * d * d))


@dataclass
class SimulatedImages:
    stack: ImageStack
    projections: np.ndarray
    clamped: int


def gen_images(field_: np.ndarray, kernel: np.ndarray, grid: Grid,
               regime: Optional[ResolutionRegime], f: float,
               rng: np.random.Generator, projector: Optional[Projector] = None) -> SimulatedImages:
    """Project and add proportional Gaussian noise; negatives are clamped to 0."""
    projector = projector or Projector.build(grid, regime)
    proj = projector.project(field_, kernel)
    noisy = proj + rng.standard_normal(proj.shape) * (f * proj)
    clamped = int(np.count_nonzero(noisy < 0))
    noisy = np.maximum(noisy, 0.0)
    sigma = np.maximum(f * proj, SIGMA_FLOOR)
    stack = ImageStack(noisy, sigma, energies=grid.energies, meta={"clamped": clamped})
    return SimulatedImages(stack, proj, clamped)


@dataclass
class Simulation:
    spec: SimSpec
    density: np.ndarray
    kernel: np.ndarray
    images: SimulatedImages

    @property
    def eta_surface(self) -> float:
        return float(self.kernel[0])


def simulate(spec: SimSpec, seed: Optional[int] = None) -> Simulation:
    """Draw a density field and noisy images; fully determined by the seed."""
    rng = np.random.Generator(np.random.PCG64(spec.seed if seed is None else seed))
    density = gen_true_density(spec, rng)
    kernel = gen_true_kernel(spec)
    images = gen_images(density, kernel, spec.grid, spec.resolved_regime(), spec.noise_fraction, rng)
    return Simulation(spec, density, kernel, images)


CUW = MaterialConstants(atomic_number=51.5, atomic_weight=123.7, mass_density=14.1)
NIAL = MaterialConstants(atomic_number=20.5, atomic_weight=42.8, mass_density=5.8)
GOLD = MaterialConstants(atomic_number=79.0, atomic_weight=196.97, mass_density=19.3)


def preset_scenarios() -> dict:
    """Desk-scale presets keyed by name."""
    cuw_grid = Grid.from_material(CUW, 1.33, 5, [k + 2.0 for k in range(1, 6)])
    nial_grid = Grid.from_material(NIAL, 1.33, 5, [6.0, 8.0, 10.0, 12.0, 14.0])
    fine_grid = Grid.from_material(GOLD, 0.002, 5, [k + 1.5 for k in range(1, 4)])
    out = {}
    for sparse in (False, True):
        tag = "sparse" if sparse else "dense"
        # surface-peaked kernels whose width is about two thirds of the deepest bin
        out[f"cuw-{tag}-desk"] = SimSpec(f"cuw-{tag}-desk", cuw_grid, CUW, sparse=sparse,
                                         gamma=0.0, d_s=0.12)
        out[f"nial-{tag}-desk"] = SimSpec(f"nial-{tag}-desk", nial_grid, NIAL, sparse=sparse,
                                          gamma=0.0, d_s=0.7, regime=classify_regime(nial_grid))
        out[f"fine-{tag}-desk"] = SimSpec(f"fine-{tag}-desk", fine_grid, GOLD, sparse=sparse,
                                          gamma=0.0, d_s=0.045, b_multiplier=3)
    return out


def with_noise(spec: SimSpec, f: float) -> SimSpec:
    return replace(spec, noise_fraction=f)


# ---------------------------------------------------------------------------
# Toy study of the sparsity prior on a single pointing
# ---------------------------------------------------------------------------

TOY_GENERATORS = ("ratio", "power")


@dataclass
class ToyPriorSample:
    density: np.ndarray       # (n_eng,)
    neg_log_prior: np.ndarray
    p: float


def toy_prior_study(generator: str, rng: np.random.Generator, n_eng: int = 10) -> ToyPriorSample:
    """Density column from a toy generator and its sparsity-prior penalty.

    ``"ratio"`` draws ``u1**10 / u2`` per bin, ``"power"`` draws ``u**10`` (the
    sparser of the two). Depths follow ``eps**1.67`` with ``eps = k`` kV and
    the kernel is a decreasing quadratic in depth with 2% noise. The column
    is projected with the single-column model and ``p ~ U[0.6, 0.99]``.
    """
    from .sparsity import log_prior_xi, tau_matrix

    if generator == "ratio":
        density = rng.random(n_eng) ** 10 / (1.0 - rng.random(n_eng))
    elif generator == "power":
        density = rng.random(n_eng) ** 10
    else:
        raise ValueError(f"unknown toy generator {generator!r}; use one of {TOY_GENERATORS}")
    depths = np.arange(1, n_eng + 1, dtype=float) ** 1.67
    depths = depths / depths[-1]
    # wide enough that the largest interaction volume fits in one column
    grid = Grid(omega=2.0 * np.sqrt(np.pi), n_side=1, energies=tuple(range(1, n_eng + 1)),
                depths=(0.0, *depths))
    z = grid.kernel_depths
    kernel = np.clip(1.0 - 0.8 * z**2 + 0.02 * rng.standard_normal(n_eng), 0.05, None)
    kernel[0] = 1.0
    proj = Projector.build(grid, ResolutionRegime(1)).project(density[None, :], kernel)
    p = rng.uniform(0.6, 0.99)
    neg = -log_prior_xi(density, tau_matrix(proj)[0], p)
    return ToyPriorSample(density, neg, p)

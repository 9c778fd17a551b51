"""Bayesian inversion of multi-energy electron-microscopy image stacks."""

from .geometry import (
    Grid,
    MaterialConstants,
    ResolutionRegime,
    beam_index,
    beam_xy,
    build_overlap_table,
    classify_regime,
    kanaya_depth,
)
from .kernel import FreeKernel, ParametricKernel, eval_parametric, normalize_kernel, solve_eta0
from .forward import Projector, convolve, project_all, project_model1, project_model2, project_model3
from .stack import ImageStack, decompose_low_rank
from .posterior import NoiseModel, log_likelihood, log_posterior
from .config import RunConfig
from .sampler import Chain, hpd_interval, run_chain

__version__ = "0.1.0"

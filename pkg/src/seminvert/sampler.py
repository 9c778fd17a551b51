"""Adaptive Metropolis-within-Gibbs sampler over density, kernel and p.

One iteration sweeps every voxel with a folded-normal proposal, then updates
the sparsity hyperparameter, then the kernel block, then (free kernel only)
the kernel prior's hyperparameters. The sweep itself is compiled in
:mod:`seminvert._core`; this module owns setup, checkpointing and summaries.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _core
from .config import RunConfig, parse_regime
from .forward import Projector
from .geometry import Grid, ResolutionRegime, classify_regime
from .kernel import (
    folded_normal_logpdf,
    seed_kernel,
    seed_parameters,
    solve_free_prior_width,
)
from .stack import ImageStack

CHECKPOINT_VERSION = 1


class SamplerError(RuntimeError):
    pass


class SeedError(SamplerError):
    pass


# ---------------------------------------------------------------------------
# Seeding and single proposals
# ---------------------------------------------------------------------------

def seed_density(data: np.ndarray, grid: Grid, kernel_seed: np.ndarray) -> np.ndarray:
    """Starting density: each plane divided by the depth-integrated seed kernel."""
    phi = np.cumsum(np.asarray(kernel_seed) * grid.bin_widths)
    if np.any(phi <= 0):
        raise SeedError("depth-integrated seed kernel is zero for some energy")
    return np.maximum(np.asarray(data, dtype=float), 0.0) / phi


def propose_xi(current: float, rng: np.random.Generator, *, seed_value: float,
               history_sum: float = 0.0, history_sumsq: float = 0.0, history_count: int = 0,
               n: int = 0, n0: int = 10_000, floor: float = 0.0):
    """Draw one folded-normal density proposal.

    Returns ``(proposal, log q(current|proposal) - log q(proposal|current), sd)``.
    Before ``n0`` (or while the voxel's history has no spread) the sd is a
    fresh ``T ~ U(0, 1]`` times the seed value.
    """
    if current < 0:
        raise ValueError("density values are non-negative")
    sd = 0.0
    if n >= n0 and history_count >= 2:
        mean = history_sum / history_count
        var = (history_sumsq - history_count * mean * mean) / (history_count - 1)
        if var > 0:
            sd = math.sqrt(var)
    if sd == 0.0:
        sd = (1.0 - rng.random()) * max(seed_value, floor)
    x_new = abs(current + sd * rng.standard_normal())
    log_ratio = folded_normal_logpdf(current, x_new, sd) - folded_normal_logpdf(x_new, current, sd)
    return x_new, log_ratio, sd


def exponential_logpdf(x: float, rate: float) -> float:
    return math.log(rate) - rate * x if x >= 0 else -math.inf


def propose_kernel(kernel: np.ndarray, rates: np.ndarray, rng: np.random.Generator):
    """Independent exponential draws for every bin but the surface.

    Returns the proposed kernel and the log proposal-density ratio.
    """
    kernel = np.asarray(kernel, dtype=float)
    proposal = kernel.copy()
    log_ratio = 0.0
    for k in range(1, kernel.size):
        proposal[k] = rng.exponential(1.0 / rates[k])
        log_ratio += exponential_logpdf(kernel[k], rates[k]) - exponential_logpdf(proposal[k], rates[k])
    return proposal, log_ratio


def propose_parametric(q: float, eta0: float, rates, eta_surface: float, rng: np.random.Generator):
    """Exponential draws for (Q, eta0); ``None`` when 2Q does not exceed the surface value."""
    q_new = rng.exponential(1.0 / rates[0])
    e_new = rng.exponential(1.0 / rates[1])
    if 2.0 * q_new <= eta_surface or e_new <= 0:
        return None
    log_ratio = (exponential_logpdf(q, rates[0]) + exponential_logpdf(eta0, rates[1])
                 - exponential_logpdf(q_new, rates[0]) - exponential_logpdf(e_new, rates[1]))
    return q_new, e_new, log_ratio


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------

@dataclass
class History:
    xi: list = field(default_factory=list)
    kernel: list = field(default_factory=list)
    scalars: list = field(default_factory=list)
    components: list = field(default_factory=list)

    def arrays(self):
        def stack(parts, width):
            return np.concatenate(parts) if parts else np.empty((0, width))
        return stack(self.xi, 0), stack(self.kernel, 0), stack(self.scalars, _core.S_SIZE), stack(self.components, 4)


class Chain:
    """Mutable sampler state plus the fixed problem it samples.

    ``stack`` must already carry the data and noise that enter the
    likelihood (offsets removed if desired).
    """

    def __init__(self, grid: Grid, stack: ImageStack, config: RunConfig,
                 regime: Optional[ResolutionRegime] = None, projector: Optional[Projector] = None):
        if stack.data.shape != (grid.n_data, grid.n_eng):
            raise SamplerError(f"stack shape {stack.data.shape} does not match grid")
        if config.eta_surface is None:
            raise SamplerError("the measured surface kernel value (eta_surface) is required")
        self.grid = grid
        self.stack = stack
        self.config = config
        if regime is None:
            regime = parse_regime(config.regime) if config.regime else classify_regime(grid)
        self.regime = regime
        self.projector = projector or Projector.build(grid, regime)
        self.n_eng = grid.n_eng
        self.n_vox = grid.n_data * grid.n_eng
        self.z = grid.kernel_depths.astype(float)

        eta_s = float(config.eta_surface)
        self.kernel_seed = seed_kernel(self.z, eta_s, config.seed_location, config.seed_scale)
        self.seed_xi = seed_density(stack.data, grid, self.kernel_seed).ravel()
        positive = self.seed_xi[self.seed_xi > 0]
        floor = config.sd_floor_fraction * (positive.mean() if positive.size else 1.0)

        self.data = stack.data.ravel().copy()
        self.lognorm = -np.log(stack.sigma.ravel()) - _core.LOG_SQRT_2PI
        self.inv2var = 1.0 / (2.0 * stack.sigma.ravel() ** 2)

        q_seed, e_seed, s_seed = seed_parameters(eta_s, config.seed_location, config.seed_scale)
        eta0_max = config.eta0_max if config.eta0_max is not None else float(grid.h[-1])
        parametric = config.kernel_model == "parametric"
        prior = config.parametric_prior or {}
        self.cf = np.zeros(_core.CF_SIZE)
        self.cf[_core.CF_P_LO], self.cf[_core.CF_P_HI] = config.p_range
        self.cf[_core.CF_P_STEP] = config.p_step
        self.cf[_core.CF_Q_MAX] = config.q_max_factor * eta_s
        self.cf[_core.CF_ETA0_MAX] = eta0_max
        self.cf[_core.CF_Q_STEP] = config.q_step_factor * eta_s
        self.cf[_core.CF_ETA0_STEP] = config.eta0_step_fraction * eta0_max
        self.cf[_core.CF_ETA_SURFACE] = eta_s
        self.cf[_core.CF_SD_FLOOR] = floor
        self.cf[_core.CF_Q_MEAN] = prior.get("q_mean", q_seed)
        self.cf[_core.CF_Q_SD] = prior.get("q_sd", q_seed)
        self.cf[_core.CF_S_MEAN] = prior.get("s_mean", s_seed)
        self.cf[_core.CF_S_SD] = prior.get("s_sd", s_seed)
        self.cf[_core.CF_KERNEL_STEP] = config.kernel_step

        self.ci = np.zeros(_core.CI_SIZE, dtype=np.int64)
        self.ci[_core.CI_N0] = config.n0
        self.ci[_core.CI_THIN] = config.thin
        self.ci[_core.CI_HASTINGS] = int(config.hastings)
        self.ci[_core.CI_KERNEL_MODE] = int(parametric)
        self.ci[_core.CI_PER_BIN] = int(config.per_bin_kernel)
        self.ci[_core.CI_PRESERVE] = int(config.preserve_convolution)
        self.ci[_core.CI_N_ENG] = grid.n_eng
        self.ci[_core.CI_SAMPLE_KERNEL] = int(config.sample_kernel and grid.n_eng > 1)
        self.ci[_core.CI_SAMPLE_P] = int(config.sample_p)
        self.ci[_core.CI_KERNEL_RW] = int(config.kernel_proposal == "random_walk")

        if config.kernel_rates is not None:
            rates = np.asarray(config.kernel_rates, dtype=float)
        elif parametric:
            rates = np.array([1.0 / q_seed, 1.0 / e_seed])
        else:
            rates = 1.0 / self.kernel_seed
        if np.any(rates <= 0) or rates.size < (2 if parametric else self.n_eng):
            raise SamplerError("kernel proposal rates must be positive, one per parameter")
        self.rates = np.zeros(max(self.n_eng, 2))
        self.rates[:rates.size] = rates[: self.rates.size]

        # state
        self.xi = self.seed_xi.copy()
        self.kernel = self.kernel_seed.copy()
        self.scal = np.zeros(_core.S_SIZE)
        self.scal[_core.S_P] = 0.5 * sum(config.p_range)
        if parametric:
            self.scal[_core.S_Q], self.scal[_core.S_ETA0], self.scal[_core.S_WIDTH] = q_seed, e_seed, s_seed
        else:
            q0, e0 = 0.5 * eta_s, 0.0
            self.scal[_core.S_Q], self.scal[_core.S_ETA0] = q0, e0
            self.scal[_core.S_WIDTH] = solve_free_prior_width(q0, e0, eta_s)
        self.sum1 = np.zeros(self.n_vox)
        self.sum2 = np.zeros(self.n_vox)
        self.counters = np.zeros(_core.K_SIZE, dtype=np.int64)
        self.n = 0
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.history = History()
        self._refresh()
        if not math.isfinite(self.log_posterior()):
            raise SamplerError("log posterior is not finite at the seed state")

    # -- derived quantities -------------------------------------------------

    def _refresh(self) -> None:
        self.proj = np.empty(self.n_vox)
        _core.project_rows_all(self.projector.row_ptr, self.projector.cols, self.projector.lags,
                               self.projector.weights, self.kernel, self.xi, self.proj)
        self.ll = np.empty(self.n_vox)
        self.lp = np.empty(self.n_vox)
        _core.refresh_terms(self.xi, self.proj, self.data, self.lognorm, self.inv2var,
                            self.scal[_core.S_P], self.n_eng, self.ll, self.lp)

    def components(self) -> dict:
        kp = _core.kernel_logprior(self.kernel, self.z, self.ci[_core.CI_KERNEL_MODE],
                                   self.scal[_core.S_Q], self.scal[_core.S_ETA0],
                                   self.scal[_core.S_WIDTH], self.cf)
        return {
            "log_likelihood": float(self.ll.sum()),
            "log_prior_density": float(self.lp.sum()),
            "log_prior_kernel": float(kp),
            "log_prior_hyper": 0.0,
        }

    def log_posterior(self) -> float:
        return float(sum(self.components().values()))

    def check_incremental(self) -> float:
        """Largest absolute gap between cached and freshly recomputed projections."""
        fresh = self.projector.project(self.xi.reshape(self.grid.n_data, self.n_eng), self.kernel)
        return float(np.max(np.abs(fresh.ravel() - self.proj)))

    def verify_cached_terms(self) -> float:
        """Recompute projections and per-cell terms; raise if the cached copies drifted."""
        proj, ll, lp = self.proj, self.ll, self.lp
        self._refresh()
        gap = 0.0
        for cached, fresh in ((proj, self.proj), (ll, self.ll), (lp, self.lp)):
            scale = max(1.0, float(np.max(np.abs(fresh))))
            gap = max(gap, float(np.max(np.abs(cached - fresh))) / scale)
        self.max_verified_gap = max(getattr(self, "max_verified_gap", 0.0), gap)
        if gap > self.config.verify_tolerance:
            raise SamplerError(f"incremental state drifted from full evaluation by {gap:.3g} at step {self.n}")
        return gap

    # -- running --------------------------------------------------------------

    @property
    def uniforms_per_iteration(self) -> int:
        return _core.uniforms_per_iteration(self.n_vox, self.n_eng)

    def run(self, n_iter: int, checkpoint_path=None) -> None:
        """Advance ``n_iter`` iterations."""
        cfg = self.config
        done = 0
        while done < n_iter:
            size = min(cfg.chunk, n_iter - done)
            for every in (cfg.checkpoint_every, cfg.verify_every):
                if every:
                    size = min(size, every - self.n % every)
            uniforms = self.rng.random((size, self.uniforms_per_iteration))
            n_rec = size // cfg.thin + 1
            rec_xi = np.empty((n_rec, self.n_vox))
            rec_kernel = np.empty((n_rec, self.n_eng))
            rec_scal = np.empty((n_rec, _core.S_SIZE))
            rec_comp = np.empty((n_rec, 4))
            self.counters[_core.K_RECORDED] = 0
            p = self.projector
            _core.run_chunk(uniforms, self.n, p.row_ptr, p.cols, p.lags, p.weights, p.col_ptr, p.col_rows,
                            self.data, self.lognorm, self.inv2var,
                            self.xi, self.kernel, self.proj, self.ll, self.lp, self.scal,
                            self.ci, self.cf, self.seed_xi, self.rates, self.z,
                            self.sum1, self.sum2, self.counters,
                            rec_xi, rec_kernel, rec_scal, rec_comp)
            got = int(self.counters[_core.K_RECORDED])
            if got:
                self.history.xi.append(rec_xi[:got])
                self.history.kernel.append(rec_kernel[:got])
                self.history.scalars.append(rec_scal[:got])
                self.history.components.append(rec_comp[:got])
            self.n += size
            done += size
            if cfg.verify_every and self.n % cfg.verify_every == 0:
                self.verify_cached_terms()
            if checkpoint_path is not None and cfg.checkpoint_every and self.n % cfg.checkpoint_every == 0:
                self.save(checkpoint_path)

    def step(self) -> None:
        """One full Metropolis-within-Gibbs iteration."""
        self.run(1)

    # -- acceptance -------------------------------------------------------------

    def acceptance(self) -> dict:
        c = self.counters

        def rate(acc, prop):
            return float(c[acc] / c[prop]) if c[prop] else float("nan")

        return {
            "density": rate(_core.K_XI_ACC, _core.K_XI_PROP),
            "p": rate(_core.K_P_ACC, _core.K_P_PROP),
            "kernel": rate(_core.K_KERNEL_ACC, _core.K_KERNEL_PROP),
            "kernel_hyper": rate(_core.K_HYPER_ACC, _core.K_HYPER_PROP),
            "kernel_infeasible": int(c[_core.K_KERNEL_INFEASIBLE]),
            "kernel_negative_density": int(c[_core.K_KERNEL_NEGATIVE]),
        }

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        xi_h, k_h, s_h, c_h = self.history.arrays()
        return {
            "version": np.array(CHECKPOINT_VERSION),
            "config": np.array(json.dumps(self.config.to_dict())),
            "regime": np.array(json.dumps([self.regime.model, self.regime.k_in])),
            "n": np.array(self.n),
            "xi": self.xi, "kernel": self.kernel, "scalars": self.scal,
            "sum1": self.sum1, "sum2": self.sum2, "counters": self.counters,
            "rng": np.array(json.dumps(self.rng.bit_generator.state)),
            "hist_xi": xi_h.reshape(-1, self.n_vox), "hist_kernel": k_h.reshape(-1, self.n_eng),
            "hist_scalars": s_h, "hist_components": c_h,
        }

    def save(self, path) -> None:
        atomic_savez(path, **self.state_dict())

    def load_state(self, path) -> None:
        with np.load(path, allow_pickle=False) as f:
            version = int(f["version"])
            if version != CHECKPOINT_VERSION:
                raise SamplerError(f"checkpoint version {version} is not supported")
            xi = f["xi"]
            if xi.shape != (self.n_vox,):
                raise SamplerError("checkpoint does not match this problem's size")
            self.xi = xi.astype(float).copy()
            self.kernel = f["kernel"].astype(float).copy()
            self.scal = f["scalars"].astype(float).copy()
            self.sum1 = f["sum1"].copy()
            self.sum2 = f["sum2"].copy()
            self.counters = f["counters"].astype(np.int64).copy()
            self.n = int(f["n"])
            self.rng.bit_generator.state = json.loads(str(f["rng"]))
            self.history = History()
            if f["hist_xi"].shape[0]:
                self.history.xi.append(f["hist_xi"].copy())
                self.history.kernel.append(f["hist_kernel"].copy())
                self.history.scalars.append(f["hist_scalars"].copy())
                self.history.components.append(f["hist_components"].copy())
        self._refresh()

    # -- summaries ------------------------------------------------------------

    def samples(self, burn_in: Optional[int] = None):
        """Recorded post-burn-in samples as a dict of arrays."""
        burn = self.config.burn_in if burn_in is None else burn_in
        xi_h, k_h, s_h, c_h = self.history.arrays()
        keep = c_h[:, 0] > burn if c_h.size else np.zeros(0, dtype=bool)
        return {
            "step": c_h[keep, 0].astype(np.int64) if c_h.size else np.zeros(0, np.int64),
            "xi": xi_h.reshape(-1, self.n_vox)[keep].reshape(-1, self.grid.n_data, self.n_eng),
            "kernel": k_h.reshape(-1, self.n_eng)[keep],
            "p": s_h[keep, _core.S_P] if s_h.size else np.zeros(0),
            "components": c_h[keep, 1:] if c_h.size else np.zeros((0, 3)),
        }

    def projected_samples(self, burn_in: Optional[int] = None) -> np.ndarray:
        s = self.samples(burn_in)
        return np.stack([self.projector.project(x, k) for x, k in zip(s["xi"], s["kernel"])]) \
            if len(s["step"]) else np.zeros((0, self.grid.n_data, self.n_eng))


def atomic_savez(path, **arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resume_chain(path, grid: Grid, stack: ImageStack, config: Optional[RunConfig] = None) -> Chain:
    """Rebuild a chain from a checkpoint; ``config`` may extend ``n_max``."""
    with np.load(path, allow_pickle=False) as f:
        saved = RunConfig.from_dict(json.loads(str(f["config"])))
        model, k_in = json.loads(str(f["regime"]))
    chain = Chain(grid, stack, config or saved, ResolutionRegime(model, k_in))
    chain.load_state(path)
    return chain


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def hpd_interval(samples, mass: float = 0.95, lower_bound: Optional[float] = None) -> tuple[float, float]:
    """Narrowest window holding ``ceil(mass * n)`` of the sorted samples.

    With ``lower_bound`` set (the edge of the parameter's support), a window
    that starts at the smallest sample is extended down to the bound: the
    density is then highest at the edge, which no finite sample reaches.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("cannot compute an HPD interval from no samples")
    if not 0 < mass < 1:
        raise ValueError("mass must lie in (0, 1)")
    m = min(max(int(math.ceil(mass * n)), 1), n)
    widths = x[m - 1:] - x[: n - m + 1]
    j = int(np.argmin(widths))
    lo = float(x[j])
    if lower_bound is not None and j == 0 and widths[0] > 0:
        lo = min(lo, float(lower_bound))
    return lo, float(x[j + m - 1])


@dataclass
class ParameterSummary:
    name: str
    median: float
    lower: float
    upper: float


@dataclass
class PosteriorSummary:
    parameters: list
    acceptance: dict
    log_posterior: np.ndarray
    n_samples: int

    def by_name(self) -> dict:
        return {p.name: p for p in self.parameters}


def summarize_samples(named: dict, mass: float = 0.95, lower_bounds: Optional[dict] = None) -> list:
    """Median and HPD bounds for each ``name -> 1-D samples`` entry.

    ``lower_bounds`` maps names to the lower edge of their support (see
    :func:`hpd_interval`). The median is clamped into the HPD window, which
    can exclude it for strongly skewed samples.
    """
    lower_bounds = lower_bounds or {}
    out = []
    for name, values in named.items():
        values = np.asarray(values, dtype=float)
        lo, hi = hpd_interval(values, mass, lower_bounds.get(name))
        med = float(np.median(values))
        out.append(ParameterSummary(name, min(max(med, lo), hi), lo, hi))
    return out


def support_bounds(names, p_range=(0.6, 0.99)) -> dict:
    """Lower support edges: 0 for densities and kernel values, the prior floor for p."""
    return {n: (p_range[0] if n == "p" else 0.0) for n in names}


def parameter_columns(xi: np.ndarray, kernel: np.ndarray, p: np.ndarray) -> dict:
    """Flatten per-sample arrays into named columns (1-based labels)."""
    cols = {"p": p}
    for k in range(kernel.shape[1]):
        cols[f"kernel_{k + 1}"] = kernel[:, k]
    n_data, n_eng = xi.shape[1:]
    for i in range(n_data):
        for k in range(n_eng):
            cols[f"xi_{i + 1}_{k + 1}"] = xi[:, i, k]
    return cols


def summarize_chain(chain: Chain, mass: Optional[float] = None) -> PosteriorSummary:
    from .kernel import normalize_kernel
    s = chain.samples()
    if len(s["step"]) == 0:
        raise SamplerError("no recorded samples after burn-in; increase n_max or lower burn_in")
    kernel = normalize_kernel(s["kernel"], chain.config.eta_surface)
    cols = parameter_columns(s["xi"], kernel, s["p"])
    params = summarize_samples(cols, chain.config.hpd_mass if mass is None else mass,
                               support_bounds(cols, chain.config.p_range))
    return PosteriorSummary(params, chain.acceptance(), s["components"].sum(axis=1), len(s["step"]))


def run_chain(config: RunConfig, stack: ImageStack, grid: Grid,
              regime: Optional[ResolutionRegime] = None) -> tuple[Chain, PosteriorSummary]:
    chain = Chain(grid, stack, config, regime)
    chain.run(config.n_max)
    return chain, summarize_chain(chain)

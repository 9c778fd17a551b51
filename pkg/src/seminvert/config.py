"""Run configuration with validation and JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .geometry import ResolutionRegime


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    kernel_model: str = "free"              # "free" | "parametric"
    eta_surface: Optional[float] = None     # measured surface kernel value
    noise_fraction: float = 0.05
    noise_floor: float = 1e-6
    decompose: bool = True

    n_max: int = 900_000
    burn_in: int = 100_000
    n0: int = 10_000
    thin: int = 100
    seed: int = 0
    chunk: int = 1000
    checkpoint_every: int = 0
    verify_every: int = 0                   # compare cached terms with a full recompute
    verify_tolerance: float = 1e-9          # relative

    p_range: tuple = (0.6, 0.99)
    p_step: float = 0.02
    sample_p: bool = True
    sample_kernel: bool = True

    kernel_proposal: str = "exponential"    # "exponential" | "random_walk"
    kernel_rates: Optional[list] = None     # exponential proposal rates; default 1/seed
    kernel_step: float = 0.02               # random-walk sd, fraction of 1/rate
    per_bin_kernel: bool = False
    preserve_convolution: bool = True
    hastings: bool = True
    sd_floor_fraction: float = 0.01

    q_max_factor: float = 10.0              # free-kernel Q upper bound, times eta_surface
    eta0_max: Optional[float] = None        # default: deepest depth level
    q_step_factor: float = 0.1              # Q random-walk half-width, times eta_surface
    eta0_step_fraction: float = 0.05        # eta0 random-walk half-width, times eta0_max

    parametric_prior: Optional[dict] = None  # q_mean, q_sd, s_mean, s_sd
    seed_location: float = 5.0
    seed_scale: float = 5.0

    regime: Optional[str] = None            # "model1", "model2:<k_in>", "model3"
    hpd_mass: float = 0.95
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p_range = tuple(self.p_range)
        self.validate()

    def validate(self) -> None:
        if self.kernel_model not in ("free", "parametric"):
            raise ConfigError(f"kernel_model must be 'free' or 'parametric', got {self.kernel_model!r}")
        if self.kernel_proposal not in ("exponential", "random_walk"):
            raise ConfigError("kernel_proposal must be 'exponential' or 'random_walk'")
        if not self.kernel_step > 0:
            raise ConfigError("kernel_step must be positive")
        for name in ("n_max", "thin", "chunk"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if int(self.verify_every) < 0 or int(self.checkpoint_every) < 0:
            raise ConfigError("verify_every and checkpoint_every must be >= 0")
        if not 0 <= self.burn_in < self.n_max:
            raise ConfigError(f"burn_in ({self.burn_in}) must be below n_max ({self.n_max})")
        if not 0 <= self.n0 < self.n_max:
            raise ConfigError(f"n0 ({self.n0}) must be below n_max ({self.n_max})")
        lo, hi = self.p_range
        if not 0 < lo < hi < 1:
            raise ConfigError("p_range must satisfy 0 < lo < hi < 1")
        if not 0 < self.noise_fraction <= 0.1:
            raise ConfigError("noise_fraction must lie in (0, 0.1]")
        if self.eta_surface is not None and not self.eta_surface > 0:
            raise ConfigError("eta_surface must be positive")
        if not 0 < self.hpd_mass < 1:
            raise ConfigError("hpd_mass must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.regime is not None:
            parse_regime(self.regime)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["p_range"] = list(self.p_range)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)


def parse_regime(text: str) -> ResolutionRegime:
    t = text.strip().lower()
    if t in ("model1", "1"):
        return ResolutionRegime(1)
    if t in ("model3", "3"):
        return ResolutionRegime(3)
    if t.startswith("model2:"):
        try:
            return ResolutionRegime(2, int(t.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad regime {text!r}") from exc
    raise ConfigError(f"regime must be model1, model2:<k_in> or model3, got {text!r}")

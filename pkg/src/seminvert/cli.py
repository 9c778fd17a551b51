"""Command-line entry point: simulate, project, invert, summarize, diagnose.

Exit codes: 0 success, 1 usage error, 2 invalid input data or config,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, parse_regime
from .forward import Projector
from .geometry import GridError, classify_regime
from .io import (
    DataError,
    atomic_write_json,
    atomic_write_text,
    load_stack,
    read_field,
    read_kernel,
    read_trace,
    write_stack,
    write_summary,
    write_trace,
    write_truth,
)
from .posterior import NoiseModel
from .sampler import (
    Chain,
    SamplerError,
    resume_chain,
    summarize_chain,
    summarize_samples,
    support_bounds,
)
from .simulator import preset_scenarios, simulate, with_noise
from .stack import StackError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
THREADS_ENV = "SEMINVERT_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seminvert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic stack and its ground truth")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, help="noise fraction (default: the preset's)")

    p = sub.add_parser("project", help="evaluate the forward model for a field and kernel")
    p.add_argument("--data", required=True, help="manifest supplying the grid")
    p.add_argument("--field", required=True, help="CSV, one row per pointing, one column per energy")
    p.add_argument("--kernel", required=True, help="CSV with one value per energy, surface first")
    p.add_argument("--out", required=True)
    p.add_argument("--regime", help="model1, model2:<k_in> or model3 (default: classify)")

    p = sub.add_parser("invert", help="sample the posterior for a stack")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("summarize", help="median and HPD bounds from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--mass", type=float, default=0.95)

    p = sub.add_parser("diagnose", help="compare middle and final chain segments")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.2)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    presets = preset_scenarios()
    if args.preset not in presets:
        raise UsageError(f"unknown preset {args.preset!r}; available: {', '.join(sorted(presets))}")
    if args.seed < 0:
        raise UsageError("--seed must be non-negative")
    spec = presets[args.preset]
    if args.noise is not None:
        spec = with_noise(spec, args.noise)
    sim = simulate(spec, args.seed)
    out = Path(args.out)
    regime = spec.resolved_regime()
    write_stack(out, spec.grid, sim.images.stack.data, eta_surface=sim.eta_surface,
                material=spec.material,
                extra={"regime": _regime_text(regime), "preset": spec.name,
                       "offset_free": True, "clamped": sim.images.clamped})
    write_truth(out / "truth.json", sim.density, sim.kernel, sim.images.projections, {
        "sigma": sim.images.stack.sigma.tolist(),
        "clamped": sim.images.clamped,
        "preset": spec.name,
        "seed": args.seed,
        "noise_fraction": spec.noise_fraction,
        "sparse": spec.sparse,
        "gamma": spec.gamma,
        "d_s": spec.d_s,
    })
    print(f"wrote {spec.name} (seed {args.seed}, {_regime_text(regime)}) to {out}")
    return EXIT_OK


def cmd_project(args) -> int:
    loaded = load_stack(args.data, decompose=False)
    grid = loaded.grid
    regime = parse_regime(args.regime) if args.regime else _manifest_regime(loaded.manifest, grid)
    field = read_field(args.field, grid.n_data, grid.n_eng)
    kernel = read_kernel(args.kernel, grid.n_eng)
    proj = Projector.build(grid, regime).project(field, kernel)
    write_stack(args.out, grid, proj, extra={"regime": _regime_text(regime)})
    print(f"projected {grid.n_data}x{grid.n_eng} field to {args.out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    config = RunConfig.load(args.config)
    noise = NoiseModel(config.noise_fraction, config.noise_floor)
    loaded = load_stack(args.data, decompose=config.decompose, noise=noise)
    if config.eta_surface is None:
        if loaded.eta_surface is None:
            raise ConfigError("no surface kernel value: set eta_surface in the config or manifest")
        config.eta_surface = loaded.eta_surface
    grid = loaded.grid
    if config.regime is None and loaded.manifest.get("regime"):
        config.regime = loaded.manifest["regime"]
    out = Path(args.out)
    ckpt = out / "checkpoint.npz"
    if args.resume:
        chain = resume_chain(args.resume, grid, loaded.stack, config)
    else:
        chain = Chain(grid, loaded.stack, config)
    remaining = config.n_max - chain.n
    if remaining < 0:
        raise ConfigError(f"checkpoint is at step {chain.n}, beyond n_max={config.n_max}")
    chain.run(remaining, checkpoint_path=ckpt)
    chain.save(ckpt)

    xi_h, k_h, s_h, c_h = chain.history.arrays()
    n = c_h.shape[0]
    write_trace(out / "trace.csv", c_h[:, 0], c_h[:, 1:], s_h,
                k_h.reshape(n, grid.n_eng), xi_h.reshape(n, grid.n_data, grid.n_eng))
    summary = summarize_chain(chain)
    write_summary(out / "summary.csv", summary.parameters)
    clamped = int(loaded.manifest.get("clamped", 0))
    acc = chain.acceptance()
    warnings = []
    if acc["kernel_infeasible"]:
        warnings.append(f"{acc['kernel_infeasible']} kernel proposals were infeasible")
    if acc["kernel_negative_density"]:
        warnings.append(f"{acc['kernel_negative_density']} kernel proposals implied negative density")
    atomic_write_json(out / "report.json", {
        "iterations": chain.n,
        "samples_after_burn_in": summary.n_samples,
        "regime": _regime_text(chain.regime),
        "kernel_model": config.kernel_model,
        "acceptance": acc,
        "clamped_pixels": clamped,
        "offsets_removed": loaded.stack.offsets.tolist(),
        "units": loaded.manifest.get("units", "model"),
        "final_log_posterior": chain.components(),
        "warnings": warnings,
        "config": config.to_dict(),
    })
    print(f"{chain.n} iterations, {summary.n_samples} samples kept; outputs in {out}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    trace = read_trace(args.trace)
    keep = trace.column("step") > args.burn_in
    if not keep.any():
        raise DataError(f"{args.trace}: no samples after burn-in {args.burn_in}")
    names = trace.parameter_names()
    cols = {n: trace.column(n)[keep] for n in names}
    params = summarize_samples(cols, args.mass, support_bounds(names))
    write_summary(args.out, params)
    print(f"summarised {int(keep.sum())} samples of {len(names)} parameters to {args.out}")
    return EXIT_OK


def segment_distance(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    """Total-variation distance between two samples' histograms on shared bins."""
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    pa, _ = np.histogram(a, edges)
    pb, _ = np.histogram(b, edges)
    return 0.5 * float(np.abs(pa / a.size - pb / b.size).sum())


def cmd_diagnose(args) -> int:
    trace = read_trace(args.trace)
    keep = trace.column("step") > args.burn_in
    n = int(keep.sum())
    if n < 6:
        raise DataError(f"{args.trace}: need at least 6 samples after burn-in, found {n}")
    third = n // 3
    rows = ["parameter,mean_middle,mean_end,tv_distance,flag"]
    worst = 0.0
    running = {}
    for name in trace.parameter_names():
        x = trace.column(name)[keep]
        mid, end = x[third:2 * third], x[n - third:]
        d = segment_distance(mid, end, args.bins)
        worst = max(worst, d)
        flag = "ok" if d <= args.threshold else "differs"
        rows.append(f"{name},{float(mid.mean())!r},{float(end.mean())!r},{d!r},{flag}")
        running[name] = np.cumsum(x) / np.arange(1, n + 1)
    out = Path(args.out)
    atomic_write_text(out / "segments.csv", "\n".join(rows) + "\n")
    steps = trace.column("step")[keep].astype(int)
    names = list(running)
    lines = [",".join(["step", *names])]
    for j in range(n):
        lines.append(",".join([str(steps[j]), *(repr(float(running[k][j])) for k in names)]))
    atomic_write_text(out / "running_means.csv", "\n".join(lines) + "\n")
    atomic_write_json(out / "diagnose.json", {"samples": n, "max_tv_distance": worst,
                                              "threshold": args.threshold,
                                              "converged": worst <= args.threshold})
    print(f"max segment distance {worst:.3f} (threshold {args.threshold})")
    return EXIT_OK


def _regime_text(regime) -> str:
    return {1: "model1", 3: "model3"}.get(regime.model, f"model2:{regime.k_in}")


def _manifest_regime(manifest: dict, grid):
    return parse_regime(manifest["regime"]) if manifest.get("regime") else classify_regime(grid)


COMMANDS = {
    "simulate": cmd_simulate,
    "project": cmd_project,
    "invert": cmd_invert,
    "summarize": cmd_summarize,
    "diagnose": cmd_diagnose,
}


def _configure_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if value:
        import numba
        numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_threads()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, StackError, GridError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SamplerError, OSError, ValueError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

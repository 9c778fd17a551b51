"""File formats: stack manifests, CSV planes, traces and summaries.

A stack lives in a directory holding ``manifest.json`` plus one CSV file per
energy. Each plane file starts with a ``# n_side=<n> energy=<kV>`` header
followed by ``n_side`` rows of ``n_side`` comma-separated values; row ``r``
is the y bin and column ``c`` the x bin, so pointing ``i = r * n_side + c + 1``.

Every write goes to a temporary file in the target directory and is moved
into place with :func:`os.replace`.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import Grid, GridError, MaterialConstants
from .posterior import NoiseModel
from .stack import ImageStack, StackError, decompose_low_rank

MANIFEST_FORMAT = "seminvert-stack"
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Input files are missing, malformed or inconsistent."""


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# planes
# ---------------------------------------------------------------------------

def format_plane(values: np.ndarray, n_side: int, energy: float) -> str:
    grid = np.asarray(values, dtype=float).reshape(n_side, n_side)
    lines = [f"# n_side={n_side} energy={_fmt(energy)}"]
    lines += [",".join(_fmt(v) for v in row) for row in grid]
    return "\n".join(lines) + "\n"


def parse_plane(text: str, source: str, n_side: int, energy: Optional[float] = None) -> np.ndarray:
    """Parse one plane file into a flat array of ``n_side**2`` pointings."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{source}:1: missing '# n_side=.. energy=..' header")
    header = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    try:
        hdr_n = int(header["n_side"])
        hdr_e = float(header["energy"])
    except (KeyError, ValueError):
        raise DataError(f"{source}:1: header must declare n_side and energy") from None
    if hdr_n != n_side:
        raise DataError(f"{source}:1: header n_side={hdr_n} but the manifest says {n_side}")
    if energy is not None and not math.isclose(hdr_e, energy, rel_tol=1e-12, abs_tol=1e-12):
        raise DataError(f"{source}:1: header energy {hdr_e} differs from manifest energy {energy}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_side:
            raise DataError(f"{source}:{lineno}: expected {n_side} cells, found {len(cells)}")
        try:
            row = [float(c) for c in cells]
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise DataError(f"{source}:{lineno}: non-numeric cell {bad.strip()!r}") from None
        if not all(math.isfinite(v) for v in row):
            raise DataError(f"{source}:{lineno}: non-finite value")
        rows.append(row)
    if len(rows) != n_side:
        raise DataError(f"{source}: expected {n_side} rows, found {len(rows)}")
    return np.asarray(rows).ravel()


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class LoadedStack:
    stack: ImageStack
    grid: Grid
    manifest: dict
    eta_surface: Optional[float]
    raw: ImageStack


def grid_from_manifest(man: dict, source: str = "manifest") -> Grid:
    try:
        n_side = int(man["n_side"])
        omega = float(man["omega"])
        energies = [float(p["energy"]) for p in man["planes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{source}: missing or malformed field ({exc})") from None
    if any(b <= a for a, b in zip(energies, energies[1:])):
        raise DataError(f"{source}: plane energies must be strictly increasing, got {energies}")
    try:
        if man.get("depths") is not None:
            depths = [float(h) for h in man["depths"]]
            if len(depths) != len(energies):
                raise DataError(f"{source}: need one depth per energy")
            return Grid(omega, n_side, tuple(energies), (0.0, *depths))
        mat = man.get("material")
        if mat is None:
            raise DataError(f"{source}: provide either 'depths' or 'material'")
        material = MaterialConstants(float(mat["atomic_number"]), float(mat["atomic_weight"]),
                                     float(mat["mass_density"]))
        return Grid.from_material(material, omega, n_side, energies)
    except GridError as exc:
        raise DataError(f"{source}: {exc}") from None


def load_stack(path, decompose: bool = True, noise: Optional[NoiseModel] = None) -> LoadedStack:
    """Read and validate a manifest and its planes.

    Noise sd comes from per-plane ``sigma`` files when the manifest lists
    them, otherwise from ``noise`` (default 5% of the signal) applied to the
    data that enters the likelihood, i.e. after offset removal. Manifests
    marked ``offset_free`` (simulated stacks) are never decomposed.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if man.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    grid = grid_from_manifest(man, str(path))
    noise = noise or NoiseModel()
    planes, sigmas = [], []
    for entry in man["planes"]:
        plane_path = path.parent / entry["file"]
        if not plane_path.is_file():
            raise DataError(f"{plane_path}: plane file not found")
        planes.append(parse_plane(plane_path.read_text(), str(plane_path), grid.n_side, float(entry["energy"])))
        if entry.get("sigma_file"):
            sp = path.parent / entry["sigma_file"]
            if not sp.is_file():
                raise DataError(f"{sp}: noise file not found")
            sigmas.append(parse_plane(sp.read_text(), str(sp), grid.n_side, float(entry["energy"])))
    data = np.column_stack(planes)
    if sigmas and len(sigmas) != len(planes):
        raise DataError(f"{path}: either every plane or none must list a sigma_file")
    try:
        raw = ImageStack(data, np.column_stack(sigmas) if sigmas else noise.sigma(data),
                         energies=grid.energies)
        stack = raw
        if decompose and not man.get("offset_free", False):
            stack, _ = decompose_low_rank(raw, None if sigmas else noise)
    except StackError as exc:
        raise DataError(f"{path}: {exc}") from None
    eta_s = man.get("eta_surface")
    return LoadedStack(stack, grid, man, None if eta_s is None else float(eta_s), raw)


def write_stack(directory, grid: Grid, data: np.ndarray, *, eta_surface: Optional[float] = None,
                material: Optional[MaterialConstants] = None, sigma: Optional[np.ndarray] = None,
                units: str = "model", extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    planes = []
    for k, energy in enumerate(grid.energies):
        name = f"plane_{k + 1:02d}.csv"
        atomic_write_text(directory / name, format_plane(data[:, k], grid.n_side, energy))
        entry = {"energy": energy, "file": name}
        if sigma is not None:
            sname = f"sigma_{k + 1:02d}.csv"
            atomic_write_text(directory / sname, format_plane(sigma[:, k], grid.n_side, energy))
            entry["sigma_file"] = sname
        planes.append(entry)
    man = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "n_side": grid.n_side,
        "omega": grid.omega,
        "units": units,
        "depths": list(grid.depths[1:]),
        "planes": planes,
    }
    if material is not None:
        man["material"] = {"atomic_number": material.atomic_number,
                           "atomic_weight": material.atomic_weight,
                           "mass_density": material.mass_density}
    if eta_surface is not None:
        man["eta_surface"] = eta_surface
    if extra:
        man.update(extra)
    atomic_write_json(directory / "manifest.json", man)
    return directory / "manifest.json"


# ---------------------------------------------------------------------------
# fields and kernels
# ---------------------------------------------------------------------------

def format_field(field: np.ndarray) -> str:
    field = np.asarray(field, dtype=float)
    lines = [f"# n_data={field.shape[0]} n_eng={field.shape[1]}"]
    lines += [",".join(_fmt(v) for v in row) for row in field]
    return "\n".join(lines) + "\n"


def read_field(path, n_data: int, n_eng: int) -> np.ndarray:
    rows = _read_numeric_rows(path)
    arr = np.asarray(rows, dtype=float) if rows else np.empty((0, 0))
    if arr.shape != (n_data, n_eng):
        raise DataError(f"{path}: expected a {n_data}x{n_eng} field, found shape {arr.shape}")
    if np.any(arr < 0):
        raise DataError(f"{path}: density values must be non-negative")
    return arr


def read_kernel(path, n_eng: int) -> np.ndarray:
    rows = _read_numeric_rows(path)
    values = np.asarray([v for row in rows for v in row], dtype=float)
    if values.shape != (n_eng,):
        raise DataError(f"{path}: expected {n_eng} kernel values, found {values.size}")
    if np.any(values < 0):
        raise DataError(f"{path}: kernel values must be non-negative")
    return values


def _read_numeric_rows(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rows.append([float(c) for c in line.split(",")])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    return rows


# ---------------------------------------------------------------------------
# traces and summaries
# ---------------------------------------------------------------------------

TRACE_FIXED = ["step", "log_likelihood", "log_prior_density", "log_prior_kernel", "log_posterior",
               "p", "q", "eta0", "width"]


def trace_columns(n_data: int, n_eng: int) -> list:
    cols = list(TRACE_FIXED)
    cols += [f"kernel_{k + 1}" for k in range(n_eng)]
    cols += [f"xi_{i + 1}_{k + 1}" for i in range(n_data) for k in range(n_eng)]
    return cols


def write_trace(path, steps, components, scalars, kernels, fields) -> None:
    """One row per recorded sample: step, log-posterior parts, p, kernel hyper, kernel, field."""
    n = len(steps)
    n_data, n_eng = (fields.shape[1], fields.shape[2]) if n else (0, 0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_columns(n_data, n_eng) if n else TRACE_FIXED)
    for j in range(n):
        ll, lpd, lpk = components[j]
        row = [int(steps[j]), ll, lpd, lpk, ll + lpd + lpk, *scalars[j][:4]]
        row = [row[0]] + [_fmt(v) for v in row[1:]]
        row += [_fmt(v) for v in kernels[j]] + [_fmt(v) for v in fields[j].ravel()]
        w.writerow(row)
    atomic_write_text(path, buf.getvalue())


@dataclass
class Trace:
    columns: list
    values: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def parameter_names(self) -> list:
        return [c for c in self.columns if c == "p" or c.startswith(("kernel_", "xi_"))]


def read_trace(path) -> Trace:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: trace not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty trace") from None
        if header[: len(TRACE_FIXED)] != TRACE_FIXED:
            raise DataError(f"{path}:1: unexpected trace header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    values = np.asarray(rows) if rows else np.empty((0, len(header)))
    return Trace(header, values)


def write_summary(path, params: Iterable) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "median", "hpd_lower", "hpd_upper"])
    for p in params:
        w.writerow([p.name, _fmt(p.median), _fmt(p.lower), _fmt(p.upper)])
    atomic_write_text(path, buf.getvalue())


def write_truth(path, density: np.ndarray, kernel: np.ndarray, projections: np.ndarray,
                meta: dict) -> None:
    atomic_write_json(path, {
        "density": np.asarray(density).tolist(),
        "kernel": np.asarray(kernel).tolist(),
        "projections": np.asarray(projections).tolist(),
        **meta,
    })

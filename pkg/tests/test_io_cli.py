import json

import numpy as np
import pytest

from seminvert.cli import main, segment_distance
from seminvert.geometry import Grid
from seminvert.io import (
    DataError,
    atomic_write_text,
    format_plane,
    load_stack,
    parse_plane,
    read_trace,
    write_stack,
    write_trace,
)

GRID = Grid(1.0, 3, (5.0, 7.0), (0.0, 0.3, 0.6))
DATA = np.arange(1.0, 19.0).reshape(2, 9).T


@pytest.fixture
def stack_dir(tmp_path):
    write_stack(tmp_path / "stack", GRID, DATA, eta_surface=0.5)
    return tmp_path / "stack"


def test_plane_roundtrip_is_exact():
    values = np.random.default_rng(0).random(9) * 1e-7
    back = parse_plane(format_plane(values, 3, 5.0), "p.csv", 3, 5.0)
    np.testing.assert_array_equal(back, values)


def test_load_stack_fixture(stack_dir):
    loaded = load_stack(stack_dir / "manifest.json", decompose=False)
    np.testing.assert_array_equal(loaded.stack.data, DATA)
    assert loaded.grid == GRID
    assert loaded.eta_surface == 0.5


def test_load_stack_decomposes_by_default(stack_dir):
    loaded = load_stack(stack_dir / "manifest.json")
    np.testing.assert_array_equal(loaded.stack.offsets, [1.0, 10.0])
    assert np.array_equal(loaded.stack.reconstructed(), DATA)


def test_short_plane_names_the_file(stack_dir):
    path = stack_dir / "plane_02.csv"
    lines = path.read_text().splitlines()
    lines[-1] = ",".join(lines[-1].split(",")[:2])   # 8 cells
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="plane_02.csv:4"):
        load_stack(stack_dir / "manifest.json")


def test_unsorted_energies_rejected(stack_dir):
    man = json.loads((stack_dir / "manifest.json").read_text())
    man["planes"].reverse()
    (stack_dir / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DataError, match="increasing"):
        load_stack(stack_dir / "manifest.json")


def test_non_numeric_and_missing(stack_dir, tmp_path):
    path = stack_dir / "plane_01.csv"
    path.write_text(path.read_text().replace("5.0,", "x,", 1))
    with pytest.raises(DataError, match="non-numeric"):
        load_stack(stack_dir / "manifest.json")
    with pytest.raises(DataError, match="not found"):
        load_stack(tmp_path / "nothing.json")


def test_atomic_write_leaves_no_temp_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    atomic_write_text(target, "old\n")

    def fail(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr("seminvert.io.os.replace", fail)
    with pytest.raises(OSError):
        atomic_write_text(target, "new\n")
    assert target.read_text() == "old\n"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out.txt"]


def test_trace_roundtrip(tmp_path):
    steps = np.array([10, 20])
    comps = np.array([[-1.0, -2.0, -3.0], [-1.5, -2.5, -3.5]])
    scal = np.array([[0.7, 1.0, 0.0, 0.3], [0.8, 1.1, 0.1, 0.4]])
    kern = np.array([[0.5, 0.25], [0.5, 0.2]])
    fields = np.arange(36.0).reshape(2, 9, 2)
    write_trace(tmp_path / "t.csv", steps, comps, scal, kern, fields)
    tr = read_trace(tmp_path / "t.csv")
    np.testing.assert_array_equal(tr.column("log_posterior"), [-6.0, -7.5])
    np.testing.assert_array_equal(tr.column("xi_9_2"), fields[:, 8, 1])
    assert tr.parameter_names()[:3] == ["p", "kernel_1", "kernel_2"]


def test_segment_distance():
    a = np.zeros(10)
    assert segment_distance(a, a, 5) == 0.0
    assert segment_distance(np.array([0.0, 0.0]), np.array([1.0, 1.0]), 4) == 1.0


# -- command line ----------------------------------------------------------------

def test_cli_usage_errors(tmp_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["simulate", "--preset", "nope", "--seed", "1", "--out", str(tmp_path)]) == 1
    assert "cuw-dense-desk" in capsys.readouterr().err


def test_cli_data_error_exit_code(tmp_path):
    assert main(["project", "--data", str(tmp_path / "none.json"), "--field", "f", "--kernel", "k",
                 "--out", str(tmp_path / "o")]) == 2


def test_cli_simulate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--preset", "cuw-sparse-desk", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files and "truth.json" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_project_zero_field(stack_dir, tmp_path):
    (tmp_path / "field.csv").write_text("\n".join(["0,0"] * 9) + "\n")
    (tmp_path / "kernel.csv").write_text("0.5\n0.3\n")
    assert main(["project", "--data", str(stack_dir / "manifest.json"), "--field", str(tmp_path / "field.csv"),
                 "--kernel", str(tmp_path / "kernel.csv"), "--out", str(tmp_path / "proj")]) == 0
    loaded = load_stack(tmp_path / "proj" / "manifest.json", decompose=False)
    assert not loaded.stack.data.any()


def _invert(tmp_path, data_dir, name, **cfg):
    conf = {"n_max": 600, "burn_in": 200, "n0": 100, "thin": 5, "seed": 2, "checkpoint_every": 200}
    conf.update(cfg)
    (tmp_path / f"{name}.json").write_text(json.dumps(conf))
    return tmp_path / f"{name}.json"


def test_cli_invert_summarize_diagnose_resume(tmp_path):
    data = tmp_path / "sim"
    assert main(["simulate", "--preset", "cuw-dense-desk", "--seed", "1", "--out", str(data)]) == 0
    manifest = str(data / "manifest.json")
    full = _invert(tmp_path, data, "full")
    assert main(["invert", "--data", manifest, "--config", str(full), "--out", str(tmp_path / "run")]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["iterations"] == 600 and report["samples_after_burn_in"] == 80

    # an interrupted run resumed from its checkpoint matches the uninterrupted one
    short = _invert(tmp_path, data, "short", n_max=400)
    assert main(["invert", "--data", manifest, "--config", str(short), "--out", str(tmp_path / "part")]) == 0
    assert main(["invert", "--data", manifest, "--config", str(full), "--out", str(tmp_path / "resumed"),
                 "--resume", str(tmp_path / "part" / "checkpoint.npz")]) == 0
    for name in ("trace.csv", "summary.csv"):
        assert (tmp_path / "run" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()

    trace = str(tmp_path / "run" / "trace.csv")
    for out in ("s1.csv", "s2.csv"):
        assert main(["summarize", "--trace", trace, "--out", str(tmp_path / out), "--burn-in", "200"]) == 0
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    assert main(["diagnose", "--trace", trace, "--out", str(tmp_path / "diag"), "--burn-in", "200"]) == 0
    assert json.loads((tmp_path / "diag" / "diagnose.json").read_text())["samples"] == 80

    bad = _invert(tmp_path, data, "bad", burn_in=600)
    assert main(["invert", "--data", manifest, "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_cli_diagnose_flags_stationary_chain_as_converged(tmp_path):
    rng = np.random.default_rng(0)
    n = 3000
    write_trace(tmp_path / "t.csv", np.arange(1, n + 1), np.zeros((n, 3)),
                np.column_stack([rng.uniform(0.6, 0.99, n), np.zeros((n, 3))]),
                np.column_stack([np.full(n, 0.5), rng.random(n)]), rng.random((n, 1, 2)))
    assert main(["diagnose", "--trace", str(tmp_path / "t.csv"), "--out", str(tmp_path / "d")]) == 0
    report = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    assert report["converged"] and report["max_tv_distance"] < 0.2

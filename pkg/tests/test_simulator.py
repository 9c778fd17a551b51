import math

import numpy as np
import pytest

from seminvert.forward import Projector
from seminvert.geometry import Grid, ResolutionRegime, classify_regime
from seminvert.simulator import (
    SimSpec,
    gen_images,
    gen_true_density,
    gen_true_kernel,
    preset_scenarios,
    simulate,
    toy_prior_study,
    with_noise,
)

GRID = Grid(1.0, 4, (1.0, 2.0, 3.0, 4.0), (0.0, 0.1, 0.25, 0.45, 0.7))


def test_simulation_is_deterministic():
    spec = SimSpec("d", GRID, sparse=True)
    a, b = simulate(spec, 9), simulate(spec, 9)
    np.testing.assert_array_equal(a.density, b.density)
    np.testing.assert_array_equal(a.images.stack.data, b.images.stack.data)
    assert not np.array_equal(a.density, simulate(spec, 10).density)


def test_dense_field_is_positive_everywhere():
    spec = SimSpec("d", GRID)
    for seed in range(5):
        assert np.all(gen_true_density(spec, np.random.default_rng(seed)) > 0)


def test_sparse_has_more_zero_columns():
    dense, sparse = SimSpec("d", GRID), SimSpec("s", GRID, sparse=True)
    zeros_d = zeros_s = 0
    for seed in range(20):
        zeros_d += np.count_nonzero(gen_true_density(dense, np.random.default_rng(seed)) == 0)
        zeros_s += np.count_nonzero(gen_true_density(sparse, np.random.default_rng(seed)) == 0)
    assert zeros_d == 0 and zeros_s > 0


def test_sparse_zero_columns_are_whole_columns():
    field = gen_true_density(SimSpec("s", GRID, sparse=True), np.random.default_rng(4))
    zero_any = (field == 0).any(axis=1)
    zero_all = (field == 0).all(axis=1)
    np.testing.assert_array_equal(zero_any, zero_all)


def test_density_decreases_with_depth():
    field = gen_true_density(SimSpec("d", GRID), np.random.default_rng(1))
    assert np.all(np.diff(field, axis=1) < 0)


def test_kernel_examples():
    d = 0.3
    spec0 = SimSpec("k", GRID, gamma=0.0, d_s=d)
    z = GRID.kernel_depths
    np.testing.assert_allclose(gen_true_kernel(spec0), 2 * np.exp(-z**2 / (2 * d * d)), rtol=1e-14)
    g = 0.25
    spec1 = SimSpec("k", GRID, gamma=g, d_s=d)
    assert gen_true_kernel(spec1, [g])[0] == pytest.approx(1 + math.exp(-2 * g * g / (d * d)), rel=1e-14)


def test_spec_validation():
    with pytest.raises(ValueError):
        SimSpec("bad", GRID, d_s=0.0)
    with pytest.raises(ValueError):
        SimSpec("bad", GRID, noise_fraction=0.2)


def test_zero_noise_gives_exact_projections():
    spec = SimSpec("z", GRID, noise_fraction=0.0)
    sim = simulate(spec, 2)
    expected = Projector.build(GRID, classify_regime(GRID)).project(sim.density, sim.kernel)
    np.testing.assert_array_equal(sim.images.stack.data, expected)
    assert sim.images.clamped == 0


def test_noise_scale_matches_fraction():
    rng = np.random.default_rng(3)
    field = np.full((16, 4), 2.0)
    kernel = np.array([1.0, 0.8, 0.6, 0.4])
    f = 0.05
    rel = []
    for _ in range(200):
        img = gen_images(field, kernel, GRID, ResolutionRegime(1), f, rng)
        rel.append(((img.stack.data - img.projections) / img.projections).ravel())
    assert np.std(np.concatenate(rel)) == pytest.approx(f, rel=0.1)


def test_negative_draws_are_clamped_and_counted():
    rng = np.random.default_rng(0)
    img = gen_images(np.full((16, 4), 1.0), np.ones(4), GRID, ResolutionRegime(1), 0.1, rng)
    assert img.clamped == 0
    assert np.all(img.stack.data >= 0)


def test_presets_classify_as_declared():
    presets = preset_scenarios()
    assert classify_regime(presets["cuw-dense-desk"].grid).model == 1
    assert classify_regime(presets["fine-dense-desk"].grid).model == 3
    for spec in presets.values():
        assert spec.resolved_regime() == (spec.regime or classify_regime(spec.grid))
    assert with_noise(presets["cuw-dense-desk"], 0.01).noise_fraction == 0.01


def test_toy_study_shapes_and_unknown_generator():
    rng = np.random.default_rng(0)
    for gen in ("ratio", "power"):
        s = toy_prior_study(gen, rng)
        assert s.density.shape == (10,) and s.neg_log_prior.shape == (10,)
        assert np.all(s.neg_log_prior >= 0) and 0.6 <= s.p <= 0.99
    with pytest.raises(ValueError):
        toy_prior_study("nope", rng)

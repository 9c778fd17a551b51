import math

import numpy as np
import pytest
from scipy import integrate

from oracles import folded_normal_pdf
from seminvert.config import ConfigError, RunConfig
from seminvert.geometry import Grid, ResolutionRegime
from seminvert.sampler import (
    Chain,
    SamplerError,
    SeedError,
    exponential_logpdf,
    hpd_interval,
    propose_kernel,
    propose_xi,
    resume_chain,
    seed_density,
    summarize_samples,
)
from seminvert.simulator import SimSpec, simulate


def small_problem(seed=3, sparse=False):
    grid = Grid(1.0, 2, (1.0, 2.0, 3.0), (0.0, 0.2, 0.45, 0.7))
    sim = simulate(SimSpec("t", grid, sparse=sparse, gamma=0.0, d_s=0.4, noise_fraction=0.03), seed)
    return grid, sim


def make_chain(n_max=400, **overrides):
    grid, sim = small_problem()
    opts = dict(eta_surface=sim.eta_surface, n_max=n_max, burn_in=100, n0=50, thin=1, seed=5, chunk=64)
    opts.update(overrides)
    return Chain(grid, sim.images.stack, RunConfig(**opts), ResolutionRegime(1))


def test_propose_xi_density_integrates_to_one():
    sd = 0.7
    total, _ = integrate.quad(lambda x: folded_normal_pdf(x, 0.3, sd), 0, np.inf)
    assert total == pytest.approx(1.0, rel=1e-10)
    rng = np.random.default_rng(0)
    draws = [propose_xi(0.0, rng, seed_value=1.0)[0] for _ in range(2000)]
    assert min(draws) >= 0


def test_propose_xi_uses_history_after_n0():
    rng = np.random.default_rng(1)
    s1, s2, cnt = 10.0, 60.0, 4      # mean 2.5, var (60 - 25) / 3
    _, _, sd = propose_xi(1.0, rng, seed_value=9.0, history_sum=s1, history_sumsq=s2,
                          history_count=cnt, n=100, n0=10)
    assert sd == pytest.approx(math.sqrt(35 / 3))
    _, _, early = propose_xi(1.0, rng, seed_value=9.0, history_sum=s1, history_sumsq=s2,
                             history_count=cnt, n=5, n0=10)
    assert 0 < early <= 9.0
    with pytest.raises(ValueError):
        propose_xi(-1.0, rng, seed_value=1.0)


def test_propose_xi_hastings_ratio_is_symmetric_fold():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x_new, log_ratio, sd = propose_xi(0.4, rng, seed_value=1.0)
        ref = math.log(folded_normal_pdf(0.4, x_new, sd)) - math.log(folded_normal_pdf(x_new, 0.4, sd))
        assert log_ratio == pytest.approx(ref, abs=1e-12)


def test_exponential_logpdf():
    assert exponential_logpdf(2.0, 0.5) == pytest.approx(math.log(0.5) - 1.0)
    assert exponential_logpdf(-1.0, 0.5) == -math.inf


def test_propose_kernel_keeps_surface():
    rng = np.random.default_rng(3)
    kern = np.array([0.8, 0.5, 0.2])
    rates = np.array([1.0, 2.0, 4.0])
    prop, log_ratio = propose_kernel(kern, rates, rng)
    assert prop[0] == 0.8 and np.all(prop[1:] > 0)
    ref = sum(exponential_logpdf(kern[k], rates[k]) - exponential_logpdf(prop[k], rates[k]) for k in (1, 2))
    assert log_ratio == pytest.approx(ref)


def test_hpd_examples():
    lo, hi = hpd_interval(np.arange(1, 101), 0.95)
    assert hi - lo == 94
    assert hpd_interval(np.full(10, 3.0)) == (3.0, 3.0)
    u = np.random.default_rng(4).random(100_000)
    lo, hi = hpd_interval(u, 0.95)
    assert hi - lo == pytest.approx(0.95, abs=0.02)
    with pytest.raises(ValueError):
        hpd_interval([])


def test_hpd_boundary_extension():
    x = np.random.default_rng(5).exponential(1.0, 5000)
    lo, _ = hpd_interval(x, 0.95, lower_bound=0.0)
    assert lo == 0.0
    lo_free, _ = hpd_interval(x, 0.95)
    assert lo_free > 0.0


def test_summarize_samples_median_inside_window():
    out = summarize_samples({"a": np.arange(1.0, 101.0)})
    assert out[0].lower <= out[0].median <= out[0].upper
    assert out[0].median == pytest.approx(50.5)


def test_seed_density_examples():
    grid = Grid(1.0, 1, (1.0, 2.0), (0.0, 0.5, 1.5))
    kern = np.array([2.0, 1.0])
    # cumulative kernel * width: [1.0, 2.0]
    np.testing.assert_allclose(seed_density(np.array([[3.0, 4.0]]), grid, kern), [[3.0, 2.0]])
    assert not seed_density(np.zeros((1, 2)), grid, kern).any()
    with pytest.raises(SeedError):
        seed_density(np.ones((1, 2)), grid, np.array([0.0, 1.0]))


def test_single_energy_seed_formula():
    grid = Grid(1.0, 1, (1.0,), (0.0, 0.4))
    np.testing.assert_allclose(seed_density(np.array([[2.0]]), grid, np.array([0.5])), [[2.0 / (0.5 * 0.4)]])


def test_config_rejects_burn_in_at_n_max():
    with pytest.raises(ConfigError):
        RunConfig(eta_surface=1.0, n_max=100, burn_in=100)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_chain_requires_surface_value():
    grid, sim = small_problem()
    with pytest.raises(SamplerError):
        Chain(grid, sim.images.stack, RunConfig(n_max=10, burn_in=0, n0=0))


def test_surface_kernel_bin_never_changes():
    chain = make_chain()
    chain.run(400)
    s = chain.samples(0)
    assert np.all(s["kernel"][:, 0] == chain.config.eta_surface)
    assert np.all(s["xi"] >= 0)
    assert chain.acceptance()["kernel"] > 0


def test_accumulators_equal_history_sums():
    chain = make_chain()
    chain.run(400)
    s = chain.samples(0)
    after = s["step"] > chain.config.n0
    flat = s["xi"][after].reshape(after.sum(), -1)
    ref1 = np.zeros(flat.shape[1])
    ref2 = np.zeros(flat.shape[1])
    for row in flat:
        ref1 += row
        ref2 += row * row
    np.testing.assert_array_equal(chain.sum1, ref1)
    np.testing.assert_array_equal(chain.sum2, ref2)


def test_cached_terms_match_full_evaluation():
    chain = make_chain(verify_every=50)
    chain.run(400)
    assert chain.max_verified_gap < 1e-9
    assert chain.check_incremental() < 1e-12


def test_save_load_roundtrip_and_resume(tmp_path):
    full = make_chain()
    full.run(400)
    part = make_chain()
    part.run(170)
    path = tmp_path / "ck.npz"
    part.save(path)
    grid, sim = small_problem()
    resumed = resume_chain(path, grid, sim.images.stack)
    assert resumed.n == 170
    resumed.run(230)
    np.testing.assert_array_equal(resumed.xi, full.xi)
    np.testing.assert_array_equal(resumed.kernel, full.kernel)
    np.testing.assert_array_equal(resumed.samples()["xi"], full.samples()["xi"])


def test_same_seed_same_chain():
    a, b = make_chain(), make_chain()
    a.run(200)
    b.run(200)
    np.testing.assert_array_equal(a.samples(0)["xi"], b.samples(0)["xi"])
    c = make_chain(seed=6)
    c.run(200)
    assert not np.array_equal(a.samples(0)["xi"], c.samples(0)["xi"])


def test_chunking_does_not_change_the_chain():
    a, b = make_chain(chunk=7), make_chain(chunk=400)
    a.run(300)
    b.run(300)
    np.testing.assert_array_equal(a.xi, b.xi)


def test_parametric_chain_runs():
    chain = make_chain(kernel_model="parametric")
    chain.run(300)
    assert np.all(chain.samples(0)["kernel"][:, 0] == pytest.approx(chain.config.eta_surface, rel=1e-9))

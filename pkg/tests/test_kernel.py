import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import folded_normal_pdf
from seminvert.kernel import (
    FoldedNormalHyper,
    FreeKernel,
    InfeasibleKernelError,
    KernelError,
    ParametricKernel,
    eval_parametric,
    folded_normal_logpdf,
    normalize_kernel,
    prior_log_density_free,
    prior_log_density_parametric,
    seed_kernel,
    solve_eta0,
    solve_free_prior_width,
)


def test_eval_parametric_hand_value():
    k = ParametricKernel(1.0, 1.0, 1.0, 2 * math.exp(-0.5))
    assert eval_parametric(k, 1.0) == pytest.approx(1 + math.exp(-2), rel=1e-12)


def test_eval_parametric_surface_tie():
    k = ParametricKernel.from_q_s(3.0, 0.7, 1.5)
    assert eval_parametric(k, 0.0) == pytest.approx(1.5, rel=1e-12)


def test_eta0_zero_gives_2q_at_surface():
    k = ParametricKernel.from_q_s(0.5, 2.0, 1.0)
    assert k.eta0 == 0.0
    assert eval_parametric(k, 0.0) == pytest.approx(1.0)


def test_solve_eta0_examples():
    assert solve_eta0(0.5, 1.0, 1.0) == 0.0
    assert solve_eta0(math.exp(0.5) / 2, 1.0, 1.0) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(InfeasibleKernelError):
        solve_eta0(0.4, 1.0, 1.0)


@given(st.floats(0.01, 10), st.floats(0.01, 5), st.floats(1.0, 50))
def test_solve_eta0_reproduces_surface(surface, s, ratio):
    q = 0.5 * surface * ratio
    k = ParametricKernel.from_q_s(q, s, surface)
    assert eval_parametric(k, 0.0) == pytest.approx(surface, rel=1e-12)


@given(st.floats(0.1, 5), st.floats(0, 3), st.floats(0.1, 3), st.floats(0, 10))
def test_eval_parametric_matches_direct_formula(q, eta0, s, z):
    k = ParametricKernel(q, eta0, s, 2 * q * math.exp(-eta0**2 / (2 * s * s)))
    direct = q * (math.exp(-(z - eta0) ** 2 / (2 * s * s)) + math.exp(-(z + eta0) ** 2 / (2 * s * s)))
    assert eval_parametric(k, z) == pytest.approx(direct, rel=1e-12, abs=1e-300)


def test_parametric_rejects_broken_tie():
    with pytest.raises(KernelError):
        ParametricKernel(1.0, 0.3, 1.0, 1.0)


def test_folded_normal_at_zero_standard():
    assert folded_normal_logpdf(0.0, 0.0, 1.0) == pytest.approx(math.log(2 / math.sqrt(2 * math.pi)))
    assert folded_normal_logpdf(-0.1, 0.0, 1.0) == -math.inf


def test_parametric_prior_is_sum_of_folded_terms():
    hyper = FoldedNormalHyper(1.0, 0.5, 2.0, 1.5)
    expected = math.log(folded_normal_pdf(1.3, 1.0, 0.5)) + math.log(folded_normal_pdf(0.4, 2.0, 1.5))
    assert prior_log_density_parametric(1.3, 0.4, hyper) == pytest.approx(expected, rel=1e-12)
    assert prior_log_density_parametric(-1.0, 0.4, hyper) == -math.inf


def test_parametric_prior_peaks_at_mode():
    hyper = FoldedNormalHyper(0.0, 1.0, 1.0, 1.0)
    grid = np.linspace(0, 3, 301)
    vals = [prior_log_density_parametric(q, 1.0, hyper) for q in grid]
    assert int(np.argmax(vals)) == 0


def test_free_prior_three_bins_oracle():
    kern = FreeKernel((2.0 * math.exp(0), 1.5, 0.3), q=1.0, eta0=0.0)
    depths = np.array([0.0, 0.5, 1.2])
    s = 1.0
    means = [2 * math.exp(-z * z / 2) for z in depths]
    expected = sum(math.log(folded_normal_pdf(v, m, s)) for v, m in zip(kern.values, means))
    assert prior_log_density_free(kern, depths, s=s) == pytest.approx(expected, rel=1e-12)


def test_free_prior_at_means_is_peak_sum():
    q, eta0, s = 1.0, 0.0, 1.0
    depths = np.array([0.0, 0.4, 0.9])
    means = [2 * q * math.exp(-z * z / (2 * s * s)) for z in depths]
    kern = FreeKernel(tuple(means), q, eta0)
    peak = sum(math.log(folded_normal_pdf(m, m, s)) for m in means)
    assert prior_log_density_free(kern, depths, s=s) == pytest.approx(peak, rel=1e-12)


def test_free_width_gives_unit_density_at_surface():
    for q, eta0, surface in [(1.0, 0.0, 2.0), (0.75, 0.2, 1.4), (2.0, 0.5, 1.0), (0.6, 0.2, 1.1)]:
        s = solve_free_prior_width(q, eta0, surface)
        mean = q * 2 * math.exp(-eta0**2 / (2 * s * s))
        assert folded_normal_pdf(surface, mean, s) == pytest.approx(1.0, rel=1e-8)


def test_free_width_infeasible():
    # mean 2, surface 1.5: the density at 1.5 peaks near 0.48 (s = 0.5)
    with pytest.raises(InfeasibleKernelError):
        solve_free_prior_width(1.0, 0.0, 1.5)
    with pytest.raises(InfeasibleKernelError):
        solve_free_prior_width(1e-6, 0.0, 100.0)


def test_single_bin_free_prior_only_surface():
    kern = FreeKernel((1.2,), q=1.0, eta0=0.1)
    assert prior_log_density_free(kern, [0.0]) == pytest.approx(0.0, abs=1e-8)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_kernel(np.array([0.65, 0.4, 0.2]), 0.325), [0.325, 0.2, 0.1])
    same = np.array([0.325, 0.2])
    np.testing.assert_array_equal(normalize_kernel(same, 0.325), same)
    with pytest.raises(KernelError):
        normalize_kernel(np.array([0.0, 1.0]), 0.325)


def test_normalize_idempotent_and_typed():
    k = normalize_kernel(np.array([0.9, 0.5, 0.1]), 0.325)
    np.testing.assert_array_equal(normalize_kernel(k, 0.325), k)
    free = normalize_kernel(FreeKernel((0.65, 0.3), 1.0, 0.0), 0.325)
    assert isinstance(free, FreeKernel) and free.values[0] == 0.325
    par = normalize_kernel(ParametricKernel.from_q_s(2.0, 1.0, 0.65), 0.325)
    assert eval_parametric(par, 0.0) == pytest.approx(0.325)


def test_seed_kernel_surface_pinned():
    z = np.array([0.0, 0.1, 0.3])
    k = seed_kernel(z, 0.5)
    assert k[0] == 0.5
    assert np.all(k > 0)

import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from uedanomaly import ricemix as rm
from uedanomaly.errors import DataError, DomainError, ThresholdError

REFERENCE = rm.RiceMixtureParams(w=0.6, normal=rm.RiceParams(0.0, 1.82, 0.17),
                             anomal=rm.RiceParams(2.94, 0.0, 0.25))


def mp_log_i0(x):
    mpmath.mp.dps = 40
    return float(mpmath.log(mpmath.besseli(0, mpmath.mpf(x))))


@pytest.mark.parametrize("x", [0.0, 1e-8, 0.3, 2.0, 7.7499, 7.75, 7.7501, 8.0, 30.0, 700.0, 1e4])
def test_log_i0_against_arbitrary_precision(x):
    assert rm.log_i0(x) == pytest.approx(mp_log_i0(x), abs=1e-10, rel=1e-13)


def test_log_i0_no_overflow():
    v = rm.log_i0(1e8)
    expected = 1e8 - 0.5 * math.log(2 * math.pi * 1e8)
    assert np.isfinite(v) and v == pytest.approx(expected, abs=1e-8)


def test_rice_logpdf_examples():
    assert rm.rice_logpdf(1.0, rm.RiceParams(0, 0, 1)) == pytest.approx(math.log(2) - 1, abs=1e-14)
    assert rm.rice_logpdf(0.5, rm.RiceParams(0.5, 1, 1)) == -np.inf
    assert rm.rice_logpdf(0.2, rm.RiceParams(0.5, 1, 1)) == -np.inf
    expected = math.log(4) - 8 + mp_log_i0(8)
    assert rm.rice_logpdf(2.0, rm.RiceParams(0, 2, 1)) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
def test_rice_logpdf_domain(alpha):
    with pytest.raises(DomainError):
        rm.rice_logpdf(1.0, rm.RiceParams(0, 1, alpha))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 10), st.floats(1e-4, 10))
def test_rayleigh_reduction(mu, alpha, z):
    e = mu + z
    closed = math.log(2 * z / alpha) - z * z / alpha
    assert rm.rice_logpdf(e, rm.RiceParams(mu, 0.0, alpha)) == pytest.approx(closed, abs=1e-9)


def rice_integral(p: rm.RiceParams):
    sigma = math.sqrt(p.alpha / 2)
    top = p.mu + p.nu + 40 * sigma
    peak = p.mu + max(p.nu, sigma)
    val, _ = integrate.quad(lambda e: math.exp(rm.rice_logpdf(e, p)), p.mu, top,
                            points=[peak], limit=400, epsabs=1e-12, epsrel=1e-12)
    return val


TRIPLES = [rm.RiceParams(mu, nu, alpha) for mu in (0.0, 2.94, -7.0)
           for nu in (0.0, 0.1, 1.82, 6.0) for alpha in (1e-3, 0.17, 0.25, 4.0)]


@pytest.mark.parametrize("p", TRIPLES, ids=str)
def test_rice_density_integrates_to_one(p):
    assert rice_integral(p) == pytest.approx(1.0, abs=1e-6)


def test_component_mean_matches_samples():
    rng = np.random.default_rng(0)
    for comp in (REFERENCE.normal, REFERENCE.anomal, rm.RiceParams(-3, 0.4, 0.5)):
        mix = rm.RiceMixtureParams(w=1 - 1e-12, normal=comp, anomal=comp)
        e, _ = rm.sample(mix, 200_000, rng)
        sd = math.sqrt(np.var(e) / len(e))
        assert abs(e.mean() - rm.component_mean(comp)) < 5 * sd


def test_nll_weight_cancels_for_equal_densities():
    comp = rm.RiceParams(0.0, 1.0, 0.5)
    d = math.exp(rm.rice_logpdf(1.3, comp))
    for w in (0.1, 0.5, 0.9):
        p = rm.RiceMixtureParams(w=w, normal=comp, anomal=comp)
        assert rm.mixture_nll([1.3], p) == pytest.approx(-math.log(d), abs=1e-12)


def test_nll_penalty_and_errors():
    p = rm.RiceMixtureParams(w=0.5, normal=rm.RiceParams(1, 0, 1), anomal=rm.RiceParams(2, 0, 1))
    assert rm.mixture_nll([0.0, 0.5], p) == pytest.approx(2 * rm.PENALTY)
    with pytest.raises(DataError):
        rm.mixture_nll([], p)
    with pytest.raises(DataError):
        rm.mixture_nll([np.nan], p)
    # w is clipped into its box, never reaching 0 or 1
    edge = rm.RiceMixtureParams(w=1.0, normal=rm.RiceParams(0, 0, 1), anomal=rm.RiceParams(0, 0, 1))
    assert np.isfinite(rm.mixture_nll([1.0], edge))


def test_default_bounds_reduce_to_nonnegative_boxes():
    e = np.array([0.5, 1.0, 3.0])
    b = rm.default_bounds(e)
    assert b[0] == (1e-3, 1 - 1e-3)
    assert b[1] == (0.0, 3.0) and b[2] == (0.0, 3.0) and b[3] == (1e-6, 2.5 ** 2)
    assert b[4:] == b[1:4]


WELL_SEPARATED = rm.RiceMixtureParams(w=0.7, normal=rm.RiceParams(1.0, 0.5, 0.05),
                                      anomal=rm.RiceParams(2.5, 0.3, 0.1))


@pytest.fixture(scope="module")
def separated_scores():
    return rm.sample(WELL_SEPARATED, 400, np.random.default_rng(1))[0]


@pytest.fixture(scope="module")
def separated_fit(separated_scores):
    return rm.fit(separated_scores, n_restarts=12, n_keep=4, seed=3)


def test_fit_at_least_as_good_as_truth(separated_scores, separated_fit):
    assert separated_fit.nll <= rm.mixture_nll(separated_scores, WELL_SEPARATED) + 0.5
    assert separated_fit.w == pytest.approx(0.7, abs=0.06)
    assert rm.component_mean(separated_fit.normal) < rm.component_mean(separated_fit.anomal)


def test_fit_global_best_bookkeeping(separated_fit):
    assert separated_fit.nll <= min(separated_fit.diagnostics["stage1_nll"]) + 1e-12
    rounds = separated_fit.diagnostics["round_best"]
    assert all(b <= a for a, b in zip(rounds, rounds[1:]))
    assert separated_fit.n_restarts_used >= 12


def test_fit_deterministic_and_schedule_free(separated_scores, separated_fit):
    again = rm.fit(separated_scores, n_restarts=12, n_keep=4, seed=3, workers=2)
    np.testing.assert_array_equal(again.vector(), separated_fit.vector())
    assert again.nll == separated_fit.nll


def test_fit_needs_twenty_scores():
    with pytest.raises(DataError):
        rm.fit(np.linspace(1, 2, 19))
    with pytest.raises(DataError):
        rm.fit(np.r_[np.linspace(1, 2, 30), np.inf])


def test_threshold_shift_invariance(separated_scores):
    c = -8.0
    base = rm.fit(separated_scores, n_restarts=8, n_keep=3, seed=5)
    moved = rm.fit(separated_scores + c, n_restarts=8, n_keep=3, seed=5,
                   mu_floor=rm.default_bounds(separated_scores)[1][0] + c)
    e0 = rm.solve_threshold(base)
    e1 = rm.solve_threshold(moved)
    assert e1 == pytest.approx(e0 + c, abs=1e-3)


def test_gamma_family():
    p = rm.RiceParams(0.5, 3.0, 0.2)
    val, _ = integrate.quad(lambda e: math.exp(rm.gamma_logpdf(e, p.mu, p.nu, p.alpha)), p.mu, 30, limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)
    rng = np.random.default_rng(2)
    e = np.r_[0.5 + rng.gamma(3.0, 0.2, 150), 3.0 + rng.gamma(2.0, 0.1, 60)]
    fitted = rm.fit(e, n_restarts=6, n_keep=2, family=rm.GAMMA, seed=1)
    assert fitted.family == rm.GAMMA
    assert rm.solve_threshold(fitted) == pytest.approx(2.9, abs=0.4)


def test_posterior_examples():
    comp = rm.RiceParams(0.0, 1.0, 0.5)
    p = rm.RiceMixtureParams(w=0.5, normal=comp, anomal=comp)
    assert rm.posterior_normal(1.2, p) == pytest.approx(0.5, abs=1e-15)
    post, flag = rm.posterior_normal(-1.0, REFERENCE, return_flag=True)
    assert post == 0.5 and flag
    post, flag = rm.posterior_normal(1.8, REFERENCE, return_flag=True)
    assert not flag and post > 0.99
    assert rm.posterior_normal(4.0, REFERENCE) < 0.01


def test_posterior_complement_grid():
    grid = np.linspace(-1.0, 6.0, 10_000)
    total = rm.posterior_normal(grid, REFERENCE) + rm.posterior_anomalous(grid, REFERENCE)
    assert np.max(np.abs(total - 1.0)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 0.99), st.floats(-2, 2), st.floats(0, 3), st.floats(0.01, 2))
def test_posterior_complement_property(e, w, mu, nu, alpha):
    p = rm.RiceMixtureParams(w=w, normal=rm.RiceParams(mu, nu, alpha), anomal=rm.RiceParams(mu + 1, 0.0, alpha))
    total = rm.posterior_normal(e, p) + rm.posterior_anomalous(e, p)
    assert abs(total - 1.0) <= 1e-12


def test_threshold_reference_mixture():
    e_t, crossings = rm.solve_threshold(REFERENCE, return_crossings=True)
    assert e_t == pytest.approx(2.925, abs=0.05)
    assert rm.posterior_normal(e_t - 1e-6, REFERENCE) >= 0.5 >= rm.posterior_normal(e_t + 1e-6, REFERENCE)
    assert e_t in crossings


def test_threshold_near_symmetric_mixture():
    # nu / sigma = 200: each component is Gaussian to within 1e-3 of skew
    a, b = rm.RiceParams(0.0, 20.0, 0.02), rm.RiceParams(1.0, 20.0, 0.02)
    p = rm.RiceMixtureParams(w=0.5, normal=a, anomal=b, e_range=(19.0, 23.0))
    mid = 0.5 * (rm.component_mean(a) + rm.component_mean(b))
    assert rm.solve_threshold(p) == pytest.approx(mid, abs=1e-3)


def test_threshold_target_monotone():
    p = rm.RiceMixtureParams(w=0.5, normal=rm.RiceParams(0, 1, 0.1), anomal=rm.RiceParams(1.5, 0.5, 0.1),
                             e_range=(0.0, 4.0))
    assert rm.solve_threshold(p, target=0.99) < rm.solve_threshold(p, target=0.5)


def test_threshold_error_without_crossing():
    comp = rm.RiceParams(0.0, 1.0, 0.3)
    p = rm.RiceMixtureParams(w=0.7, normal=comp, anomal=comp, e_range=(0.0, 3.0))
    with pytest.raises(ThresholdError):
        rm.solve_threshold(p)


def test_params_json_round_trip(tmp_path):
    p = rm.RiceMixtureParams(w=0.61, normal=rm.RiceParams(0.1, 1.8, 0.17),
                             anomal=rm.RiceParams(2.9, 0.01, 0.25), nll=12.5, seed=4)
    rm.save_params(p, tmp_path / "fit.json", e_t=2.93)
    keys = list(json.loads((tmp_path / "fit.json").read_text()))
    assert keys == ["w", "mu_N", "nu_N", "alpha_N", "mu_A", "nu_A", "alpha_A", "nll", "e_t", "seed"]
    back, e_t = rm.load_params(tmp_path / "fit.json")
    assert e_t == 2.93 and back.normal == p.normal and back.anomal == p.anomal and back.w == p.w

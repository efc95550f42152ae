import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from boardtruth.depth_model import (DepthMixture, bic_value, fit_mixture, integration_bounds, load_mixture,
                                    log_pdf, pdf, save_mixture, select_model)
from boardtruth.errors import CollapsedComponent, InsufficientSamples


def test_constant_samples_floor_sigma():
    m = fit_mixture(np.full(50, 2.0), "gaussian", 1)
    assert m.params[0, 0] == pytest.approx(2.0, abs=1e-15)
    # collapse guard: 1e-9 of the data scale (here the mean magnitude, 2.0)
    assert m.params[0, 1] == pytest.approx(2e-9, rel=1e-12)


def test_single_gaussian_recovery():
    x = np.random.default_rng(0).normal(3.0, 0.5, 10_000)
    m = fit_mixture(x, "gaussian", 1)
    assert abs(m.params[0, 0] - 3.0) < 0.02 and abs(m.params[0, 1] - 0.5) < 0.02
    # k = 1 has the closed-form maximum likelihood solution
    assert m.params[0, 0] == pytest.approx(x.mean(), abs=1e-9)
    assert m.params[0, 1] == pytest.approx(x.std(), abs=1e-6)


def test_two_component_recovery():
    rng = np.random.default_rng(1)
    pick = rng.random(10_000) < 0.5
    x = np.where(pick, rng.normal(2.0, 0.2, 10_000), rng.normal(8.0, 1.0, 10_000))
    m = fit_mixture(x, "gaussian", 2)
    np.testing.assert_allclose(m.means, [2.0, 8.0], atol=0.1)
    np.testing.assert_allclose(m.weights, [0.5, 0.5], atol=0.02)


def test_gamma_single_component_recovery():
    x = np.random.default_rng(2).gamma(2.0, 1.5, 10_000)
    m = fit_mixture(x, "gamma", 1)
    a, s = m.params[0]
    ref_a, _, ref_s = stats.gamma.fit(x, floc=0.0)
    assert a == pytest.approx(ref_a, rel=1e-6) and s == pytest.approx(ref_s, rel=1e-6)


def test_log_likelihood_and_bic_match_scipy():
    x = np.random.default_rng(3).normal(3.0, 0.5, 500)
    for fam, k in (("gaussian", 2), ("gamma", 2)):
        m = fit_mixture(x, fam, k)
        if fam == "gaussian":
            dens = sum(w * stats.norm.pdf(x, a, b) for w, (a, b) in m.components)
        else:
            dens = sum(w * stats.gamma.pdf(x, a, scale=b) for w, (a, b) in m.components)
        ll = float(np.sum(np.log(dens)))
        assert m.log_likelihood == pytest.approx(ll, abs=1e-8)
        assert m.bic == pytest.approx((3 * k - 1) * math.log(len(x)) - 2 * ll, abs=1e-7)


def test_em_log_likelihood_non_decreasing():
    rng = np.random.default_rng(4)
    x = np.r_[rng.normal(1.5, 0.3, 600), rng.normal(4.0, 0.8, 400), rng.gamma(9.0, 0.7, 300)]
    for fam in ("gaussian", "gamma"):
        for k in (2, 3, 5):
            h = np.array(fit_mixture(x, fam, k).ll_history)
            assert np.all(np.diff(h) >= -1e-9 * np.abs(h[1:]))


# --------------------------------------------------------------------------
# model selection


def test_selection_prefers_gaussian_for_normal_data():
    x = np.random.default_rng(5).normal(3.0, 0.5, 2000)
    best, table = select_model(x)
    assert best.family == "gaussian" and best.k <= 2
    assert len(table) == 16
    assert best.bic == min(row["bic"] for row in table)


def test_selection_prefers_gamma_for_skewed_data():
    x = np.random.default_rng(6).gamma(2.0, 1.5, 10_000)
    best, _ = select_model(x, max_components=3)
    assert best.family == "gamma"


def test_small_samples_never_select_many_components():
    for seed in range(50):
        x = np.random.default_rng(seed).gamma(3.0, 1.0, 20)
        best, _ = select_model(x)
        assert best.k <= 2


def test_selection_is_bit_reproducible():
    x = np.random.default_rng(7).gamma(4.0, 0.8, 800)
    a = select_model(x, max_components=4)
    b = select_model(x, max_components=4)
    assert a[1] == b[1]
    np.testing.assert_array_equal(a[0].params, b[0].params)


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        fit_mixture(np.arange(1.0, 20.0), "gaussian", 2)
    with pytest.raises(InsufficientSamples):
        select_model(np.arange(1.0, 9.0))
    with pytest.raises(ValueError):
        fit_mixture(np.r_[np.arange(1.0, 20.0), -1.0], "gamma", 1)


def test_collapse_can_raise():
    x = np.r_[np.full(40, 1.0), np.random.default_rng(8).normal(5.0, 1.0, 40)]
    with pytest.raises(CollapsedComponent):
        fit_mixture(x, "gaussian", 2, on_collapse="raise")
    m = fit_mixture(x, "gaussian", 2)
    assert m.collapsed and m.k == 1


# --------------------------------------------------------------------------
# bounds and density


def _gauss(*comps):
    w = [c[0] for c in comps]
    return DepthMixture("gaussian", np.array(w) / sum(w), [c[1:] for c in comps])


def test_integration_bounds_examples():
    assert integration_bounds(_gauss((1.0, 5.0, 0.5))) == (3.0, 7.0)
    assert integration_bounds(_gauss((1.0, 0.2, 0.2)))[0] == 0.001
    lo, hi = integration_bounds(_gauss((1.0, 2.0, 0.1), (1.0, 10.0, 1.0)))
    assert lo == pytest.approx(1.6, abs=1e-15) and hi == pytest.approx(14.0, abs=1e-15)


def test_gamma_bounds_use_moments():
    m = DepthMixture("gamma", [1.0], [[4.0, 0.5]])        # mean 2, std 1
    assert integration_bounds(m) == (pytest.approx(0.001), pytest.approx(6.0))
    m = DepthMixture("gamma", [1.0], [[100.0, 0.05]])     # mean 5, std 0.5
    assert integration_bounds(m) == (pytest.approx(3.0), pytest.approx(7.0))


def test_pdf_at_modes():
    m = _gauss((1.0, 3.0, 0.5))
    assert pdf(m, 3.0) == pytest.approx(1.0 / (0.5 * math.sqrt(2 * math.pi)), rel=1e-14)
    a, s = 3.0, 1.2
    g = DepthMixture("gamma", [1.0], [[a, s]])
    mode = (a - 1) * s
    closed = mode ** (a - 1) * math.exp(-mode / s) / (math.gamma(a) * s ** a)
    assert pdf(g, mode) == pytest.approx(closed, rel=1e-13)
    assert pdf(g, 0.0) == 0.0 and pdf(g, -1.0) == 0.0


def test_gaussian_pdf_symmetric():
    m = _gauss((1.0, 4.0, 0.7))
    d = np.linspace(0.0, 3.0, 31)
    np.testing.assert_allclose(pdf(m, 4.0 + d), pdf(m, 4.0 - d), rtol=1e-14)


def test_pdf_is_convex_combination():
    m = DepthMixture("gamma", [0.2, 0.5, 0.3], [[2.0, 0.5], [6.0, 0.6], [30.0, 0.2]])
    d = np.linspace(0.1, 12.0, 50)
    ref = sum(w * stats.gamma.pdf(d, a, scale=s) for w, (a, s) in m.components)
    np.testing.assert_allclose(pdf(m, d), ref, rtol=1e-12)
    np.testing.assert_allclose(np.exp(log_pdf(m, d)), ref, rtol=1e-12)


@pytest.mark.parametrize("m", [
    _gauss((0.3, 2.0, 0.2), (0.7, 8.0, 1.0)),
    DepthMixture("gamma", [0.4, 0.6], [[2.0, 1.5], [20.0, 0.3]]),
])
def test_pdf_normalized(m):
    total = sum(integrate.quad(lambda d: pdf(m, d), a, b, limit=200)[0]
                for a, b in ((0.0, 1.0), (1.0, 20.0), (20.0, np.inf)))
    if m.family == "gaussian":
        total += integrate.quad(lambda d: pdf(m, d), -np.inf, 0.0)[0]
    assert abs(total - 1.0) < 1e-6


@settings(max_examples=40)
@given(st.lists(st.tuples(st.floats(0.1, 1.0), st.floats(0.5, 20.0), st.floats(0.01, 3.0)),
                min_size=1, max_size=8))
def test_bounds_cover_gaussian_mass(comps):
    m = _gauss(*comps)
    lo, hi = integration_bounds(m)
    inside = sum(w * (stats.norm.cdf(hi, a, b) - stats.norm.cdf(lo, a, b)) for w, (a, b) in m.components)
    assert inside >= 0.999 or lo == 0.001


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_fit_invariants(seed, k):
    x = np.random.default_rng(seed).gamma(3.0, 1.0, 300)
    m = fit_mixture(x, "gaussian", k)
    assert abs(m.weights.sum() - 1.0) < 1e-9 and np.all(m.weights > 0)
    assert np.all(m.params[:, 1] > 0) and 1 <= m.k <= k
    assert m.bic == bic_value(m.log_likelihood, m.k, len(x))


def test_mixture_json_round_trip(tmp_path):
    m = fit_mixture(np.random.default_rng(9).normal(3.0, 0.5, 400), "gaussian", 2)
    save_mixture(tmp_path / "m.json", m)
    back = load_mixture(tmp_path / "m.json")
    np.testing.assert_array_equal(back.params, m.params)
    np.testing.assert_array_equal(back.weights, m.weights)
    assert back.bic == m.bic

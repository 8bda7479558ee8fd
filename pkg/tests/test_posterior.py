import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from conftest import random_dataset
from oracles import beta_mean_var, double_loop_moments
from psmgcomp.data import BinaryDataset, CellTable, Hyperparams, tabulate
from psmgcomp.parametric import LogisticModel, fit_main_effects
from psmgcomp.posterior import (
    EffectEstimate,
    EnumerationError,
    _MomentSums,
    bsat_posterior,
    chunk_layout,
    closed_form_mean,
    closed_form_moments,
    closed_form_variance,
    dirichlet_posterior,
    parametric_effect,
    pseudo_count_identity,
    psm_posterior,
    sample_effect,
)
from psmgcomp.streams import RandomStream


def _fixture(seed, n, p, density=0.5):
    d = random_dataset(np.random.default_rng(seed), n, p, density)
    return d, tabulate(d)


def _psm(t, d, b, phi=None, eps=None):
    phi = phi if phi is not None else t.n / 2**t.p
    eps = eps if eps is not None else t.n / 2**t.p
    g = fit_main_effects(d)
    return psm_posterior(t, g, Hyperparams(phi, eps, b)), dirichlet_posterior(t, eps)


def _full_params(op, gp):
    codes = np.arange(2**op.p)
    a1, b1, a0, b0 = op.arm_params(codes)
    return a1, b1, a0, b0, gp.weights(codes)


# ---------------------------------------------------------------------------
# outcome posteriors


def test_bsat_empty_cell_keeps_prior():
    t = tabulate(BinaryDataset(y=[1], x=[1], c=[[0, 0]]))
    op = bsat_posterior(t, 0.7)
    a1, b1, a0, b0 = op.arm_params(np.array([0, 3]))
    assert (a0[0], b0[0]) == (0.7, 0.7)  # control cell of an observed code
    assert (a1[1], b1[1], a0[1], b0[1]) == (0.7, 0.7, 0.7, 0.7)


def test_bsat_count_addition():
    d = BinaryDataset(y=[1, 1, 1, 0], x=[1, 1, 1, 1], c=[[1]] * 4)
    op = bsat_posterior(tabulate(d), 1.0)
    assert op.observed[(1, 1)] == (4.0, 2.0)


def test_bsat_cell_means_match_beta_sampling_oracle():
    d, t = _fixture(3, 50, 2)
    op = bsat_posterior(t, 0.5)
    gen = np.random.default_rng(99)
    for (x, code), (a, b) in op.observed.items():
        draws = gen.beta(a, b, size=1_000_000)
        mean, var = beta_mean_var(a, b)
        assert abs(draws.mean() - mean) < 3 * math.sqrt(var / draws.size)


def test_psm_hand_substitution():
    # n=16, p=1; code 1 treated cell holds y=3 of 4; theta_hat = 0.25 everywhere
    y = [1, 1, 1, 0] + [0] * 12
    x = [1] * 4 + [0] * 12
    c = [[1]] * 4 + [[0]] * 12
    t = tabulate(BinaryDataset(y=y, x=x, c=c))
    g = LogisticModel(float(logit(0.25)), 0.0, (0.0,))
    op = psm_posterior(t, g, Hyperparams(phi=1.0, epsilon=1.0, b=0.5))
    assert op.pseudo == 2.0
    a, b = op.observed[(1, 1)]
    assert math.isclose(a, 3.0, rel_tol=1e-15) and math.isclose(b, 3.0, rel_tol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(5, 120), st.floats(0.01, 5.0))
def test_psm_with_b_zero_is_bsat(seed, p, n, phi):
    d, t = _fixture(seed, n, p)
    g = fit_main_effects(d)
    psm = psm_posterior(t, g, Hyperparams(phi, 1.0, 0.0))
    bsat = bsat_posterior(t, phi)
    assert psm.observed == bsat.observed
    codes = np.arange(2**p)
    for u, v in zip(psm.arm_params(codes), bsat.arm_params(codes)):
        np.testing.assert_array_equal(u, v)


def test_psm_with_b_one_is_the_prior():
    d, t = _fixture(5, 60, 3)
    g = fit_main_effects(d)
    op = psm_posterior(t, g, Hyperparams(0.4, 0.4, 1.0))
    w = 60 / 16
    for (x, code), (a, b) in op.observed.items():
        th = g.predict(x, np.array([code]))[0]
        assert a == 0.4 + w * th and b == 0.4 + w * (1 - th)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.integers(2, 400),
       st.floats(0.0, 1.0), st.floats(0.01, 10.0))
def test_pseudo_count_identity_is_n(seed, p, n, b, phi):
    d, t = _fixture(seed, n, p)
    val = pseudo_count_identity(t, Hyperparams(phi, 1.0, b), fit_main_effects(d))
    assert abs(val - n) < 1e-9


@pytest.mark.parametrize("b", [0.0, 0.37, 1.0])
def test_pseudo_count_identity_examples(b):
    d, t = _fixture(1, 500, 6)
    assert abs(pseudo_count_identity(t, Hyperparams(1.0, 1.0, b), fit_main_effects(d)) - 500) < 1e-9


# ---------------------------------------------------------------------------
# Dirichlet posterior


def test_dirichlet_counts():
    d = BinaryDataset(y=[0, 0, 0], x=[1, 1, 1], c=[[0], [0], [1]])
    gp = dirichlet_posterior(tabulate(d), 0.3)
    assert gp.mapping == {0: 2, 1: 1}
    assert math.isclose(gp.a0, 3 + 2 * 0.3)


def test_dirichlet_prior_only():
    empty = np.zeros(0, dtype=np.int64)
    t = CellTable(n=0, p=2, codes=empty, y1=empty, n1=empty, y0=empty, n0=empty)
    gp = dirichlet_posterior(t, 1.0, "ATE")
    assert gp.weights(np.arange(4)).tolist() == [1.0] * 4
    assert gp.a0 == 4.0


def test_att_needs_treated_rows():
    t = tabulate(BinaryDataset(y=[1, 0], x=[0, 0], c=[[0], [1]]))
    with pytest.raises(ValueError):
        dirichlet_posterior(t, 1.0, "ATT")


def test_dirichlet_means_match_sampling_oracle():
    _, t = _fixture(7, 100, 2)
    gp = dirichlet_posterior(t, 0.25)
    params = gp.weights(np.arange(4))
    draws = np.random.default_rng(1).dirichlet(params, size=1_000_000)
    a0 = gp.a0
    mean = params / a0
    sd = np.sqrt(params * (a0 - params) / (a0 * a0 * (a0 + 1)))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * sd / 1000)


def test_ate_uses_both_arms():
    d, t = _fixture(2, 80, 3)
    gp = dirichlet_posterior(t, 1.0, "ATE")
    assert math.isclose(gp.a0, 80 + 8)


# ---------------------------------------------------------------------------
# closed-form moments


def test_bsat_without_data_has_zero_mean():
    t = tabulate(BinaryDataset(y=[1], x=[1], c=[[0, 0, 0]]))
    empty = np.zeros(0, dtype=np.int64)
    no_data = CellTable(n=0, p=3, codes=empty, y1=empty, n1=empty, y0=empty, n0=empty)
    assert closed_form_mean(bsat_posterior(no_data, 1.0), dirichlet_posterior(no_data, 1.0, "ATE")) == 0.0
    assert t.n == 1


def test_model_without_treatment_effect_gives_zero_mean():
    d, t = _fixture(4, 40, 3)
    g = LogisticModel(0.3, 0.0, (0.5, -0.2, 0.1))
    op = psm_posterior(t, g, Hyperparams(0.5, 0.5, 1.0))
    assert closed_form_mean(op, dirichlet_posterior(t, 0.5)) == 0.0


def test_single_component_variance_reduces_to_contrast_variance():
    sums = _MomentSums(a0=5.0)
    sums.add(np.array([5.0]), np.array([0.2]), np.array([0.03]))
    assert math.isclose(sums.mean, 0.2)
    assert math.isclose(sums.variance, 0.03, rel_tol=1e-14)


@pytest.mark.parametrize("mode", ["BSAT", "PSM"])
def test_double_loop_oracle_p2(mode):
    d, t = _fixture(8, 30, 2)
    op, gp = _psm(t, d, 0.4) if mode == "PSM" else (bsat_posterior(t, 0.6), dirichlet_posterior(t, 0.3))
    m, v = double_loop_moments(*_full_params(op, gp))
    cm, cv = closed_form_moments(op, gp)
    assert abs(cm - m) < 1e-12 and abs(cv - v) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(5, 300), st.floats(0.0, 1.0))
def test_double_loop_oracle_property(seed, p, n, b):
    d, t = _fixture(seed, n, p)
    op, gp = _psm(t, d, b)
    m, v = double_loop_moments(*_full_params(op, gp))
    assert abs(closed_form_mean(op, gp) - m) < 1e-12
    assert abs(closed_form_variance(op, gp) - v) < 1e-12


def test_bsat_missing_cell_shortcut_matches_enumeration():
    d, t = _fixture(12, 60, 8)
    bsat = bsat_posterior(t, 0.3)
    psm0 = psm_posterior(t, fit_main_effects(d), Hyperparams(0.3, 0.3, 0.0))
    gp = dirichlet_posterior(t, 0.3)
    a, b = closed_form_moments(bsat, gp), closed_form_moments(psm0, gp)
    assert abs(a[0] - b[0]) < 1e-14
    assert math.isclose(a[1], b[1], rel_tol=1e-12)


# ---------------------------------------------------------------------------
# Monte Carlo


def test_draws_match_closed_form_p6():
    d, t = _fixture(21, 200, 6)
    op, gp = _psm(t, d, 0.5)
    est = sample_effect(op, gp, draws=200_000, rng=RandomStream(4))
    se = est.sd / math.sqrt(est.draws.size)
    assert abs(est.mean - est.closed_mean) < 4 * se
    assert abs(est.draws.var(ddof=1) / est.closed_sd**2 - 1) < 0.05


def test_draws_match_closed_form_p4_million():
    d, t = _fixture(22, 80, 4)
    op, gp = _psm(t, d, 0.3)
    est = sample_effect(op, gp, draws=1_000_000, rng=RandomStream(5))
    se = est.sd / 1000
    assert abs(est.mean - est.closed_mean) < 4 * se
    assert abs(est.draws.var(ddof=1) / est.closed_sd**2 - 1) < 0.05


def test_identical_arms_give_symmetric_draws():
    rng = np.random.default_rng(3)
    half = random_dataset(rng, 40, 3)
    d = BinaryDataset(y=np.tile(half.y, 2), x=np.r_[np.zeros(40), np.ones(40)], c=np.tile(half.c, (2, 1)))
    t = tabulate(d)
    est = sample_effect(bsat_posterior(t, 0.5), dirichlet_posterior(t, 0.5), draws=100_000, rng=1)
    assert est.closed_mean == 0.0
    assert abs(est.mean) < 3 * est.sd / math.sqrt(est.draws.size)


def test_draws_are_deterministic_and_thread_invariant():
    d, t = _fixture(6, 150, 11)
    op, gp = _psm(t, d, 0.5)
    # enough cells for several chunks
    assert len(chunk_layout(3000, 2**11)) == 3
    a = sample_effect(op, gp, 3000, RandomStream(11), workers=1, closed_form=False)
    b = sample_effect(op, gp, 3000, RandomStream(11), workers=3, closed_form=False)
    np.testing.assert_array_equal(a.draws, b.draws)
    c = sample_effect(op, gp, 10, RandomStream(12), closed_form=False)
    assert not np.array_equal(a.draws[:10], c.draws)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.floats(1e-4, 3.0))
def test_draws_inside_unit_interval(seed, p, eps):
    d, t = _fixture(seed, 30, p)
    op, gp = _psm(t, d, 0.5, phi=eps, eps=eps)
    est = sample_effect(op, gp, 2000, RandomStream(seed), closed_form=False)
    assert np.all(np.abs(est.draws) <= 1.0)
    assert np.all(np.isfinite(est.draws))


def test_chunk_layout_covers_all_draws():
    for draws, cells in [(1, 1), (10_000, 4096), (777, 1 << 20), (5, 3)]:
        layout = chunk_layout(draws, cells)
        assert sum(m for _, m in layout) == draws
        assert [s for s, _ in layout] == list(np.cumsum([0] + [m for _, m in layout[:-1]]))


def test_enumeration_guard():
    rng = np.random.default_rng(0)
    d = random_dataset(rng, 20, 25)
    t = tabulate(d)
    op = bsat_posterior(t, 0.1)
    with pytest.raises(EnumerationError):
        sample_effect(op, dirichlet_posterior(t, 0.1), 10)


def test_mismatched_posteriors():
    _, t2 = _fixture(1, 20, 2)
    _, t3 = _fixture(1, 20, 3)
    with pytest.raises(ValueError):
        closed_form_mean(bsat_posterior(t2, 1.0), dirichlet_posterior(t3, 1.0))


def test_interval_and_summary():
    est = EffectEstimate.from_draws(np.linspace(-1, 1, 1001), "X")
    lo, hi = est.interval(0.95)
    assert math.isclose(lo, -0.95) and math.isclose(hi, 0.95)
    assert math.isclose(est.mean, 0.0, abs_tol=1e-15)


# ---------------------------------------------------------------------------
# parametric plug-in


def test_parametric_effect_by_hand():
    d = BinaryDataset(y=[1, 0, 1, 0], x=[1, 1, 1, 0], c=[[0], [0], [1], [1]])
    t = tabulate(d)
    g = LogisticModel(-0.5, 1.0, (0.8,))
    contrast = g.predict(1, np.array([0, 1])) - g.predict(0, np.array([0, 1]))
    expected = (2 * contrast[0] + 1 * contrast[1]) / 3
    est = parametric_effect(t, g, "ATT")
    assert math.isclose(est.mean, expected, rel_tol=1e-14)
    assert est.draws.size == 0 and math.isnan(est.sd)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import expit

from conftest import calibrated
from oracles import orthant_probability, simulate_truth
from psmgcomp.data import tabulate
from psmgcomp.dgp import (
    CalibrationError,
    CalibrationTarget,
    DgpSpec,
    QuadratureError,
    calibrate,
    cell_probabilities,
    design_scenario,
    is_calibrated,
    mu1,
    pattern_probs,
    popcounts,
    population_meb,
    read_scenario,
    simulate_confounders,
    simulate_dataset,
    spec_from_scenario,
    true_att,
    truth,
    truth_mc,
    write_scenario,
)


def _spec(p, rho=0.3, omega=0.0, beta2=0.0, **kw):
    vec = lambda v: tuple(v for _ in range(p)) if np.isscalar(v) else tuple(v)  # noqa: E731
    return DgpSpec(p=p, beta0=kw.pop("beta0", -1.0), beta1=vec(kw.pop("beta1", 0.4)),
                   beta2=vec(beta2), omega=vec(omega), rho_c=rho, **kw)


# ---------------------------------------------------------------------------
# confounder distribution


def test_independent_cells_are_uniform():
    f = cell_probabilities(_spec(6, rho=0.0)).f
    np.testing.assert_array_equal(f, np.full(64, 2.0**-6))


def test_two_bit_orthant_probability():
    f = cell_probabilities(_spec(2, rho=0.3)).f
    assert abs(f[3] - orthant_probability(0.3)) < 1e-8
    assert abs(orthant_probability(0.3) - 0.29847) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 14), st.floats(0.0, 0.45))
def test_cell_probabilities_normalize_and_are_exchangeable(p, rho):
    f = cell_probabilities(_spec(p, rho=rho)).f
    assert abs(f.sum() - 1) < 1e-10
    k = popcounts(p)
    for j in range(p + 1):
        same = f[k == j]
        assert np.ptp(same) <= 1e-12


def test_quadrature_check_rejects_extreme_correlation():
    # a steep latent factor needs more nodes than the 64/128 check can certify
    with pytest.raises(QuadratureError):
        pattern_probs(4, 0.9)
    with pytest.raises(QuadratureError):
        cell_probabilities(_spec(4, rho=0.9))


def test_treated_distribution_normalizes():
    probs = cell_probabilities(_spec(5, omega=(1.0, -0.5, 0.3, 0.0, 2.0)))
    assert abs(probs.f_treated.sum() - 1) < 1e-12
    np.testing.assert_allclose(probs.f_treated, probs.f * probs.propensity
                               / np.dot(probs.f, probs.propensity), rtol=1e-12)


# ---------------------------------------------------------------------------
# simulation


def test_orthant_frequency_matches_closed_form():
    c = simulate_confounders(_spec(3, rho=0.3), 1_000_000, rng=1)
    both = (c[:, 0] & c[:, 1]).astype(float)
    pr = orthant_probability(0.3)
    assert abs(both.mean() - pr) < 3 * math.sqrt(pr * (1 - pr) / len(both))
    assert abs(c.mean() - 0.5) < 3 * math.sqrt(0.25 / c.size) * 3  # columns are correlated


def test_independent_columns_at_zero_correlation():
    c = simulate_confounders(_spec(2, rho=0.0), 100_000, rng=2).astype(float)
    r = np.corrcoef(c[:, 0], c[:, 1])[0, 1]
    assert abs(r) < 3 / math.sqrt(len(c))


def test_near_one_correlation_gives_identical_columns():
    c = simulate_confounders(_spec(5, rho=0.99999), 10_000, rng=3)
    agree = np.all(c == c[:, :1], axis=1)
    assert agree.mean() > 0.98


def test_no_confounding_gives_fair_treatment():
    d = simulate_dataset(_spec(4, omega=0.0), 200_000, rng=4)
    assert abs(d.x.mean() - 0.5) < 3 * math.sqrt(0.25 / d.n)
    # X independent of C: the treated share is the same with and without C_1
    on = d.c[:, 0] == 1
    gap = d.x[on].mean() - d.x[~on].mean()
    assert abs(gap) < 3 * math.sqrt(0.25 / on.sum() + 0.25 / (~on).sum())


def test_cell_frequencies_match_probabilities():
    spec = _spec(4, omega=(0.8, -0.4, 0.2, 1.0), rho=0.3)
    d = simulate_dataset(spec, 200_000, rng=5)
    probs = cell_probabilities(spec)
    counts = np.bincount(d.codes, minlength=16)
    # pooled chi-square on the 16 confounder cells
    chi2 = np.sum((counts - d.n * probs.f) ** 2 / (d.n * probs.f))
    assert chi2 < stats.chi2.ppf(0.999, 15)


def test_simulation_is_reproducible():
    spec = _spec(3)
    assert simulate_dataset(spec, 500, rng=7) == simulate_dataset(spec, 500, rng=7)
    assert simulate_dataset(spec, 500, rng=7) != simulate_dataset(spec, 500, rng=8)


def test_null_effect_simulated_contrast_is_zero():
    spec = _spec(4, omega=(0.5, 0.5, -0.5, 0.0)).resolved()
    m = truth_mc(spec, n=1_000_000, rng=3, meb_rows=20_000)
    assert abs(m.delta_t) <= 3 * m.se + 1e-15


# ---------------------------------------------------------------------------
# mu1


def test_mu1_without_confounding_is_one_half():
    np.testing.assert_allclose(mu1(_spec(6, omega=0.0)), 0.5, atol=1e-12)


def test_mu1_matches_simulation():
    spec = _spec(4, omega=(1.5, -1.0, 0.5, 0.0))
    d = simulate_dataset(spec, 1_000_000, rng=6)
    ct = d.c[d.x == 1].astype(float)
    se = ct.std(axis=0) / math.sqrt(len(ct))
    assert np.all(np.abs(ct.mean(axis=0) - mu1(spec)) < 3 * se)


def test_mu1_large_omega_limit():
    # With no intercept P(X=1 | C_1=0) stays at expit(0) = 1/2 while
    # P(X=1 | C_1=1) -> 1, so the treated share of C_1 tends to 2/3.
    spec = _spec(3, rho=0.0, omega=(10.0, 0.0, 0.0))
    m = mu1(spec)
    expected = 0.5 * expit(10.0) / (0.5 * expit(10.0) + 0.25)
    assert abs(m[0] - expected) < 1e-12
    assert m[0] > 0.666
    np.testing.assert_allclose(m[1:], 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# truth


def test_null_effect_att_is_zero():
    assert true_att(_spec(6, omega=(0.5, -1, 0.2, 0.3, 1.0, -0.4))) == 0.0


def test_well_specified_model_has_no_bias():
    spec = _spec(5, omega=(0.5, -1, 0.2, 0.3, 1.0), lambda0=0.8)
    assert abs(population_meb(spec)) < 1e-6


def test_truth_summary_fields():
    spec = _spec(4, omega=(0.5, -1, 0.2, 0.3), beta2=(1.0, -1.0, 0.5, 0.0), lambda0=1.0, lambda1=0.4)
    t = truth(spec)
    assert -1 <= t.delta_t <= 1
    assert t.delta_t == true_att(spec)
    assert t.meb == population_meb(spec)
    assert abs(t.cell_probs.f.sum() - 1) < 1e-10


def test_att_matches_direct_sum():
    spec = _spec(3, omega=(0.5, -1, 0.2), beta2=(1.0, -1.0, 0.5), lambda0=0.7, lambda1=0.3).resolved()
    probs = cell_probabilities(spec)
    mu = np.asarray(spec.mu1)
    total = 0.0
    for code in range(8):
        c = np.array([(code >> j) & 1 for j in range(3)], dtype=float) - mu
        eta0 = spec.beta0 + c @ np.asarray(spec.beta1) + c @ (np.asarray(spec.beta2) + spec.lambda1)
        eta1 = spec.beta0 + spec.lambda0 + c @ np.asarray(spec.beta1) + c @ (np.asarray(spec.beta2) - spec.lambda1)
        total += probs.f_treated[code] * (expit(eta1) - expit(eta0))
    assert abs(true_att(spec) - total) < 1e-14


@pytest.mark.slow
def test_truth_matches_brute_force_simulation():
    spec = calibrated(4, 0.1).spec
    att, att_se, meb, meb_se = simulate_truth(spec, 10_000_000, seed=11)
    assert abs(att - true_att(spec)) < 3 * att_se
    assert abs(meb - population_meb(spec)) < 3 * meb_se


def test_monte_carlo_truth_reports_standard_error():
    spec = calibrated(4, -0.1).spec
    m = truth_mc(spec, n=2_000_000, rng=4, meb_rows=200_000)
    assert m.se > 0
    assert abs(m.delta_t - true_att(spec)) < 3 * m.se


# ---------------------------------------------------------------------------
# calibration


def test_null_target_is_found_at_the_origin():
    spec = _spec(4, omega=(0.5, -1, 0.2, 0.3))
    res = calibrate(spec, CalibrationTarget(0.0, 0.0))
    assert (res.lambda0, res.lambda1) == (0.0, 0.0)
    assert res.attempts == 1


@pytest.mark.parametrize("meb", [-0.1, 0.1])
@pytest.mark.parametrize("p", [4, 8])
def test_design_grid_rows_calibrate(p, meb):
    res = calibrated(p, meb)
    assert abs(res.delta_t - 0.3) < 0.005
    assert abs(res.meb - meb) < 0.005
    assert res.attempts <= 21
    # the returned spec reproduces the achieved values
    assert abs(true_att(res.spec) - res.delta_t) < 1e-12


def test_att_increases_with_lambda0():
    res = calibrated(4, 0.1)
    h = 1e-4
    up = true_att(res.spec.with_lambdas(res.lambda0 + h, res.lambda1))
    down = true_att(res.spec.with_lambdas(res.lambda0 - h, res.lambda1))
    assert (up - down) / (2 * h) > 0
    bumped = true_att(res.spec.with_lambdas(res.lambda0 + 0.1, res.lambda1))
    assert abs(bumped - res.delta_t) > 1e-3


def test_infeasible_target_raises_with_best_point():
    spec = _spec(2, omega=(0.2, 0.1))
    with pytest.raises(CalibrationError) as err:
        calibrate(spec, CalibrationTarget(0.3, 0.4, max_restarts=2))
    assert err.value.best is not None
    assert err.value.best.attempts <= 3


def test_target_validation():
    with pytest.raises(ValueError):
        CalibrationTarget(tolerance=0.0)


# ---------------------------------------------------------------------------
# specs and scenario files


def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(3, rho=1.0)
    with pytest.raises(ValueError):
        DgpSpec(p=2, beta0=0.0, beta1=(0.0,), beta2=(0.0, 0.0), omega=(0.0, 0.0))
    with pytest.raises(ValueError):
        _spec(2, mu1=(0.5, 1.0))


def test_scenario_round_trip(tmp_path):
    scen = design_scenario(8, -0.1, seed=3)
    assert not is_calibrated(scen)
    path = tmp_path / "scen.json"
    write_scenario(scen, path)
    back = read_scenario(path)
    assert back == scen
    a, b = spec_from_scenario(scen), spec_from_scenario(back)
    assert a == b
    lo, hi = scen["beta1_range"]
    assert all(lo <= v <= hi for v in a.beta1)


def test_scenario_missing_key():
    scen = design_scenario(4, 0.1)
    del scen["omega_range"]
    with pytest.raises(KeyError):
        spec_from_scenario(scen)


def test_simulated_table_has_p_columns():
    spec = spec_from_scenario(design_scenario(12, 0.1, seed=8))
    t = tabulate(simulate_dataset(spec, 300, rng=0))
    assert t.p == 12 and t.n == 300

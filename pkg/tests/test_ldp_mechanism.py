import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpfed.errors import CapacityError, ConfigError, DomainError, NumericError
from ldpfed.ldp_mechanism import (
    DiscretizationSpec,
    EmMechanism,
    discretize,
    discretize_array,
    em_log_pmf,
    em_pmf,
    em_prob,
    em_sample,
    em_sample_array,
    em_tail_mass,
    format_pmf_table,
    perturb_layer,
    total_variation,
    undiscretize,
    verify_cldp_bound,
)


def brute_pmf(bound, alpha, v):
    """Direct evaluation of exp(-alpha |v - y| / 2) / sum_z exp(-alpha |v - z| / 2)."""
    ys = range(-bound, bound + 1)
    w = [math.exp(-alpha * abs(v - y) / 2) for y in ys]
    z = math.fsum(w)
    return np.array([x / z for x in w])


def test_discretize_examples():
    spec = DiscretizationSpec(1, 2)
    assert discretize(0.123456, spec) == 12
    assert discretize(5.0, spec) == 100
    assert discretize(-0.005, spec) == -1
    assert discretize(0.005, spec) == 1


def test_discretize_non_finite():
    with pytest.raises(NumericError):
        discretize(float("nan"), DiscretizationSpec(1, 2))
    with pytest.raises(NumericError, match="index 2"):
        discretize_array([0.0, 1.0, float("inf")], DiscretizationSpec(1, 2))


def test_discretize_array_matches_scalar():
    spec = DiscretizationSpec("0.5", 3)
    xs = np.random.default_rng(0).normal(scale=0.4, size=500)
    xs = np.concatenate([xs, [0.0005, -0.0005, 0.0015, -2.5, 2.5]])
    assert discretize_array(xs, spec).tolist() == [discretize(float(x), spec) for x in xs]


def test_undiscretize_examples():
    spec = DiscretizationSpec(1, 2)
    assert undiscretize(12, spec) == 0.12
    assert undiscretize(0, spec) == 0.0
    with pytest.raises(DomainError):
        undiscretize(101, spec)


@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 6), st.integers(1, 20))
def test_round_trip_error_bound(x, rho, c):
    spec = DiscretizationSpec(c, rho)
    back = undiscretize(discretize(x, spec), spec)
    clamped = min(max(x, -c), c)
    assert abs(back - clamped) <= 0.5 * 10.0**-rho * (1 + 1e-9) + 1e-12


@given(st.integers(0, 4), st.integers(1, 5), st.data())
def test_discretize_idempotent_on_grid(rho, c, data):
    spec = DiscretizationSpec(c, rho)
    z = data.draw(st.integers(-spec.bound, spec.bound))
    assert discretize(undiscretize(z, spec), spec) == z


@pytest.mark.parametrize("c,rho", [("0.005", 2), (0, 1), (-1, 0), (1, -1)])
def test_spec_rejects_non_integral_universe(c, rho):
    with pytest.raises(ConfigError):
        DiscretizationSpec(c, rho)


def test_spec_accepts_exact_decimal_multiple():
    assert DiscretizationSpec("0.05", 2).bound == 5
    assert DiscretizationSpec(0.3, 1).bound == 3
    assert DiscretizationSpec(10, 10).size == 2 * 10**11 + 1


def test_em_pmf_three_point_example():
    pmf = em_pmf(EmMechanism(DiscretizationSpec(1, 0), 2.0), 0)
    assert pmf.values.tolist() == [-1, 0, 1]
    assert np.allclose(pmf.probs, [0.21194156, 0.57611688, 0.21194156], atol=5e-9)
    assert np.allclose(pmf.probs, brute_pmf(1, 2.0, 0), rtol=1e-14)


def test_em_pmf_large_alpha_concentrates():
    pmf = em_pmf(EmMechanism(DiscretizationSpec(10, 0), 200.0), 3)
    assert pmf.probs[3 + 10] > 0.99


@settings(max_examples=40)
@given(st.integers(1, 60), st.floats(1e-3, 50), st.data())
def test_em_pmf_matches_brute_force_and_closed_form(bound, alpha, data):
    v = data.draw(st.integers(-bound, bound))
    mech = EmMechanism(DiscretizationSpec(bound, 0), alpha)
    pmf = em_pmf(mech, v)
    assert abs(pmf.probs.sum() - 1) <= 1e-12
    assert np.allclose(pmf.probs, brute_pmf(bound, alpha, v), rtol=1e-10, atol=1e-300)
    assert np.allclose(em_prob(mech, v, pmf.values), pmf.probs, rtol=1e-9, atol=1e-300)


@given(st.integers(1, 50), st.floats(1e-3, 20))
def test_em_pmf_symmetric_at_zero(bound, alpha):
    p = em_pmf(EmMechanism(DiscretizationSpec(bound, 0), alpha), 0).probs
    assert np.allclose(p, p[::-1], rtol=1e-13, atol=0)


@given(st.integers(1, 50), st.floats(1e-3, 20), st.data())
def test_em_pmf_monotone_in_distance(bound, alpha, data):
    v = data.draw(st.integers(-bound, bound))
    pmf = em_pmf(EmMechanism(DiscretizationSpec(bound, 0), alpha), v)
    dist = np.abs(pmf.values - v)
    order = np.argsort(dist, kind="stable")
    assert np.all(np.diff(pmf.probs[order]) <= 1e-300)


def test_em_pmf_capacity_guard():
    with pytest.raises(CapacityError):
        em_pmf(EmMechanism(DiscretizationSpec(10, 10), 1.0), 0)


def test_tiny_alpha_closed_form_matches_materialized():
    mech = EmMechanism(DiscretizationSpec(50, 0), 1e-10)
    pmf = em_pmf(mech, 7)
    assert np.allclose(em_prob(mech, 7, pmf.values), pmf.probs, rtol=1e-12)
    assert np.allclose(pmf.probs, 1 / 101, rtol=1e-7)


def test_tail_mass_matches_materialized():
    mech = EmMechanism(DiscretizationSpec(40, 0), 0.3)
    pmf = em_pmf(mech, -35)
    expected = pmf.probs[np.abs(pmf.values + 35) > 10].sum()
    assert em_tail_mass(mech, -35, 10) == pytest.approx(expected, rel=1e-10)


def test_sample_out_of_universe():
    mech = EmMechanism(DiscretizationSpec(1, 0), 1.0)
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        em_sample(mech, 2, rng)
    with pytest.raises(DomainError):
        em_sample_array(mech, np.array([0, -2]), rng)


def test_sampler_three_point_tv():
    mech = EmMechanism(DiscretizationSpec(1, 0), 2.0)
    rng = np.random.default_rng(1)
    draws = em_sample_array(mech, np.zeros(10**6, dtype=np.int64), rng)
    emp = np.bincount(draws + 1, minlength=3) / draws.size
    assert total_variation(emp, em_pmf(mech, 0).probs) < 0.01


def test_scalar_sampler_matches_pmf():
    mech = EmMechanism(DiscretizationSpec(6, 0), 0.7)
    rng = np.random.default_rng(2)
    draws = np.array([em_sample(mech, -4, rng) for _ in range(100_000)])
    emp = np.bincount(draws + 6, minlength=13) / draws.size
    assert total_variation(emp, em_pmf(mech, -4).probs) < 0.01


def test_large_alpha_returns_input():
    mech = EmMechanism(DiscretizationSpec(5, 0), 200.0)
    rng = np.random.default_rng(3)
    for v in (-5, 0, 4):
        draws = em_sample_array(mech, np.full(10**4, v), rng)
        assert np.mean(draws == v) > 0.99


def test_huge_universe_samples_stay_in_bounds():
    mech = EmMechanism(DiscretizationSpec(10, 10), 1e-9)
    rng = np.random.default_rng(4)
    u = mech.spec.bound
    v = np.array([-u, -u + 1, 0, u - 1, u] * 2000)
    out = em_sample_array(mech, v, rng)
    assert out.min() >= -u and out.max() <= u
    assert -u <= em_sample(mech, u, rng) <= u


def test_sampler_chi_square_against_pmf():
    """Goodness of fit with a test that accounts for sampling noise."""
    from scipy.stats import chisquare

    mech = EmMechanism(DiscretizationSpec(20, 0), 0.2)
    rng = np.random.default_rng(5)
    draws = em_sample_array(mech, np.full(200_000, 13), rng)
    observed = np.bincount(draws + 20, minlength=41)
    expected = em_pmf(mech, 13).probs * draws.size
    assert chisquare(observed, expected).pvalue > 1e-4


def test_perturb_layer_examples():
    mech = EmMechanism(DiscretizationSpec(1, 2), 200.0)
    rng = np.random.default_rng(6)
    empty = perturb_layer([], mech, rng, "dense0", 3)
    assert empty.integer_values.size == 0 and empty.layer_name == "dense0" and empty.round == 3
    values = np.round(np.random.default_rng(7).uniform(-1, 1, size=10_000), 2)
    out = perturb_layer(values, mech, rng)
    assert np.mean(out.integer_values == discretize_array(values, mech.spec)) > 0.99
    noisy = perturb_layer(values * 5, EmMechanism(mech.spec, 0.01), rng)
    assert noisy.integer_values.min() >= -100 and noisy.integer_values.max() <= 100
    assert noisy.alpha_p == 0.01


def test_perturb_layer_reports_bad_index():
    mech = EmMechanism(DiscretizationSpec(1, 2), 1.0)
    with pytest.raises(NumericError, match="index 1"):
        perturb_layer([0.1, float("nan")], mech, np.random.default_rng(0))


@pytest.mark.parametrize("alpha", [1.0, 0.01])
def test_cldp_bound_size_21(alpha):
    report = verify_cldp_bound(EmMechanism(DiscretizationSpec(10, 0), alpha))
    assert report.triples == 21**3
    assert report.max_slack <= 1e-9
    assert report.holds


def test_cldp_same_input_ratio_is_one():
    mech = EmMechanism(DiscretizationSpec(5, 0), 0.8)
    lp = em_log_pmf(mech, 2)
    assert np.all(lp - lp == 0.0)


def test_cldp_bound_independent_oracle():
    """Triple loop over plain-float probabilities for a small universe."""
    bound, alpha = 4, 1.3
    probs = {v: brute_pmf(bound, alpha, v) for v in range(-bound, bound + 1)}
    worst = -math.inf
    for v1 in probs:
        for v2 in probs:
            for yi in range(2 * bound + 1):
                worst = max(worst, math.log(probs[v1][yi] / probs[v2][yi]) - alpha * abs(v1 - v2))
    report = verify_cldp_bound(EmMechanism(DiscretizationSpec(bound, 0), alpha))
    assert report.max_slack == pytest.approx(worst, abs=1e-12)


def test_cldp_capacity():
    with pytest.raises(CapacityError):
        verify_cldp_bound(EmMechanism(DiscretizationSpec(5000, 0), 1.0))


def test_pmf_table_format():
    text = format_pmf_table(em_pmf(EmMechanism(DiscretizationSpec(1, 0), 2.0), 0))
    lines = text.splitlines()
    assert lines[0] == "value\tprobability"
    assert lines[1].startswith("-1\t0.2119415")
    assert len(lines) == 4

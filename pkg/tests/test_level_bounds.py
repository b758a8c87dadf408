"""Unit tests for the variance term and the finite-sample level bound.

Oracles used here are independent of the implementation's ratio recurrence:
exact rational summation of the defining series for small instances, and a
direct log-gamma summation with a bounded scalar minimizer for large ones.
"""

import math
from fractions import Fraction

import pytest
from scipy import optimize

from shifttest import finite_level_bound, max_m_for_level, v_nm
from shifttest.level_bounds import hypergeometric_term_total


def _v_rational(n: int, m: int, K: Fraction) -> Fraction:
    total = Fraction(0)
    for ell in range(1, m + 1):
        c = math.comb(m, ell) * math.comb(n - m, m - ell)
        if c:
            total += c * (K**ell - 1)
    return total / math.comb(n, m)


def _log_binom(a: int, b: int) -> float:
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def _v_lgamma(n: int, m: int, K: float) -> float:
    log_k = math.log(K)
    base = _log_binom(n, m)
    terms = []
    for ell in range(1, m + 1):
        if m - ell > n - m:
            continue
        t = ell * log_k
        log_kpow = t if t > 36.0 else math.log(math.expm1(t))
        terms.append(_log_binom(m, ell) + _log_binom(n - m, m - ell) - base + log_kpow)
    peak = max(terms)
    return math.exp(peak + math.log(sum(math.exp(t - peak) for t in terms)))


def _bound_oracle(n: int, m: int, K: float, alpha_phi: float) -> float:
    v = _v_lgamma(n, m, K)
    res = optimize.minimize_scalar(
        lambda d: alpha_phi / (1.0 - d) + v / (v + d * d),
        bounds=(1e-12, 1.0 - 1e-12),
        method="bounded",
        options={"xatol": 1e-13},
    )
    return min(1.0, float(res.fun))


# ---------------------------------------------------------------------------
# variance term
# ---------------------------------------------------------------------------


def test_hand_value_small_instance():
    # n=4, m=2, K=2: [C(2,1)C(2,1)(2-1) + C(2,2)C(2,0)(4-1)] / C(4,2) = 7/6.
    assert math.isclose(v_nm(4, 2, 2.0), 7.0 / 6.0, rel_tol=1e-12)


def test_single_draw_closed_form():
    # m=1 collapses to (K-1)/n.
    for n in (3, 10, 97):
        for K in (1.5, 3.0, 12.0):
            assert math.isclose(v_nm(n, 1, K), (K - 1.0) / n, rel_tol=1e-12)
    assert math.isclose(v_nm(10, 1, 3.0), 0.2, rel_tol=1e-14)


def test_unit_second_moment_gives_exact_zero():
    for n, m in ((5, 2), (100, 37), (1000, 500)):
        assert v_nm(n, m, 1.0) == 0.0


def test_recurrence_matches_rational_summation_on_a_sweep():
    for K_float in (1.1, 2.0, 10.0):
        K_frac = Fraction(K_float)
        powers_checked = 0
        for n in range(2, 25):
            for m in range(1, min(n, 12) + 1):
                exact = float(_v_rational(n, m, K_frac))
                got = v_nm(n, m, K_float)
                assert math.isclose(got, exact, rel_tol=1e-10), (n, m, K_float)
                powers_checked += 1
        assert powers_checked > 200


def test_monotone_in_the_second_moment():
    values = [v_nm(50, 10, K) for K in (1.0, 1.2, 1.5, 2.0, 5.0, 20.0)]
    assert values[0] == 0.0
    assert all(a < b for a, b in zip(values, values[1:]))


def test_large_m_starts_at_the_first_admissible_summand():
    # m > n/2 makes the early binomial factors vanish; compare to rationals.
    for n, m in ((10, 7), (12, 11), (9, 9)):
        exact = float(_v_rational(n, m, Fraction(2)))
        assert math.isclose(v_nm(n, m, 2.0), exact, rel_tol=1e-10)


def test_huge_population_is_stable():
    # Frozen from the log-gamma oracle; that oracle carries ~1e-6 relative
    # noise at this scale, so the comparison tolerance matches it.
    got = v_nm(10**9, 31623, 2.0)
    assert math.isfinite(got) and got > 0.0
    assert math.isclose(got, 1.71823420152614, rel_tol=1e-6)


def test_overflow_is_reported_as_infinity():
    assert v_nm(2000, 1000, 10.0) == math.inf


def test_variance_term_validation():
    with pytest.raises(ValueError, match="1 <= m <= n"):
        v_nm(4, 5, 2.0)
    with pytest.raises(ValueError, match="K must be >= 1"):
        v_nm(4, 2, 0.5)


def test_hypergeometric_identity_total():
    for n, m in ((10, 3), (60, 30), (1000, 137)):
        assert abs(hypergeometric_term_total(n, m) - 1.0) <= 1e-11


# ---------------------------------------------------------------------------
# minimized level bound
# ---------------------------------------------------------------------------


def test_bound_frozen_oracle_point():
    lb = finite_level_bound(1000, 30, 2.0, 0.05)
    assert math.isclose(lb.v_nm, 1.398903255810718, rel_tol=1e-10)
    assert math.isclose(lb.bound, 0.9072509123780823, rel_tol=1e-10)
    assert abs(lb.delta_star - 0.6982016016106127) < 1e-6
    assert lb.n == 1000 and lb.m == 30 and lb.K == 2.0 and lb.alpha_phi == 0.05


def test_bound_minimum_matches_independent_minimizer():
    for n, m, K in ((200, 9, 1.5), (1000, 30, 2.0), (5000, 70, 1.2)):
        mine = finite_level_bound(n, m, K, 0.05).bound
        assert math.isclose(mine, _bound_oracle(n, m, K, 0.05), rel_tol=1e-9)


def test_bound_for_unit_second_moment_is_the_test_level():
    lb = finite_level_bound(777, 33, 1.0, 0.07)
    assert lb.bound == 0.07
    assert lb.v_nm == 0.0
    assert lb.delta_star == 0.0


def test_bound_caps_at_one():
    lb = finite_level_bound(2000, 1000, 10.0, 0.05)
    assert lb.bound == 1.0


def test_bound_to_dict_round_trip():
    d = finite_level_bound(100, 5, 2.0, 0.05).to_dict()
    assert set(d) == {"n", "m", "K", "alpha_phi", "v_nm", "delta_star", "bound"}
    assert d["n"] == 100 and d["m"] == 5


def test_bound_validation():
    with pytest.raises(ValueError, match=r"alpha_phi must be in \(0,1\)"):
        finite_level_bound(10, 2, 2.0, 1.5)


# ---------------------------------------------------------------------------
# largest feasible resample size
# ---------------------------------------------------------------------------


def test_max_m_frozen_value():
    assert max_m_for_level(10_000, 1.5, 0.05, 0.10) == 7


def test_max_m_matches_an_exhaustive_oracle_scan():
    for n, K, alpha_phi, alpha_psi in (
        (500, 2.0, 0.05, 0.2),
        (10_000, 1.5, 0.05, 0.10),
        (2_000, 1.2, 0.05, 0.15),
    ):
        feasible = [
            m for m in range(1, 160) if _bound_oracle(n, m, K, alpha_phi) <= alpha_psi
        ]
        expected = max(feasible) if feasible else None
        assert max_m_for_level(n, K, alpha_phi, alpha_psi) == expected


def test_max_m_degenerate_cases():
    assert max_m_for_level(42, 1.0, 0.05, 0.10) == 42  # bound is alpha_phi for all m
    assert max_m_for_level(100, 2.0, 0.10, 0.05) is None  # target below test level
    assert max_m_for_level(10, 1000.0, 0.05, 0.5) is None  # hopeless weights
    with pytest.raises(ValueError, match=r"alpha levels must be in \(0,1\)"):
        max_m_for_level(10, 2.0, 0.0, 0.5)

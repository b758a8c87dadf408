"""Finite-sample level bounds for distinct-replacement resampling.

The central quantity is the U-statistic variance term

    V(n, m) = C(n,m)^-1 * sum_{l=1}^{m} C(m,l) C(n-m, m-l) (K^l - 1),

where ``K >= 1`` is the second moment of the mean-one normalized weights.
Given ``V``, the level of a size-``alpha_phi`` target test applied to a
weighted distinct resample of size ``m`` from ``n`` points is at most

    min_{delta in (0,1)}  alpha_phi / (1 - delta) + V / (V + delta^2),

capped at 1.  This module evaluates ``V`` by the ratio recurrence between
consecutive summands (O(m) time, log-space once ``K^l`` would overflow, no
intermediate over/underflow for ``n`` up to 1e9), minimizes the bound over
``delta``, and scans for the largest resample size ``m`` whose bound stays
below a prescribed overall level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LevelBound",
    "v_nm",
    "finite_level_bound",
    "max_m_for_level",
    "hypergeometric_term_total",
]

_LOG_OVERFLOW = 700.0
_FAILURE_WINDOW = 64


@dataclass(frozen=True)
class LevelBound:
    """The minimized finite-sample level bound at one ``(n, m, K)``."""

    n: int
    m: int
    K: float
    alpha_phi: float
    v_nm: float
    delta_star: float
    bound: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "K": self.K,
            "alpha_phi": self.alpha_phi,
            "v_nm": self.v_nm,
            "delta_star": self.delta_star,
            "bound": self.bound,
        }


def _validate(n: int, m: int, K: float) -> None:
    if n < 1 or m < 1 or m > n:
        raise ValueError("need 1 <= m <= n")
    if K < 1.0:
        raise ValueError("K must be >= 1 (second moment of mean-one weights)")


def _log_kpow_minus_one(ell: float, log_k: float) -> float:
    """``log(K^ell - 1)`` without forming ``K^ell``."""
    t = ell * log_k
    if t > 36.0:
        return t  # the -1 is below double resolution
    return math.log(math.expm1(t))


def _log_binom(a: int, b: int) -> float:
    if b < 0 or b > a:
        return -math.inf
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def v_nm(n: int, m: int, K: float) -> float:
    """The variance term, via the consecutive-summand ratio recurrence.

    Summands ``s_l`` with ``C(n-m, m-l) = 0`` (possible when ``m > n/2``)
    contribute zero; the recurrence starts at the first nonzero term.  The
    whole computation runs on ``log s_l`` so that neither ``K^l`` nor the
    binomial products can overflow.
    """
    _validate(n, m, K)
    K = float(K)
    if K == 1.0:
        return 0.0
    log_k = math.log(K)
    ell0 = max(1, 2 * m - n)

    if ell0 == 1:
        # log s_1 from the closed product form.
        log_s = (
            _log_kpow_minus_one(1, log_k)
            + 2.0 * math.log(m)
            - math.log(n - m + 1)
        )
        for j in range(m - 1):
            log_s += math.log(n - m - j) - math.log(n - j)
    else:
        # First admissible term, directly from binomial coefficients.
        log_s = (
            _log_binom(m, ell0)
            + _log_binom(n - m, m - ell0)
            - _log_binom(n, m)
            + _log_kpow_minus_one(ell0, log_k)
        )

    # Accumulate sum in log space with a running maximum.
    log_terms = [log_s]
    for ell in range(ell0, m):
        log_ratio = (
            2.0 * math.log(m - ell)
            - math.log(ell + 1)
            - math.log(n - 2 * m + ell + 1)
            + _log_kpow_minus_one(ell + 1, log_k)
            - _log_kpow_minus_one(ell, log_k)
        )
        log_s += log_ratio
        log_terms.append(log_s)

    peak = max(log_terms)
    if peak == -math.inf:
        return 0.0
    total = sum(math.exp(t - peak) for t in log_terms)
    value = peak + math.log(total)
    return math.exp(value) if value < _LOG_OVERFLOW else math.inf


def hypergeometric_term_total(n: int, m: int) -> float:
    """``C(n,m)^-1 sum_{l=0}^m C(m,l) C(n-m,m-l)`` via the same log path.

    Equals 1 exactly (a Vandermonde convolution); exposed as a numerical
    sanity check on the term evaluation.
    """
    _validate(n, m, 1.0)
    log_cnm = _log_binom(n, m)
    total = 0.0
    for ell in range(0, m + 1):
        lt = _log_binom(m, ell) + _log_binom(n - m, m - ell) - log_cnm
        if lt > -math.inf:
            total += math.exp(lt)
    return total


def _bound_at(delta: float, v: float, alpha_phi: float) -> float:
    return alpha_phi / (1.0 - delta) + v / (v + delta * delta)


def finite_level_bound(n: int, m: int, K: float, alpha_phi: float) -> LevelBound:
    """Minimize the level bound over ``delta`` in (0,1); cap at 1.

    A coarse grid locates the basin (the derivative has polynomial degree
    four, so the objective need not be unimodal); golden-section search then
    refines the bracket to width 1e-12.
    """
    _validate(n, m, K)
    if not 0.0 < alpha_phi < 1.0:
        raise ValueError("alpha_phi must be in (0,1)")
    v = v_nm(n, m, K)
    if v == 0.0:
        return LevelBound(n, m, float(K), alpha_phi, 0.0, 0.0, alpha_phi)
    if not math.isfinite(v):
        return LevelBound(n, m, float(K), alpha_phi, v, 0.5, 1.0)

    grid = np.linspace(0.0, 1.0, 2049)[1:-1]
    values = alpha_phi / (1.0 - grid) + v / (v + grid * grid)
    i = int(np.argmin(values))
    lo = grid[i - 1] if i > 0 else 1e-15
    hi = grid[i + 1] if i < grid.size - 1 else 1.0 - 1e-15

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _bound_at(c, v, alpha_phi)
    fd = _bound_at(d, v, alpha_phi)
    while b - a > 1e-12:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _bound_at(c, v, alpha_phi)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _bound_at(d, v, alpha_phi)
    delta_star = 0.5 * (a + b)
    bound = min(1.0, _bound_at(delta_star, v, alpha_phi))
    return LevelBound(n, m, float(K), alpha_phi, v, float(delta_star), float(bound))


def max_m_for_level(
    n: int, K: float, alpha_phi: float, alpha_psi: float
) -> int | None:
    """Largest ``m`` in [1, n] whose minimized bound is <= ``alpha_psi``.

    The bound is not proven monotone in ``m``, so the scan walks upward and
    keeps the largest feasible ``m``, stopping only after 64 consecutive
    infeasible values (a pragmatic stopping window, reported by the CLI).
    Returns ``None`` when even ``m = 1`` is infeasible.
    """
    _validate(n, 1, K)
    if not 0.0 < alpha_phi < 1.0 or not 0.0 < alpha_psi < 1.0:
        raise ValueError("alpha levels must be in (0,1)")
    if alpha_psi < alpha_phi:
        return None
    if K == 1.0:
        return n  # bound equals alpha_phi <= alpha_psi for every m
    best: int | None = None
    failures = 0
    for m in range(1, n + 1):
        if finite_level_bound(n, m, K, alpha_phi).bound <= alpha_psi:
            best = m
            failures = 0
        else:
            failures += 1
            if failures >= _FAILURE_WINDOW:
                break
    return best

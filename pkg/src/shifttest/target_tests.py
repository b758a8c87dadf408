"""The target-domain hypothesis-test battery.

Each test consumes plain arrays (the engine slices datasets down to columns
before dispatching) and returns a :class:`~shifttest.core.TestResult`.
Permutation tests draw their label shuffles from an explicit
:class:`~shifttest.core.RandomStream`, so every p-value is reproducible.

Implementation notes:

* rank tests switch from exact enumeration to a moment-matched normal
  approximation at the conventional crossover sizes (20 signed ranks; 12
  pooled observations for the rank-sum test), with average ranks and tie
  corrections;
* permutation p-values use ``(1 + #{permuted >= observed}) / (B + 1)``,
  which is valid at finite ``B``;
* the 2x2 exact test runs entirely in rational arithmetic, so its p-values
  are exact to the last bit before the final float conversion;
* kernel bandwidths come from the median heuristic on positive pairwise
  distances, falling back to 1.0 when all distances vanish.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

from .core import Dataset, RandomStream, TestResult

__all__ = [
    "HypothesisTest",
    "TEST_KINDS",
    "pearson_corr_test",
    "wilcoxon_signed_rank",
    "mann_whitney_u",
    "mmd_permutation_test",
    "hsic_permutation_test",
    "fisher_exact_2x2",
    "mean_perm_test",
    "regression_slope_gof",
    "bates_quantile",
    "apply_test",
    "min_rows_required",
]

TEST_KINDS = (
    "pearson_corr",
    "wilcoxon_signed_rank",
    "mann_whitney_u",
    "mmd_perm",
    "hsic_perm",
    "fisher_exact",
    "mean_perm",
)
_PERMUTATION_KINDS = ("mmd_perm", "hsic_perm", "mean_perm")
_ALTERNATIVES = ("two_sided", "greater", "less")
_EPS = 1e-12


@dataclass(frozen=True)
class HypothesisTest:
    """A test kind plus its column bindings, as used by the engine.

    ``x`` (and ``y`` for paired kinds) name value columns; two-sample kinds
    instead read one value column ``x`` plus a ``group`` column holding
    labels 1 and 2.  ``mu0`` is the location null for the signed-rank test.
    """

    kind: str
    alternative: str = "two_sided"
    b: int = 500
    x: tuple[str, ...] = ()
    y: tuple[str, ...] = ()
    group: str | None = None
    mu0: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in TEST_KINDS:
            raise ValueError(f"unknown test kind {self.kind!r}")
        if self.alternative not in _ALTERNATIVES:
            raise ValueError(f"unknown alternative {self.alternative!r}")
        if self.kind in _PERMUTATION_KINDS and self.b < 99:
            raise ValueError("permutation tests need B >= 99")
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "y", tuple(self.y))


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def pearson_corr_test(
    x, y, alternative: str = "two_sided", alpha: float = 0.05
) -> TestResult:
    """t-test of zero Pearson correlation: ``t = r sqrt(k-2) / sqrt(1-r^2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length vectors")
    k = x.size
    if k < 4:
        raise ValueError("need at least 4 observations")
    sx = x - x.mean()
    sy = y - y.mean()
    vx = float(sx @ sx)
    vy = float(sy @ sy)
    if vx <= 0.0 or vy <= 0.0:
        raise ValueError("zero variance")
    r = float(sx @ sy) / math.sqrt(vx * vy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        t = math.inf if r > 0 else -math.inf
    else:
        t = r * math.sqrt((k - 2) / (1.0 - r * r))
    dist = stats.t(df=k - 2)
    if alternative == "greater":
        p = float(dist.sf(t))
    elif alternative == "less":
        p = float(dist.cdf(t))
    else:
        p = float(2.0 * dist.sf(abs(t)))
    return TestResult.from_p(t, p, alpha, k, {"r": r})


# ---------------------------------------------------------------------------
# signed rank
# ---------------------------------------------------------------------------


def _signed_rank_exact(ranks: np.ndarray, w: float, alternative: str) -> float:
    sums = np.zeros(1)
    for r in ranks:
        sums = np.concatenate([sums, sums + r])
    if alternative == "greater":
        return float(np.mean(sums >= w - _EPS))
    if alternative == "less":
        return float(np.mean(sums <= w + _EPS))
    lo = float(np.mean(sums <= w + _EPS))
    hi = float(np.mean(sums >= w - _EPS))
    return min(1.0, 2.0 * min(lo, hi))


def wilcoxon_signed_rank(
    x, mu0: float = 0.0, alternative: str = "two_sided", alpha: float = 0.05
) -> TestResult:
    """Signed-rank location test against ``mu0``; zeros dropped.

    Exact sign-pattern enumeration up to 20 nonzero values, then a normal
    approximation with continuity correction and tie-corrected variance.
    """
    d = np.asarray(x, dtype=np.float64) - mu0
    d = d[d != 0.0]
    k = d.size
    if k == 0:
        raise ValueError("all values equal mu0")
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if k <= 20:
        p = _signed_rank_exact(ranks, w, alternative)
        return TestResult.from_p(w, p, alpha, k, {"exact": True})
    mean = k * (k + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(counts.astype(float) ** 3 - counts)) / 48.0
    var = k * (k + 1) * (2 * k + 1) / 24.0 - tie_term
    sd = math.sqrt(max(var, _EPS))
    if alternative == "greater":
        p = float(stats.norm.sf((w - mean - 0.5) / sd))
    elif alternative == "less":
        p = float(stats.norm.cdf((w - mean + 0.5) / sd))
    else:
        z = (abs(w - mean) - 0.5) / sd
        p = min(1.0, float(2.0 * stats.norm.sf(z)))
    return TestResult.from_p(w, p, alpha, k, {"exact": False})


# ---------------------------------------------------------------------------
# rank sum
# ---------------------------------------------------------------------------


def _u_statistic(ranks_x: np.ndarray, kx: int) -> float:
    return float(ranks_x.sum() - kx * (kx + 1) / 2.0)


def mann_whitney_u(
    x, y, alternative: str = "two_sided", alpha: float = 0.05
) -> TestResult:
    """Rank-sum test; ``less`` means x tends below y (small U).

    Exact conditional enumeration of rank assignments when the pooled size
    is at most 12, else a tie- and continuity-corrected normal
    approximation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    kx, ky = x.size, y.size
    if kx < 1 or ky < 1:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([x, y])
    n = kx + ky
    ranks = stats.rankdata(pooled)
    u_obs = _u_statistic(ranks[:kx], kx)
    if n <= 12:
        us = np.array(
            [
                _u_statistic(ranks[list(comb)], kx)
                for comb in itertools.combinations(range(n), kx)
            ]
        )
        p_less = float(np.mean(us <= u_obs + _EPS))
        p_greater = float(np.mean(us >= u_obs - _EPS))
        if alternative == "less":
            p = p_less
        elif alternative == "greater":
            p = p_greater
        else:
            p = min(1.0, 2.0 * min(p_less, p_greater))
        return TestResult.from_p(u_obs, p, alpha, n, {"exact": True})
    mean = kx * ky / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts.astype(float) ** 3 - counts)) / (n * (n - 1))
    var = kx * ky / 12.0 * ((n + 1) - tie)
    sd = math.sqrt(max(var, _EPS))
    if alternative == "greater":
        p = float(stats.norm.sf((u_obs - mean - 0.5) / sd))
    elif alternative == "less":
        p = float(stats.norm.cdf((u_obs - mean + 0.5) / sd))
    else:
        z = (abs(u_obs - mean) - 0.5) / sd
        p = min(1.0, float(2.0 * stats.norm.sf(z)))
    return TestResult.from_p(u_obs, p, alpha, n, {"exact": False})


# ---------------------------------------------------------------------------
# kernel two-sample / independence
# ---------------------------------------------------------------------------


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim == 2:
        return a
    raise ValueError("inputs must be 1-d or 2-d arrays")


def _sq_distances(a: np.ndarray) -> np.ndarray:
    sq = np.sum(a * a, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (a @ a.T)
    return np.maximum(d2, 0.0)


def _median_bandwidth(d2: np.ndarray) -> float:
    iu = np.triu_indices(d2.shape[0], k=1)
    dist = np.sqrt(d2[iu])
    dist = dist[dist > 0.0]
    return float(np.median(dist)) if dist.size else 1.0


def _gaussian_kernel(d2: np.ndarray, h: float) -> np.ndarray:
    return np.exp(-d2 / (2.0 * h * h))


def _perm_p_value(observed: float, permuted: np.ndarray) -> float:
    return (1.0 + float(np.sum(permuted >= observed - _EPS))) / (permuted.size + 1.0)


def mmd_permutation_test(
    x, y, b: int = 500, stream: RandomStream | None = None, alpha: float = 0.05
) -> TestResult:
    """Two-sample kernel test: biased squared MMD with a permutation null."""
    x = _as_matrix(x)
    y = _as_matrix(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("need at least 2 points per sample")
    if b < 99:
        raise ValueError("permutation tests need B >= 99")
    if stream is None:
        stream = RandomStream(0)
    kx, ky = x.shape[0], y.shape[0]
    pooled = np.vstack([x, y])
    n = kx + ky
    d2 = _sq_distances(pooled)
    kernel = _gaussian_kernel(d2, _median_bandwidth(d2))
    total = float(kernel.sum())

    def stat_for(idx_x: np.ndarray) -> float:
        sub = kernel[idx_x]
        s_xx = float(sub[:, idx_x].sum())
        s_xp = float(sub.sum())  # x rows against everything
        s_xy = s_xp - s_xx
        s_yy = total - s_xx - 2.0 * s_xy
        return s_xx / kx**2 + s_yy / ky**2 - 2.0 * s_xy / (kx * ky)

    observed = stat_for(np.arange(kx))
    rng = stream.generator()
    permuted = np.empty(b)
    for i in range(b):
        permuted[i] = stat_for(rng.permutation(n)[:kx])
    p = _perm_p_value(observed, permuted)
    return TestResult.from_p(observed, p, alpha, n, {"b": b})


def _centered_kernel(a: np.ndarray) -> np.ndarray:
    d2 = _sq_distances(a)
    k = _gaussian_kernel(d2, _median_bandwidth(d2))
    k_row = k.mean(axis=0, keepdims=True)
    k_col = k.mean(axis=1, keepdims=True)
    return k - k_row - k_col + k.mean()


def hsic_permutation_test(
    x, y, b: int = 500, stream: RandomStream | None = None, alpha: float = 0.05
) -> TestResult:
    """Kernel independence test: biased HSIC with a permutation null.

    Bandwidths are chosen per variable by the median heuristic; the
    permutation shuffles ``y`` rows (centering commutes with permutation).
    """
    x = _as_matrix(x)
    y = _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have equal length")
    k = x.shape[0]
    if k < 4:
        raise ValueError("need at least 4 observations")
    if b < 99:
        raise ValueError("permutation tests need B >= 99")
    if stream is None:
        stream = RandomStream(0)
    kc = _centered_kernel(x)
    lc = _centered_kernel(y)
    observed = float(np.sum(kc * lc)) / k**2
    rng = stream.generator()
    permuted = np.empty(b)
    for i in range(b):
        perm = rng.permutation(k)
        permuted[i] = float(np.sum(kc * lc[np.ix_(perm, perm)])) / k**2
    p = _perm_p_value(observed, permuted)
    return TestResult.from_p(observed, p, alpha, k, {"b": b})


# ---------------------------------------------------------------------------
# exact 2x2
# ---------------------------------------------------------------------------


def fisher_exact_2x2(
    table, alternative: str = "two_sided", alpha: float = 0.05
) -> TestResult:
    """Exact conditional test of association in a 2x2 count table.

    All probabilities are hypergeometric and evaluated as exact rationals;
    the two-sided p-value sums the probabilities of tables no more likely
    than the observed one.  Any zero margin gives p = 1 by convention.
    """
    t = np.asarray(table)
    if t.shape != (2, 2):
        raise ValueError("table must be 2x2")
    if np.any(t < 0) or not np.all(t == np.floor(t)):
        raise ValueError("table entries must be nonnegative integers")
    a, bb, c, d = (int(v) for v in t.ravel())
    r1, r2 = a + bb, c + d
    c1 = a + c
    n = r1 + r2
    if r1 == 0 or r2 == 0 or c1 == 0 or c1 == n:
        return TestResult.from_p(float(a), 1.0, alpha, n, {"degenerate_margin": True})
    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    denom = math.comb(n, c1)
    pmf = {
        k: Fraction(math.comb(r1, k) * math.comb(r2, c1 - k), denom)
        for k in range(lo, hi + 1)
    }
    if alternative == "greater":
        p = sum(pmf[k] for k in range(a, hi + 1))
    elif alternative == "less":
        p = sum(pmf[k] for k in range(lo, a + 1))
    else:
        p_obs = pmf[a]
        p = sum(prob for prob in pmf.values() if prob <= p_obs)
    return TestResult.from_p(float(a), float(p), alpha, n, {"exact": True})


# ---------------------------------------------------------------------------
# permutation mean difference
# ---------------------------------------------------------------------------


def mean_perm_test(
    x,
    y,
    alternative: str = "two_sided",
    b: int = 500,
    stream: RandomStream | None = None,
    alpha: float = 0.05,
) -> TestResult:
    """Permutation test on the mean difference ``mean(y) - mean(x)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 1 or y.size < 1:
        raise ValueError("both samples must be nonempty")
    if b < 99:
        raise ValueError("permutation tests need B >= 99")
    if stream is None:
        stream = RandomStream(0)
    kx = x.size
    pooled = np.concatenate([x, y])
    n = pooled.size
    observed = float(y.mean() - x.mean())
    rng = stream.generator()
    permuted = np.empty(b)
    for i in range(b):
        perm = rng.permutation(n)
        px = pooled[perm[:kx]]
        py = pooled[perm[kx:]]
        permuted[i] = py.mean() - px.mean()
    if alternative == "greater":
        count = np.sum(permuted >= observed - _EPS)
    elif alternative == "less":
        count = np.sum(permuted <= observed + _EPS)
    else:
        count = np.sum(np.abs(permuted) >= abs(observed) - _EPS)
    p = (1.0 + float(count)) / (b + 1.0)
    return TestResult.from_p(observed, p, alpha, n, {"b": b})


# ---------------------------------------------------------------------------
# regression goodness of fit
# ---------------------------------------------------------------------------


def regression_slope_gof(
    sample: Dataset, response: str, covariates, beta0
) -> float:
    """p-value of the F-test for ``slopes = beta0`` with a free intercept.

    Subtracting ``X beta0`` from the response reduces the null to "all
    slopes zero", which is the standard overall F-test of the reduced
    regression.
    """
    covariates = list(covariates)
    beta0 = np.asarray(beta0, dtype=np.float64)
    p = len(covariates)
    if beta0.shape != (p,):
        raise ValueError("beta0 length must match covariates")
    m = sample.n
    if m <= p + 1:
        raise ValueError(f"need more than {p + 1} rows")
    xmat = sample.cols(covariates)
    y = sample.col(response) - xmat @ beta0
    design = np.column_stack([np.ones(m), xmat])
    if np.linalg.matrix_rank(design) < p + 1:
        raise ValueError("singular design")
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    rss1 = float(resid @ resid)
    centered = y - y.mean()
    rss0 = float(centered @ centered)
    dof = m - p - 1
    if rss1 <= _EPS * max(rss0, 1.0):
        return 0.0 if rss0 > rss1 + _EPS else 1.0
    f_stat = max(0.0, (rss0 - rss1) / p) / (rss1 / dof)
    return float(stats.f.sf(f_stat, p, dof))


# ---------------------------------------------------------------------------
# Bates quantile
# ---------------------------------------------------------------------------


def _irwin_hall_cdf(t: float, k: int) -> float:
    if t <= 0.0:
        return 0.0
    if t >= k:
        return 1.0
    total = 0.0
    for j in range(int(math.floor(t)) + 1):
        total += (-1.0) ** j * math.comb(k, j) * (t - j) ** k
    return total / math.factorial(k)


def bates_quantile(alpha_c: float, k: int) -> float:
    """Quantile of the mean of ``k`` independent Uniform(0,1) variables.

    Exact Irwin-Hall inversion for ``k <= 12``; beyond that the normal
    approximation ``N(1/2, 1/(12k))`` is indistinguishable at double
    precision for the quantiles used here.
    """
    if not 0.0 < alpha_c < 1.0:
        raise ValueError("alpha_c must be in (0,1)")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return float(alpha_c)
    if k <= 12:
        from scipy.optimize import brentq

        t = brentq(lambda s: _irwin_hall_cdf(s, k) - alpha_c, 0.0, float(k), xtol=1e-14)
        return float(t) / k
    return float(stats.norm.ppf(alpha_c, loc=0.5, scale=math.sqrt(1.0 / (12.0 * k))))


# ---------------------------------------------------------------------------
# engine-facing dispatch
# ---------------------------------------------------------------------------

_MIN_ROWS = {
    "pearson_corr": 4,
    "wilcoxon_signed_rank": 2,
    "mann_whitney_u": 2,
    "mmd_perm": 4,
    "hsic_perm": 4,
    "fisher_exact": 2,
    "mean_perm": 2,
}


def min_rows_required(kind: str) -> int:
    return _MIN_ROWS[kind]


def _split_groups(data: Dataset, test: HypothesisTest) -> tuple[np.ndarray, np.ndarray]:
    if test.group is None:
        raise ValueError(f"test kind {test.kind!r} needs a group column")
    g = data.col(test.group)
    if not np.all((g == 1.0) | (g == 2.0)):
        raise ValueError("group column must contain only labels 1 and 2")
    return g == 1.0, g == 2.0


def apply_test(
    test: HypothesisTest, data: Dataset, alpha: float, stream: RandomStream
) -> TestResult:
    """Evaluate a bound test on (usually resampled) data."""
    if test.kind == "pearson_corr":
        return pearson_corr_test(
            data.col(test.x[0]), data.col(test.y[0]), test.alternative, alpha
        )
    if test.kind == "wilcoxon_signed_rank":
        return wilcoxon_signed_rank(
            data.col(test.x[0]), test.mu0, test.alternative, alpha
        )
    if test.kind == "mann_whitney_u":
        in1, in2 = _split_groups(data, test)
        v = data.col(test.x[0])
        return mann_whitney_u(v[in1], v[in2], test.alternative, alpha)
    if test.kind == "mmd_perm":
        in1, in2 = _split_groups(data, test)
        feats = data.cols(test.x)
        return mmd_permutation_test(feats[in1], feats[in2], test.b, stream, alpha)
    if test.kind == "hsic_perm":
        return hsic_permutation_test(
            data.cols(test.x), data.cols(test.y), test.b, stream, alpha
        )
    if test.kind == "fisher_exact":
        xv = data.col(test.x[0])
        yv = data.col(test.y[0])
        if not np.all(np.isin(xv, (0.0, 1.0))) or not np.all(np.isin(yv, (0.0, 1.0))):
            raise ValueError("fisher_exact needs binary 0/1 columns")
        table = [
            [int(np.sum((xv == 1) & (yv == 1))), int(np.sum((xv == 1) & (yv == 0)))],
            [int(np.sum((xv == 0) & (yv == 1))), int(np.sum((xv == 0) & (yv == 0)))],
        ]
        return fisher_exact_2x2(table, test.alternative, alpha)
    if test.kind == "mean_perm":
        in1, in2 = _split_groups(data, test)
        v = data.col(test.x[0])
        return mean_perm_test(v[in1], v[in2], test.alternative, test.b, stream, alpha)
    raise ValueError(f"unknown test kind {test.kind!r}")

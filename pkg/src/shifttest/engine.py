"""End-to-end shifted-hypothesis testing pipelines.

This module glues the pieces together: a shift specification turns rows into
nonnegative weights, a resampling plan turns weights into a pseudo-sample
from the target distribution, and a bound hypothesis test is applied to that
pseudo-sample.  Variants cover known weights, weights whose denominator must
first be fitted on a held-out split, the rejection-sampler route for bounded
weights, the data-driven choice of the resample size, and the
importance-weighting baselines used for comparison.

Every pipeline is a pure function of ``(inputs, stream)``: all randomness is
drawn from sub-streams derived with fixed tokens, so reruns — including the
goodness-of-fit loop inside :func:`choose_m_heuristic` — are bit-identical.

A "test" argument may be a :class:`~shifttest.target_tests.HypothesisTest`
(dispatched through :func:`~shifttest.target_tests.apply_test`) or any
callable ``(Dataset, RandomStream) -> TestResult``, which keeps the pipelines
open to custom target tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from ._expr import parse_expression
from .core import (
    Dataset,
    RandomStream,
    TestResult,
    WeightFunction,
    estimate_second_moment,
    normalize_weights,
)
from .densities import GaussianConditional, fit_gaussian_conditional
from .resampling import (
    IndexSample,
    ResamplePlan,
    rejection_sample,
    sample_drpl,
    sample_norepl,
    sample_repl,
)
from .target_tests import (
    HypothesisTest,
    apply_test,
    bates_quantile,
    min_rows_required,
)

__all__ = [
    "DensityModel",
    "ExplicitShift",
    "RatioShift",
    "EstimatedShift",
    "shift_weights",
    "SplitPlan",
    "HeuristicConfig",
    "HeuristicResult",
    "run_known_shift",
    "run_estimated_shift",
    "run_rejection_test",
    "choose_m_heuristic",
    "run_with_heuristic",
    "ci_reduction_weights",
    "UniformPolicy",
    "SoftmaxPolicy",
    "off_policy_weights",
    "two_sample_shift_weights",
    "ipw_mean_test",
]


# ---------------------------------------------------------------------------
# shift specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityModel:
    """A conditional (or marginal, with no covariates) density over columns."""

    model: GaussianConditional
    response: str
    covariates: tuple[str, ...] = ()

    def log_density(self, data: Dataset) -> np.ndarray:
        y = data.col(self.response)
        if self.covariates:
            return self.model.logpdf(y, data.cols(self.covariates))
        return self.model.logpdf(y, np.empty((data.n, 0)))

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.response, *self.covariates)


@dataclass(frozen=True)
class ExplicitShift:
    """Shift given directly as a weight function over observed columns."""

    weight_function: WeightFunction

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self.weight_function.domain_columns)


@dataclass(frozen=True)
class RatioShift:
    """Shift given as target density over observed density on shared columns."""

    numerator: DensityModel
    denominator: DensityModel

    @property
    def columns(self) -> tuple[str, ...]:
        seen: list[str] = []
        for name in self.numerator.columns + self.denominator.columns:
            if name not in seen:
                seen.append(name)
        return tuple(seen)


@dataclass(frozen=True)
class EstimatedShift:
    """Ratio shift whose denominator must be fitted on held-out rows.

    ``estimator(data, response, covariates)`` returns the fitted conditional;
    the default is the linear-Gaussian least-squares fit.  Injecting an
    oracle estimator that ignores the data reduces the estimated pipeline to
    the known-shift pipeline exactly.
    """

    numerator: DensityModel
    response: str
    covariates: tuple[str, ...]
    estimator: Callable[..., GaussianConditional] = fit_gaussian_conditional

    def fit(self, data: Dataset) -> RatioShift:
        fitted = self.estimator(data, self.response, list(self.covariates))
        return RatioShift(
            numerator=self.numerator,
            denominator=DensityModel(fitted, self.response, self.covariates),
        )


def _ratio_weights(shift: RatioShift, data: Dataset) -> np.ndarray:
    log_num = shift.numerator.log_density(data)
    log_den = shift.denominator.log_density(data)
    if np.any(np.isneginf(log_den)):
        raise ValueError("support violation: observed density is zero at a row")
    w = np.exp(log_num - log_den)
    if not np.all(np.isfinite(w)):
        raise ValueError("shift weights overflow: density ratio is not finite")
    return w


def shift_weights(shift, data: Dataset) -> np.ndarray:
    """Evaluate a shift's raw (unnormalized) weights on every row."""
    if isinstance(shift, ExplicitShift):
        return shift.weight_function(data)
    if isinstance(shift, RatioShift):
        return _ratio_weights(shift, data)
    if isinstance(shift, EstimatedShift):
        raise ValueError(
            "estimated shift has no weights before fitting; "
            "use run_estimated_shift or .fit(...)"
        )
    if isinstance(shift, WeightFunction):
        return shift(data)
    raise TypeError(f"not a shift specification: {type(shift).__name__}")


# ---------------------------------------------------------------------------
# sample splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """An integer split n1 + n2 = n balancing fit size against test size."""

    a: float
    n1: int
    n2: int

    @classmethod
    def from_n(cls, n: int, a: float) -> "SplitPlan":
        """Minimize ``|n1^a - sqrt(n - n1)|`` over n1; ties favor larger n2."""
        if not 0.0 < a <= 1.0:
            raise ValueError("a must be in (0, 1]")
        if n < 4:
            raise ValueError("need n >= 4 to split")
        n1_grid = np.arange(2, n - 1)
        gap = np.abs(n1_grid**a - np.sqrt((n - n1_grid).astype(np.float64)))
        n1 = int(n1_grid[int(np.argmin(gap))])  # argmin takes the smallest n1
        return cls(a=float(a), n1=n1, n2=n - n1)


# ---------------------------------------------------------------------------
# test dispatch shared by the pipelines
# ---------------------------------------------------------------------------


def _evaluate_test(test, data: Dataset, alpha: float, stream: RandomStream) -> TestResult:
    if isinstance(test, HypothesisTest):
        return apply_test(test, data, alpha, stream)
    if callable(test):
        result = test(data, stream)
        if not isinstance(result, TestResult):
            raise TypeError("custom test must return a TestResult")
        return result
    raise TypeError(f"not a test: {type(test).__name__}")


def _test_min_rows(test) -> int:
    if isinstance(test, HypothesisTest):
        return min_rows_required(test.kind)
    return int(getattr(test, "min_rows", 2))


def _with_diagnostics(result: TestResult, extra: dict, m_used: int) -> TestResult:
    merged = dict(result.diagnostics)
    merged.update(extra)
    return replace(result, m_used=int(m_used), diagnostics=merged)


def _draw_indices(
    raw: np.ndarray, m: int, plan: ResamplePlan, stream: RandomStream
) -> IndexSample:
    if plan.scheme == "drpl":
        return sample_drpl(raw, m, plan, stream)
    if plan.scheme == "no_repl":
        return sample_norepl(raw, m, stream)
    if plan.scheme == "repl":
        return sample_repl(raw, m, stream)
    raise ValueError(
        f"scheme {plan.scheme!r} is not an index-resampling scheme; "
        "use run_rejection_test for the rejection sampler"
    )


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def run_known_shift(
    data: Dataset,
    shift,
    test,
    m: int,
    plan: ResamplePlan | None = None,
    stream: RandomStream | None = None,
    alpha: float = 0.05,
) -> TestResult:
    """Resample ``m`` rows under the shift, then run the bound test.

    Weights are evaluated on all rows; the index sample is drawn from the
    plan's scheme (distinct-replacement by default); the test sees only the
    selected rows.  Diagnostics record the weight second moment and how the
    sampler produced the draw.
    """
    if plan is None:
        plan = ResamplePlan()
    if stream is None:
        stream = RandomStream(0)
    if not 1 <= m <= data.n:
        raise ValueError("m must satisfy 1 <= m <= n")
    raw = shift_weights(shift, data)
    draw = _draw_indices(raw, m, plan, stream.derive("sample"))
    resampled = data.select_rows(draw.indices)
    result = _evaluate_test(test, resampled, alpha, stream.derive("test"))
    extra = {
        "weight_second_moment": estimate_second_moment(raw),
        "sampler_stage": draw.stage,
        "sampler_attempts": draw.attempts,
        "approximate_sampler": draw.approximate,
    }
    return _with_diagnostics(result, extra, m)


def run_estimated_shift(
    data: Dataset,
    shift: EstimatedShift,
    test,
    m: int,
    plan: ResamplePlan | None = None,
    a: float = 0.5,
    stream: RandomStream | None = None,
    alpha: float = 0.05,
) -> TestResult:
    """Split, fit the observed conditional on the head, test on the tail."""
    if not isinstance(shift, EstimatedShift):
        raise TypeError("run_estimated_shift needs an EstimatedShift")
    split = SplitPlan.from_n(data.n, a)
    if split.n2 < m:
        raise ValueError(f"second split has {split.n2} rows but m = {m}")
    fitted = shift.fit(data.head(split.n1))
    result = run_known_shift(
        data.tail_from(split.n1), fitted, test, m, plan, stream, alpha
    )
    result.diagnostics["split"] = {"a": split.a, "n1": split.n1, "n2": split.n2}
    return result


def run_rejection_test(
    data: Dataset,
    shift,
    bound: float,
    test,
    stream: RandomStream | None = None,
    alpha: float = 0.05,
) -> TestResult:
    """Thin the sample by keeping each row with probability weight/bound.

    The kept rows are i.i.d. from the target distribution, so the bound test
    keeps its exact level.  The kept count is random; too few kept rows for
    the test is an error.
    """
    if stream is None:
        stream = RandomStream(0)
    raw = shift_weights(shift, data)
    draw = rejection_sample(raw, bound, stream.derive("sample"))
    kept = int(draw.indices.size)
    needed = _test_min_rows(test)
    if kept < needed:
        raise ValueError(
            f"rejection sampler kept {kept} rows; the test needs at least {needed}"
        )
    resampled = data.select_rows(draw.indices)
    result = _evaluate_test(test, resampled, alpha, stream.derive("test"))
    extra = {
        "sampler_stage": draw.stage,
        "kept_fraction": kept / data.n,
        "bound": float(bound),
    }
    return _with_diagnostics(result, extra, kept)


# ---------------------------------------------------------------------------
# data-driven resample size
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeuristicConfig:
    """Settings for the goodness-of-fit search over the resample size.

    ``gof(sample, stream) -> p-value`` checks whether a resample still looks
    like the target distribution; the search grows ``m`` while the mean of
    ``k_reps`` p-values stays above the Bates quantile at ``alpha_c``.
    Defaults for ``m0`` / ``delta`` are ``ceil(sqrt(n))/2`` and
    ``ceil(sqrt(n))/10``, resolved when the data size is known.
    """

    gof: Callable[[Dataset, RandomStream], float]
    alpha_c: float = 0.05
    m0: int | None = None
    delta: int | None = None
    k_reps: int = 10
    strict_split: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha_c < 1.0:
            raise ValueError("alpha_c must be in (0, 1)")
        if self.k_reps < 1:
            raise ValueError("k_reps must be >= 1")
        if self.m0 is not None and self.m0 < 2:
            raise ValueError("m0 must be >= 2")
        if self.delta is not None and self.delta < 1:
            raise ValueError("delta must be >= 1")

    def resolve(self, n: int) -> tuple[int, int]:
        root = math.ceil(math.sqrt(n))
        m0 = self.m0 if self.m0 is not None else max(2, root // 2)
        delta = self.delta if self.delta is not None else max(1, root // 10)
        if m0 > n:
            raise ValueError("m0 exceeds the sample size")
        return m0, delta


@dataclass(frozen=True)
class HeuristicResult:
    """Chosen resample size plus how the search ended."""

    m: int
    capped: bool = False
    warning: str | None = None
    trace: tuple[tuple[int, float], ...] = ()

    def __int__(self) -> int:
        return self.m

    def __index__(self) -> int:
        return self.m


def choose_m_heuristic(
    data: Dataset,
    shift,
    cfg: HeuristicConfig,
    plan: ResamplePlan | None = None,
    stream: RandomStream | None = None,
) -> HeuristicResult:
    """Grow the resample size while resamples keep passing the fit check.

    At each candidate ``m`` the mean of ``k_reps`` goodness-of-fit p-values
    is compared against the corresponding quantile of a mean of uniforms;
    the first failing ``m`` ends the search at the previous candidate.
    """
    if plan is None:
        plan = ResamplePlan()
    if stream is None:
        stream = RandomStream(0)
    raw = shift_weights(shift, data)
    m0, delta = cfg.resolve(data.n)
    threshold = bates_quantile(cfg.alpha_c, cfg.k_reps)
    n = data.n
    trace: list[tuple[int, float]] = []
    m = m0
    while True:
        ps = np.empty(cfg.k_reps)
        for k in range(cfg.k_reps):
            draw = _draw_indices(raw, m, plan, stream.derive("heuristic", m, k))
            sample = data.select_rows(draw.indices)
            ps[k] = cfg.gof(sample, stream.derive("heuristic", m, k, "gof"))
        mean_p = float(ps.mean())
        trace.append((m, mean_p))
        if mean_p <= threshold:  # resamples no longer look like the target
            candidate = m - delta
            if candidate >= 1:
                return HeuristicResult(candidate, trace=tuple(trace))
            return HeuristicResult(
                m0,
                warning="fit check failed at the initial size; returning it unchanged",
                trace=tuple(trace),
            )
        if m >= n:
            return HeuristicResult(n, capped=True, trace=tuple(trace))
        m = min(n, m + delta)


def run_with_heuristic(
    data: Dataset,
    shift,
    test,
    cfg: HeuristicConfig,
    plan: ResamplePlan | None = None,
    stream: RandomStream | None = None,
    alpha: float = 0.05,
) -> TestResult:
    """Choose ``m`` by the fit heuristic, then run the known-shift pipeline.

    By default both stages see the whole sample; ``cfg.strict_split`` runs
    the search on the first half and the test on the second half only.
    """
    if stream is None:
        stream = RandomStream(0)
    if cfg.strict_split:
        half = data.n // 2
        search_data, test_data = data.head(half), data.tail_from(half)
    else:
        search_data = test_data = data
    choice = choose_m_heuristic(search_data, shift, cfg, plan, stream.derive("choose_m"))
    m = min(choice.m, test_data.n)
    result = run_known_shift(test_data, shift, test, m, plan, stream, alpha)
    result.diagnostics["heuristic"] = {
        "m": choice.m,
        "capped": choice.capped,
        "warning": choice.warning,
    }
    return result


# ---------------------------------------------------------------------------
# weight builders for the hypothesis reductions
# ---------------------------------------------------------------------------


def ci_reduction_weights(
    conditional: GaussianConditional,
    target_marginal: GaussianConditional,
    z: str,
    x: Sequence[str],
) -> WeightFunction:
    """Weights that break the ``z``–``x`` dependence: target(z)/observed(z|x).

    Under the reweighted distribution ``z`` follows the target marginal
    independently of ``x``, so conditional independence claims become plain
    independence claims, testable by the battery.
    """
    x = tuple(x)
    if target_marginal.coefficients != ():
        raise ValueError("target_marginal must have no covariates")

    def evaluator(data: Dataset) -> np.ndarray:
        zv = data.col(z)
        covs = data.cols(x)
        log_num = target_marginal.logpdf(zv, np.empty((data.n, 0)))
        log_den = conditional.logpdf(zv, covs)
        if np.any(np.isneginf(log_den)):
            raise ValueError("support violation: conditional density is zero")
        return np.exp(log_num - log_den)

    return WeightFunction(evaluator=evaluator, domain_columns=(z, *x))


class UniformPolicy:
    """Uniform distribution over ``n_actions`` action labels 0..L-1."""

    def __init__(self, n_actions: int):
        if n_actions < 1:
            raise ValueError("need at least one action")
        self.n_actions = int(n_actions)

    def action_prob(self, actions: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        self._check_actions(actions)
        return np.full(actions.shape[0], 1.0 / self.n_actions)

    def _check_actions(self, actions: np.ndarray) -> None:
        ok = np.isin(actions, np.arange(self.n_actions, dtype=np.float64))
        if not np.all(ok):
            raise ValueError("action label outside 0..n_actions-1")

    def sample(self, contexts: np.ndarray, stream: RandomStream) -> np.ndarray:
        rng = stream.generator()
        return rng.integers(0, self.n_actions, size=contexts.shape[0]).astype(float)


class SoftmaxPolicy:
    """Softmax policy: P(a | z) proportional to exp(delta * beta_a . z)."""

    def __init__(self, betas: np.ndarray, delta: float = 1.0):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 2:
            raise ValueError("betas must be an (actions, context_dim) matrix")
        self.betas = betas
        self.delta = float(delta)
        self.n_actions = betas.shape[0]

    def _probs(self, contexts: np.ndarray) -> np.ndarray:
        logits = self.delta * (contexts @ self.betas.T)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def action_prob(self, actions: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        ok = np.isin(actions, np.arange(self.n_actions, dtype=np.float64))
        if not np.all(ok):
            raise ValueError("action label outside 0..n_actions-1")
        probs = self._probs(contexts)
        return probs[np.arange(actions.shape[0]), actions.astype(int)]

    def sample(self, contexts: np.ndarray, stream: RandomStream) -> np.ndarray:
        rng = stream.generator()
        probs = self._probs(contexts)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(contexts.shape[0])
        return np.argmax(u[:, None] < cum, axis=1).astype(float)


def off_policy_weights(
    logged_policy, target_policy, a: str, z: Sequence[str]
) -> WeightFunction:
    """Per-row propensity ratio target(a|z)/logged(a|z) for bandit logs."""
    z = tuple(z)

    def evaluator(data: Dataset) -> np.ndarray:
        actions = data.col(a)
        contexts = data.cols(z)
        logged = logged_policy.action_prob(actions, contexts)
        if np.any(logged <= 0.0):
            raise ValueError("zero logged propensity at an observed row")
        return target_policy.action_prob(actions, contexts) / logged

    return WeightFunction(evaluator=evaluator, domain_columns=(a, *z))


def two_sample_shift_weights(k: str, within_k2: WeightFunction) -> WeightFunction:
    """Weight 1 on rows with group label 1; the inner weights on label 2."""

    def evaluator(data: Dataset) -> np.ndarray:
        labels = data.col(k)
        if not np.all((labels == 1.0) | (labels == 2.0)):
            raise ValueError("group column must contain only labels 1 and 2")
        w = np.ones(data.n)
        in2 = labels == 2.0
        if np.any(in2):
            w[in2] = within_k2(data)[in2]
        return w

    cols = (k, *(c for c in within_k2.domain_columns if c != k))
    return WeightFunction(evaluator=evaluator, domain_columns=cols)


# ---------------------------------------------------------------------------
# importance-weighting baseline
# ---------------------------------------------------------------------------


def ipw_mean_test(
    data: Dataset,
    weights,
    f,
    c0: float,
    alpha: float = 0.05,
    clip_k: int | None = None,
) -> TestResult:
    """z-test of ``E_target[f] = c0`` via the weighted sample mean.

    ``f`` may be a column name or an arithmetic expression over columns.
    With ``clip_k`` set, the ``clip_k`` largest raw weights are truncated at
    the ``clip_k``-th largest value before normalization — the usual
    variance-for-bias trade.
    """
    raw = np.asarray(shift_weights(weights, data), dtype=np.float64)
    if clip_k is not None:
        if not 1 <= clip_k <= data.n:
            raise ValueError("clip_k must be in [1, n]")
        kth = float(np.partition(raw, data.n - clip_k)[data.n - clip_k])
        raw = np.minimum(raw, kth)
    rbar = normalize_weights(raw)
    if isinstance(f, str) and f in data.columns:
        fvals = data.col(f)
    elif isinstance(f, str):
        expr = parse_expression(f)
        fvals = np.broadcast_to(
            np.asarray(expr({name: data.col(name) for name in expr.identifiers}),
                       dtype=np.float64),
            (data.n,),
        )
    else:
        raise TypeError("f must be a column name or an expression string")
    vals = rbar * fvals
    t_stat = float(vals.mean())
    sd = float(vals.std(ddof=1)) if data.n > 1 else 0.0
    if sd == 0.0:
        p = 1.0 if t_stat == c0 else 0.0
    else:
        z = (t_stat - c0) / (sd / math.sqrt(data.n))
        p = float(2.0 * stats.norm.sf(abs(z)))
    diags = {"clip_k": clip_k, "n": data.n}
    return TestResult.from_p(t_stat, p, alpha, data.n, diags)

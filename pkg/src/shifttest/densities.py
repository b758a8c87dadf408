"""Density models and simulators backing shift factors and experiments.

Four families live here:

* :class:`GaussianConditional` — ``y | x ~ Normal(intercept + coef'x, sd^2)``,
  either specified or fitted by least squares.  The marginal case is the
  empty-covariate model.  These are the numerators/denominators of the
  density-ratio shift factors.
* :class:`ScmSpec` / :func:`scm_simulate` — small structural causal models
  with a fixed function library (linear, quadratic, sine, product,
  indicator-threshold) and additive Gaussian / Gaussian-mixture / gamma /
  discrete noise.  JSON-serializable; formulas use the minimal arithmetic
  grammar of :mod:`shifttest._expr`.
* :class:`StaircasePair` — a matched pair of piecewise-constant densities on
  ``[0, inf)`` whose importance ratio has exactly ``ell`` finite moments for
  a tunable ``ell``; the canonical stress test for resampling with
  heavy-tailed weights.  The target cdf at integer ``v`` is
  ``c_v = (1 - alpha)^(1/v)``; the observed cdf is ``p_v = 1 - (v+1)^(-eps)``.
* :class:`DiscreteDistribution` — finite-support distributions used by the
  binary examples.

Plus :func:`gaussian_moment_threshold`, the exact square-integrability
threshold for mean-replacement shifts between Gaussians.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._expr import Expression, parse_expression
from .core import Dataset, RandomStream

__all__ = [
    "GaussianConditional",
    "fit_gaussian_conditional",
    "NoiseSpec",
    "Assignment",
    "ScmSpec",
    "scm_simulate",
    "StaircasePair",
    "staircase_pair",
    "DiscreteDistribution",
    "gaussian_moment_threshold",
]

_LOG_2PI = math.log(2.0 * math.pi)
_NOISE_SD_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Gaussian conditionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianConditional:
    """``y | x ~ Normal(intercept + coefficients' x, noise_sd^2)``.

    ``coefficients`` may be empty, in which case the model is an
    unconditional Gaussian marginal.
    """

    intercept: float
    coefficients: tuple[float, ...]
    noise_sd: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "noise_sd", float(self.noise_sd))
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")

    @classmethod
    def marginal(cls, mean: float, sd: float) -> "GaussianConditional":
        return cls(intercept=mean, coefficients=(), noise_sd=sd)

    def mean(self, covariates: np.ndarray) -> np.ndarray:
        """Conditional mean for an ``(k, p)`` covariate matrix (``p`` may be 0)."""
        x = np.asarray(covariates, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != len(self.coefficients):
            raise ValueError(
                f"model has {len(self.coefficients)} coefficients, got {x.shape[1]} covariates"
            )
        if self.coefficients:
            return self.intercept + x @ np.asarray(self.coefficients)
        return np.full(x.shape[0], self.intercept)

    def logpdf(self, y, covariates) -> np.ndarray:
        """Log density of ``y`` given covariates (vectorized over rows)."""
        y = np.asarray(y, dtype=np.float64)
        mu = self.mean(covariates)
        z = (y - mu) / self.noise_sd
        return -0.5 * z * z - math.log(self.noise_sd) - 0.5 * _LOG_2PI

    def sample(self, covariates: np.ndarray, stream: RandomStream) -> np.ndarray:
        mu = self.mean(covariates)
        rng = stream.generator()
        return mu + self.noise_sd * rng.standard_normal(mu.shape[0])


def gaussian_conditional_logpdf(
    model: GaussianConditional, y, covariates
) -> np.ndarray:
    """Functional spelling of :meth:`GaussianConditional.logpdf`."""
    return model.logpdf(y, covariates)


def fit_gaussian_conditional(
    data: Dataset, response: str, covariates: Sequence[str]
) -> GaussianConditional:
    """Least-squares fit of ``response | covariates`` with Gaussian residuals.

    The residual standard deviation uses denominator ``n - p - 1`` (``p``
    covariates plus a free intercept).  Exact fits are floored at
    ``noise_sd = 1e-12`` so downstream density ratios stay finite.
    """
    covariates = list(covariates)
    y = data.col(response)
    n, p = data.n, len(covariates)
    if n <= p + 1:
        raise ValueError(f"need more than {p + 1} rows to fit {p} coefficients")
    design = np.column_stack([np.ones(n)] + [data.col(c) for c in covariates])
    rank = np.linalg.matrix_rank(design)
    if rank < p + 1:
        raise ValueError("singular design")
    beta, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ beta
    dof = n - p - 1
    noise_var = float(residuals @ residuals) / dof
    noise_sd = max(math.sqrt(max(noise_var, 0.0)), _NOISE_SD_FLOOR)
    return GaussianConditional(
        intercept=float(beta[0]),
        coefficients=tuple(float(b) for b in beta[1:]),
        noise_sd=noise_sd,
    )


# ---------------------------------------------------------------------------
# Discrete distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteDistribution:
    """A finite-support distribution over numeric values."""

    values: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        probs = tuple(float(p) for p in self.probs)
        if len(values) != len(probs) or not values:
            raise ValueError("values and probs must be equal-length and non-empty")
        if any(p < 0 for p in probs):
            raise ValueError("probabilities must be nonnegative")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1 within 1e-12")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    def pmf(self, value: float) -> float:
        total = 0.0
        for v, p in zip(self.values, self.probs):
            if v == value:
                total += p
        return total

    def sample(self, k: int, stream: RandomStream) -> np.ndarray:
        rng = stream.generator()
        idx = rng.choice(len(self.values), size=k, p=np.asarray(self.probs))
        return np.asarray(self.values)[idx]


# ---------------------------------------------------------------------------
# Structural causal model specs
# ---------------------------------------------------------------------------

_NOISE_KINDS = ("gaussian", "gaussian_mixture", "gamma", "discrete")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise attached to one structural assignment."""

    kind: str
    params: Mapping[str, object]

    def __post_init__(self) -> None:
        if self.kind not in _NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; choose from {_NOISE_KINDS}")
        object.__setattr__(self, "params", dict(self.params))
        if self.kind == "gaussian":
            sd = float(self.params.get("sd", 1.0))
            if sd < 0:
                raise ValueError("gaussian sd must be >= 0")
        elif self.kind == "gaussian_mixture":
            means = list(self.params["means"])
            sds = list(self.params["sds"])
            weights = list(self.params["weights"])
            if not (len(means) == len(sds) == len(weights)) or not means:
                raise ValueError("mixture needs equal-length means/sds/weights")
            if abs(sum(weights) - 1.0) > 1e-12:
                raise ValueError("mixture weights must sum to 1")
        elif self.kind == "gamma":
            if float(self.params["shape"]) <= 0:
                raise ValueError("gamma shape must be positive")
        elif self.kind == "discrete":
            DiscreteDistribution(
                tuple(self.params["values"]), tuple(self.params["probs"])
            )

    def draw(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian":
            sd = float(self.params.get("sd", 1.0))
            return sd * rng.standard_normal(k)
        if self.kind == "gaussian_mixture":
            means = np.asarray(self.params["means"], dtype=np.float64)
            sds = np.asarray(self.params["sds"], dtype=np.float64)
            weights = np.asarray(self.params["weights"], dtype=np.float64)
            comp = rng.choice(len(means), size=k, p=weights)
            return means[comp] + sds[comp] * rng.standard_normal(k)
        if self.kind == "gamma":
            shape = float(self.params["shape"])
            scale = float(self.params.get("scale", 1.0))
            return rng.gamma(shape, scale, size=k)
        values = np.asarray(self.params["values"], dtype=np.float64)
        probs = np.asarray(self.params["probs"], dtype=np.float64)
        return values[rng.choice(len(values), size=k, p=probs)]

    def to_json_obj(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class Assignment:
    """One structural assignment: ``target := formula(parents) + noise``."""

    target: str
    formula: str
    noise: NoiseSpec
    _expr: Expression = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_expr", parse_expression(self.formula))

    @property
    def parents(self) -> tuple[str, ...]:
        return self._expr.identifiers


@dataclass(frozen=True)
class ScmSpec:
    """An ordered list of structural assignments (topological order)."""

    assignments: tuple[Assignment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignments", tuple(self.assignments))
        seen: set[str] = set()
        for a in self.assignments:
            if a.target in seen:
                raise ValueError(f"duplicate assignment target {a.target!r}")
            missing = set(a.parents) - seen
            if missing:
                raise ValueError(
                    f"assignment for {a.target!r} references unassigned "
                    f"column(s) {sorted(missing)}"
                )
            seen.add(a.target)
        if not self.assignments:
            raise ValueError("empty model")

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(a.target for a in self.assignments)

    # -- JSON round trip ------------------------------------------------

    @classmethod
    def from_json_obj(cls, obj: Iterable[Mapping]) -> "ScmSpec":
        assignments = []
        for item in obj:
            noise = item.get("noise", {"kind": "gaussian", "params": {"sd": 1.0}})
            assignments.append(
                Assignment(
                    target=str(item["target"]),
                    formula=str(item["formula"]),
                    noise=NoiseSpec(noise["kind"], noise.get("params", {})),
                )
            )
        return cls(tuple(assignments))

    @classmethod
    def from_json(cls, text: str) -> "ScmSpec":
        return cls.from_json_obj(json.loads(text))

    def to_json_obj(self) -> list[dict]:
        return [
            {"target": a.target, "formula": a.formula, "noise": a.noise.to_json_obj()}
            for a in self.assignments
        ]


def scm_simulate(spec: ScmSpec, n: int, stream: RandomStream) -> Dataset:
    """Draw ``n`` i.i.d. rows by evaluating assignments in order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream.generator()
    env: dict[str, np.ndarray] = {}
    for a in spec.assignments:
        base = a._expr(env) if a.parents else np.broadcast_to(a._expr({}), (n,))
        noise = a.noise.draw(n, rng)
        env[a.target] = np.broadcast_to(base, (n,)) + noise
    return Dataset.from_columns({name: env[name] for name in spec.columns})


# ---------------------------------------------------------------------------
# Staircase density pair
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaircasePair:
    """Matched piecewise-constant densities with a heavy-tailed ratio.

    On each unit interval ``[v, v+1)`` the target density is
    ``f_v = c_{v+1} - c_v`` and the observed density is
    ``g_v = p_{v+1} - p_v``, where::

        c_v = (1 - alpha)^(1/v)   (c_0 = 0)
        p_v = 1 - (v + 1)^(-eps)  (p_0 = 0)

    Key analytic facts used by the tests: the target cdf satisfies
    ``F(m)^m = 1 - alpha`` exactly at every positive integer ``m`` (so the
    max-statistic test calibrated this way has target rejection probability
    exactly ``1 - alpha``), and the importance ratio ``r = f/g`` has
    ``E_g[r^ell] < inf`` iff ``eps < ell/(ell-1)``.
    """

    alpha: float
    eps: float

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0,1)")
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")

    # -- cdf values at integers ----------------------------------------

    def target_cdf_int(self, v) -> np.ndarray:
        """``c_v`` vectorized over nonnegative integers."""
        v = np.asarray(v, dtype=np.float64)
        safe = np.where(v > 0, v, 1.0)
        return np.where(v > 0, np.exp(math.log1p(-self.alpha) / safe), 0.0)

    def observed_cdf_int(self, v) -> np.ndarray:
        """``p_v`` vectorized over nonnegative integers."""
        v = np.asarray(v, dtype=np.float64)
        return -np.expm1(-self.eps * np.log1p(v))

    # -- densities on unit intervals ------------------------------------

    def target_density(self, v) -> np.ndarray:
        """``f_v = c_{v+1} - c_v`` for integer ``v >= 0``."""
        v = np.asarray(v, dtype=np.float64)
        return self.target_cdf_int(v + 1.0) - self.target_cdf_int(v)

    def observed_density(self, v) -> np.ndarray:
        """``g_v = p_{v+1} - p_v`` for integer ``v >= 0``."""
        v = np.asarray(v, dtype=np.float64)
        # (v+1)^-eps - (v+2)^-eps, computed as a stable difference
        return np.exp(-self.eps * np.log1p(v)) - np.exp(-self.eps * np.log(v + 2.0))

    def weight(self, x) -> np.ndarray:
        """Importance ratio ``r(x) = f_v / g_v`` with ``v = floor(x)``."""
        v = np.floor(np.asarray(x, dtype=np.float64))
        if np.any(v < 0):
            raise ValueError("support is [0, inf)")
        return self.target_density(v) / self.observed_density(v)

    # -- cdfs on the whole half-line -------------------------------------

    def target_cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = np.floor(x)
        return self.target_cdf_int(v) + (x - v) * self.target_density(v)

    def observed_cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = np.floor(x)
        return self.observed_cdf_int(v) + (x - v) * self.observed_density(v)

    # -- sampling via closed-form inverse cdf ----------------------------

    def _inverse_target(self, u: np.ndarray) -> np.ndarray:
        log_u = np.log(np.where(u > 0, u, np.finfo(float).tiny))
        L = math.log1p(-self.alpha)
        v = np.floor(L / np.where(log_u < 0, log_u, -np.finfo(float).tiny))
        v = np.maximum(v, 0.0)
        frac = (u - self.target_cdf_int(v)) / self.target_density(v)
        return v + np.clip(frac, 0.0, np.nextafter(1.0, 0.0))

    def _inverse_observed(self, u: np.ndarray) -> np.ndarray:
        v = np.floor(np.power(1.0 - u, -1.0 / self.eps) - 1.0)
        v = np.maximum(v, 0.0)
        frac = (u - self.observed_cdf_int(v)) / self.observed_density(v)
        return v + np.clip(frac, 0.0, np.nextafter(1.0, 0.0))

    def sample_target(self, k: int, stream: RandomStream) -> np.ndarray:
        return self._inverse_target(stream.generator().random(k))

    def sample_observed(self, k: int, stream: RandomStream) -> np.ndarray:
        return self._inverse_observed(stream.generator().random(k))

    # -- moment partial sums ---------------------------------------------

    def weight_moment_partial_sum(self, ell: int, v_max: int) -> float:
        """Partial sum ``sum_{v=0}^{v_max} f_v^ell / g_v^(ell-1)``.

        Monotone in ``v_max``; converges iff ``eps < ell/(ell-1)``.
        Evaluated in chunks so large ``v_max`` stays memory-friendly.
        """
        if ell < 1:
            raise ValueError("ell must be >= 1")
        total = 0.0
        chunk = 1_000_000
        for start in range(0, v_max + 1, chunk):
            v = np.arange(start, min(start + chunk, v_max + 1), dtype=np.float64)
            f = self.target_density(v)
            g = self.observed_density(v)
            total += float(np.sum(f**ell / g ** (ell - 1)))
        return total


def staircase_pair(alpha: float, eps: float) -> StaircasePair:
    """Construct the matched heavy-ratio density pair."""
    return StaircasePair(alpha=alpha, eps=eps)


# ---------------------------------------------------------------------------
# Gaussian second-moment threshold
# ---------------------------------------------------------------------------


def gaussian_moment_threshold(
    sigma_target: float, sigma_noise: float, sigma_x: float
) -> tuple[float, bool]:
    """Square-integrability threshold for Gaussian mean-replacement shifts.

    For ``y = x + noise`` with ``x ~ Normal(., sigma_x^2)`` and
    ``noise ~ Normal(0, sigma_noise^2)``, replacing the conditional
    ``Normal(x, sigma_noise^2)`` by an independent
    ``Normal(., sigma_target^2)`` produces importance weights with finite
    second moment under the observed law iff
    ``sigma_target^2 < 2(sigma_noise^2 - sigma_x^2)``.

    Returns ``(threshold, satisfied)`` where
    ``threshold = sqrt(max(0, 2(sigma_noise^2 - sigma_x^2)))`` and
    ``satisfied = sigma_target < threshold``.
    """
    if min(sigma_target, sigma_noise, sigma_x) <= 0:
        raise ValueError("all standard deviations must be positive")
    threshold = math.sqrt(max(0.0, 2.0 * (sigma_noise**2 - sigma_x**2)))
    return threshold, bool(sigma_target < threshold)

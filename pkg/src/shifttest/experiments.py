"""Desk-scale simulation studies built on the pipeline API.

Each registered experiment maps a grid point (a dict of scalar parameters)
plus a replication stream to a single run outcome; the harness aggregates
outcomes into one CSV row per grid point with a Monte Carlo standard error,
so downstream checks can form their own confidence bands.

Reproducibility contract: replication ``j`` at grid point ``g`` uses
``RandomStream(seed).derive(name, repr(sorted(g.items())), j)``.  Worker
threads only change scheduling, never stream assignment, so results are
byte-identical across thread counts.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, RandomStream, WeightFunction
from .densities import (
    Assignment,
    GaussianConditional,
    NoiseSpec,
    ScmSpec,
    fit_gaussian_conditional,
    scm_simulate,
    staircase_pair,
)
from .engine import (
    DensityModel,
    HeuristicConfig,
    RatioShift,
    ResamplePlan,
    SoftmaxPolicy,
    UniformPolicy,
    choose_m_heuristic,
    ci_reduction_weights,
    ipw_mean_test,
    off_policy_weights,
    run_known_shift,
    two_sample_shift_weights,
)
from .resampling import sample_norepl
from .target_tests import (
    HypothesisTest,
    fisher_exact_2x2,
    regression_slope_gof,
)

__all__ = [
    "ExperimentSpec",
    "EXPERIMENT_NAMES",
    "default_grid",
    "run_experiment",
    "rows_to_csv",
]

# Lighter retry budget for the many resamples inside the m-search: the two
# exact stages draw from the same distribution, so capping replacement
# attempts at 8 only shifts work to the without-replacement stage once the
# search pushes m past the point where distinct replacement draws are
# likely.  The final test always runs with the default plan.
_SEARCH_PLAN = ResamplePlan(max_repl_attempts=8, max_norepl_attempts=60, gibbs_sweeps=6)


@dataclass(frozen=True)
class ExperimentSpec:
    """A named study, its parameter grid, and the replication budget."""

    name: str
    grid: tuple[dict, ...]
    replications: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in _REGISTRY:
            raise ValueError(
                f"unknown experiment {self.name!r}; choose from {EXPERIMENT_NAMES}"
            )
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        object.__setattr__(self, "grid", tuple(dict(g) for g in self.grid))


def _grid_token(g: dict) -> str:
    return repr(sorted(g.items()))


def _sqrt_m(n: int) -> int:
    return int(math.floor(math.sqrt(n)))


def _slope_gof(response: str, covariates: tuple[str, ...]) -> Callable:
    beta0 = np.zeros(len(covariates))

    def gof(sample: Dataset, stream: RandomStream) -> float:
        return regression_slope_gof(sample, response, covariates, beta0)

    return gof


def _resolve_m(
    m_rule,
    data: Dataset,
    shift,
    gof: Callable,
    stream: RandomStream,
) -> int:
    """Translate a grid's m specification into a concrete resample size."""
    if isinstance(m_rule, (int, np.integer)):
        return int(m_rule)
    if m_rule == "sqrt":
        return _sqrt_m(data.n)
    if m_rule == "heuristic":
        cfg = HeuristicConfig(gof=gof)
        choice = choose_m_heuristic(
            data, shift, cfg, plan=_SEARCH_PLAN, stream=stream.derive("choose_m")
        )
        return min(choice.m, data.n)
    raise ValueError(f"unknown m rule {m_rule!r}")


# ---------------------------------------------------------------------------
# conditional-independence reduction on a linear Gaussian model
# ---------------------------------------------------------------------------


def _gaussian_ci_scm(theta: float) -> ScmSpec:
    return ScmSpec(
        (
            Assignment("x", "0", NoiseSpec("gaussian", {"sd": 1.0})),
            Assignment("z", "x", NoiseSpec("gaussian", {"sd": 2.0})),
            Assignment("y", f"{theta} * x + z", NoiseSpec("gaussian", {"sd": 1.0})),
        )
    )


def _run_gaussian_ci(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, theta, sigma = int(g["n"]), float(g["theta"]), float(g["sigma"])
    data = scm_simulate(_gaussian_ci_scm(theta), n, stream.derive("data"))
    shift = ci_reduction_weights(
        conditional=GaussianConditional(0.0, (1.0,), 2.0),
        target_marginal=GaussianConditional(0.0, (), sigma),
        z="z",
        x=("x",),
    )
    m = _resolve_m(g.get("m", "sqrt"), data, shift, _slope_gof("z", ("x",)), stream)
    plan = ResamplePlan(scheme=str(g.get("scheme", "drpl")))
    test = HypothesisTest(kind="pearson_corr", x=("x",), y=("y",))
    result = run_known_shift(data, shift, test, m, plan, stream, alpha=0.05)
    return {"reject": result.reject, "m_used": result.m_used}


# ---------------------------------------------------------------------------
# off-policy testing on logged bandit data
# ---------------------------------------------------------------------------

_N_ACTIONS = 4
_CONTEXT_DIM = 3


def _off_policy_setup(spec: ExperimentSpec) -> dict:
    rng = RandomStream(spec.seed).derive("betas").generator()
    return {"betas": rng.standard_normal((_N_ACTIONS, _CONTEXT_DIM))}


def _bandit_sample(
    n: int, betas: np.ndarray, stream: RandomStream
) -> Dataset:
    rng = stream.generator()
    z = rng.standard_normal((n, _CONTEXT_DIM))
    a = rng.integers(0, _N_ACTIONS, size=n)
    r = np.einsum("ij,ij->i", betas[a], z) + rng.standard_normal(n)
    return Dataset.from_columns(
        {"z1": z[:, 0], "z2": z[:, 1], "z3": z[:, 2], "a": a.astype(float), "r": r}
    )


def _run_off_policy(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, delta = int(g["n"]), float(g["delta"])
    hypothesis = str(g.get("hypothesis", "mean"))
    betas = ctx["betas"]
    logged = UniformPolicy(_N_ACTIONS)
    target = SoftmaxPolicy(betas, delta)
    zcols = ("z1", "z2", "z3")
    within = off_policy_weights(logged, target, "a", zcols)

    if hypothesis == "mean":
        data = _bandit_sample(n, betas, stream.derive("data"))
        test = HypothesisTest(
            kind="wilcoxon_signed_rank", alternative="greater", x=("r",), mu0=0.0
        )
        result = run_known_shift(
            data, within, test, _sqrt_m(n), ResamplePlan(), stream, alpha=0.05
        )
        return {"reject": result.reject, "m_used": result.m_used}

    # Two-sample variants: sample 1 stays under the logged policy, sample 2
    # is reweighted toward the target policy, then a two-sample test runs on
    # the pooled resample.
    d1 = _bandit_sample(n, betas, stream.derive("data", 1))
    d2 = _bandit_sample(n, betas, stream.derive("data", 2))
    pooled = Dataset.from_columns(
        {
            name: np.concatenate([d1.col(name), d2.col(name)])
            for name in d1.columns
        }
    ).with_column("k", np.concatenate([np.ones(n), np.full(n, 2.0)]))
    shift = two_sample_shift_weights("k", within)
    if hypothesis == "two_sample_mw":
        test = HypothesisTest(kind="mann_whitney_u", x=("r",), group="k")
    elif hypothesis == "two_sample_mmd":
        test = HypothesisTest(kind="mmd_perm", b=199, x=("r",), group="k")
    else:
        raise ValueError(f"unknown hypothesis {hypothesis!r}")
    result = run_known_shift(
        pooled, shift, test, _sqrt_m(2 * n), ResamplePlan(), stream, alpha=0.05
    )
    return {"reject": result.reject, "m_used": result.m_used}


# ---------------------------------------------------------------------------
# conditional independence with a nonlinear conditional
# ---------------------------------------------------------------------------


def _cond_indep_scm(theta: float, tau: int) -> ScmSpec:
    mixture = NoiseSpec(
        "gaussian_mixture",
        {"means": (-2.0, 2.0), "sds": (1.0, 1.0), "weights": (0.5, 0.5)},
    )
    return ScmSpec(
        (
            Assignment("x", "0", mixture),
            Assignment("xsq", "x^2", NoiseSpec("gaussian", {"sd": 0.0})),
            Assignment("z", "-xsq", NoiseSpec("gaussian", {"sd": 2.0})),
            Assignment(
                "y",
                f"sin(z) + {theta} * x^{tau}",
                NoiseSpec("gaussian", {"sd": 2.0}),
            ),
        )
    )


def _run_cond_indep(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, theta, tau = int(g["n"]), float(g["theta"]), int(g["tau"])
    test_kind = str(g.get("test", "hsic"))
    data = scm_simulate(_cond_indep_scm(theta, tau), n, stream.derive("data"))
    zv = data.col("z")
    target = GaussianConditional(float(zv.mean()), (), float(zv.std(ddof=1)))
    if bool(g.get("fit_conditional", False)):
        conditional = fit_gaussian_conditional(data, "z", ["xsq"])
    else:
        conditional = GaussianConditional(0.0, (-1.0,), 2.0)
    shift = ci_reduction_weights(conditional, target, z="z", x=("xsq",))
    gof = _slope_gof("z", ("x", "xsq"))
    m = _resolve_m(g.get("m", "heuristic"), data, shift, gof, stream)
    if test_kind == "pearson":
        test = HypothesisTest(kind="pearson_corr", x=("x",), y=("y",))
    elif test_kind == "hsic":
        test = HypothesisTest(kind="hsic_perm", b=199, x=("x",), y=("y",))
    else:
        raise ValueError(f"unknown test {test_kind!r}")
    result = run_known_shift(data, shift, test, m, ResamplePlan(), stream, alpha=0.05)
    return {"reject": result.reject, "m_used": result.m_used}


# ---------------------------------------------------------------------------
# dormant-independence (Verma) studies
# ---------------------------------------------------------------------------


def _verma_gaussian_scm(theta: float) -> ScmSpec:
    unit = NoiseSpec("gaussian", {"sd": 1.0})
    return ScmSpec(
        (
            Assignment("h", "0", unit),
            Assignment("x1", "0", unit),
            Assignment("x2", "x1 + h", unit),
            Assignment("x3", "x2", NoiseSpec("gaussian", {"sd": 2.0})),
            Assignment("x4", f"{theta} * x1 + x3 + h", unit),
        )
    )


def _empirical_marginal(values: np.ndarray) -> GaussianConditional:
    return GaussianConditional(float(values.mean()), (), float(values.std(ddof=1)))


def _run_verma_gaussian(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, theta = int(g["n"]), float(g["theta"])
    data = scm_simulate(_verma_gaussian_scm(theta), n, stream.derive("data"))
    conditional = fit_gaussian_conditional(data, "x3", ["x2"])
    shift = ci_reduction_weights(
        conditional, _empirical_marginal(data.col("x3")), z="x3", x=("x2",)
    )
    gof = _slope_gof("x3", ("x2",))
    m = _resolve_m(g.get("m", "heuristic"), data, shift, gof, stream)
    test = HypothesisTest(kind="pearson_corr", x=("x1",), y=("x4",))
    result = run_known_shift(data, shift, test, m, ResamplePlan(), stream, alpha=0.05)
    return {"reject": result.reject, "m_used": result.m_used}


def _run_verma_binary(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n = int(g["n"])
    edge_present = bool(g.get("edge", False))
    rng = stream.derive("params").generator()
    p_h = rng.dirichlet((3.0, 3.0, 3.0, 3.0))
    p1 = rng.beta(1.0, 1.0)
    p2 = rng.beta(1.0, 1.0, size=(2, 4))
    p3 = rng.beta(1.0, 1.0, size=2)
    p4 = rng.beta(1.0, 1.0, size=(2, 2) if edge_present else (2,))

    draw = stream.derive("data").generator()
    h = draw.choice(4, size=n, p=p_h)
    x1 = (draw.random(n) < p1).astype(int)
    x2 = (draw.random(n) < p2[x1, h]).astype(int)
    x3 = (draw.random(n) < p3[x2]).astype(int)
    p4_row = p4[x3, x1] if edge_present else p4[x3]
    x4 = (draw.random(n) < p4_row).astype(int)
    data = Dataset.from_columns(
        {"x1": x1, "x2": x2, "x3": x3, "x4": x4, "h": h.astype(float)}
    )

    # Empirical weights q_hat(x3) / q_hat(x3 | x2); both factors are positive
    # at every observed row because the row itself contributes a count.
    marg = np.array([np.mean(x3 == v) for v in (0, 1)])
    cond = np.empty((2, 2))
    for u in (0, 1):
        rows = x2 == u
        denom = max(int(rows.sum()), 1)
        for v in (0, 1):
            cond[v, u] = np.sum(rows & (x3 == v)) / denom

    def evaluator(d: Dataset) -> np.ndarray:
        zv = d.col("x3").astype(int)
        uv = d.col("x2").astype(int)
        return marg[zv] / cond[zv, uv]

    shift = WeightFunction(evaluator=evaluator, domain_columns=("x3", "x2"))

    def gof(sample: Dataset, _s: RandomStream) -> float:
        a = sample.col("x3").astype(int)
        b = sample.col("x2").astype(int)
        table = [
            [int(np.sum((a == 1) & (b == 1))), int(np.sum((a == 1) & (b == 0)))],
            [int(np.sum((a == 0) & (b == 1))), int(np.sum((a == 0) & (b == 0)))],
        ]
        return fisher_exact_2x2(table).p_value

    m = _resolve_m(g.get("m", "sqrt"), data, shift, gof, stream)
    test = HypothesisTest(kind="fisher_exact", x=("x1",), y=("x4",))
    result = run_known_shift(data, shift, test, m, ResamplePlan(), stream, alpha=0.05)
    return {"reject": result.reject, "m_used": result.m_used}


def _verma_nonlinear_scm(theta: float) -> ScmSpec:
    unit = NoiseSpec("gaussian", {"sd": 1.0})
    none = NoiseSpec("gaussian", {"sd": 0.0})
    return ScmSpec(
        (
            Assignment("eh", "0", unit),
            Assignment("h", "0.5 * eh^2", none),
            Assignment("x1", "0", NoiseSpec("gamma", {"shape": 2.0, "scale": 1.0})),
            Assignment("x2", "x1 * h", unit),
            Assignment("x2sq", "x2^2", none),
            Assignment("x3", "x2sq", NoiseSpec("gaussian", {"sd": 1.5})),
            Assignment("x4", f"{theta} * x1 + x3 + h", unit),
        )
    )


def _run_verma_nonlinear(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, theta = int(g["n"]), float(g["theta"])
    data = scm_simulate(_verma_nonlinear_scm(theta), n, stream.derive("data"))
    conditional = fit_gaussian_conditional(data, "x3", ["x2sq"])
    shift = ci_reduction_weights(
        conditional, _empirical_marginal(data.col("x3")), z="x3", x=("x2sq",)
    )
    gof = _slope_gof("x3", ("x2sq",))
    m = _resolve_m(g.get("m", "heuristic"), data, shift, gof, stream)
    test = HypothesisTest(kind="hsic_perm", b=199, x=("x1",), y=("x4",))
    result = run_known_shift(data, shift, test, m, ResamplePlan(), stream, alpha=0.05)
    return {"reject": result.reject, "m_used": result.m_used}


# ---------------------------------------------------------------------------
# importance weighting vs. resampling under weight degeneracy
# ---------------------------------------------------------------------------


def _ipw_scm() -> ScmSpec:
    return ScmSpec(
        (
            Assignment("x1", "1", NoiseSpec("gaussian", {"sd": math.sqrt(3.0)})),
            Assignment("x2", "x1", NoiseSpec("gaussian", {"sd": 2.0})),
            Assignment("x3", "x2 - x1", NoiseSpec("gaussian", {"sd": 1.0})),
        )
    )


def _run_ipw_compare(g: dict, stream: RandomStream, ctx: dict) -> dict:
    n, mu = int(g["n"]), float(g["mu"])
    method = str(g["method"])
    data = scm_simulate(_ipw_scm(), n, stream.derive("data"))
    shift = RatioShift(
        numerator=DensityModel(GaussianConditional(mu, (), 1.0), "x2"),
        denominator=DensityModel(GaussianConditional(0.0, (1.0,), 2.0), "x2", ("x1",)),
    )
    if method == "ipw":
        result = ipw_mean_test(data, shift, "x3", c0=0.0, alpha=0.05)
    elif method == "ipw_clip":
        result = ipw_mean_test(data, shift, "x3", c0=0.0, alpha=0.05, clip_k=10)
    elif method == "resampling":
        gof = _slope_gof("x2", ("x1",))
        m = _resolve_m(g.get("m", "heuristic"), data, shift, gof, stream)
        test = HypothesisTest(kind="wilcoxon_signed_rank", x=("x3",), mu0=0.0)
        result = run_known_shift(
            data, shift, test, m, ResamplePlan(), stream, alpha=0.05
        )
    else:
        raise ValueError(f"unknown method {method!r}")
    return {"reject": result.reject, "m_used": result.m_used}


# ---------------------------------------------------------------------------
# resample-size rate study on the staircase pair
# ---------------------------------------------------------------------------


def _run_staircase_rate(g: dict, stream: RandomStream, ctx: dict) -> dict:
    """Max-threshold test on a heavy-tailed pair at resample size n^q.

    The bound test rejects when every resampled value is at most m; its
    rejection probability under the true target is ``reject_prob`` by
    construction.  Growing m faster than sqrt(n) drives the resampled
    rejection rate to 1 instead.
    """
    n, q = int(g["n"]), float(g["q"])
    reject_prob = float(g.get("reject_prob", 0.3))
    eps = float(g.get("eps", 1.6))
    pair = staircase_pair(alpha=1.0 - reject_prob, eps=eps)
    x = pair.sample_observed(n, stream.derive("data"))
    raw = pair.weight(x)
    m = int(math.floor(n**q))
    draw = sample_norepl(raw, m, stream.derive("sample"))
    reject = bool(np.max(x[draw.indices]) <= m)
    return {"reject": reject, "m_used": m}


# ---------------------------------------------------------------------------
# registry and harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Experiment:
    run: Callable[[dict, RandomStream, dict], dict]
    grid: Callable[[bool], list[dict]]
    setup: Callable[[ExperimentSpec], dict] = field(default=lambda spec: {})


def _grid_gaussian_ci(paper_scale: bool) -> list[dict]:
    n = 10_000 if paper_scale else 2_000
    return [
        {"n": n, "theta": theta, "sigma": sigma, "m": "sqrt"}
        for theta in (0.0, 0.4)
        for sigma in (1.0, 4.0)
    ]


def _grid_off_policy(paper_scale: bool) -> list[dict]:
    n = 2_000 if paper_scale else 500
    return [
        {"n": n, "delta": delta, "hypothesis": hyp}
        for hyp in ("mean", "two_sample_mw", "two_sample_mmd")
        for delta in (0.0, 1.0, 2.0)
    ]


def _grid_cond_indep(paper_scale: bool) -> list[dict]:
    thetas = (0.0, 0.5, 1.0, 1.5) if paper_scale else (0.0, 1.5)
    return [
        {"n": 150, "theta": theta, "tau": tau, "test": test, "m": "heuristic"}
        for tau in (1, 2)
        for theta in thetas
        for test in ("pearson", "hsic")
    ]


def _grid_verma_gaussian(paper_scale: bool) -> list[dict]:
    n = 2_000 if paper_scale else 500
    return [
        {"n": n, "theta": theta, "m": rule}
        for theta in (0.0, 0.3)
        for rule in ("sqrt", "heuristic")
    ]


def _grid_verma_binary(paper_scale: bool) -> list[dict]:
    n = 2_000 if paper_scale else 500
    return [
        {"n": n, "edge": edge, "m": rule}
        for edge in (False, True)
        for rule in ("sqrt", "heuristic")
    ]


def _grid_verma_nonlinear(paper_scale: bool) -> list[dict]:
    n = 2_000 if paper_scale else 500
    return [
        {"n": n, "theta": theta, "m": rule}
        for theta in (0.0, 0.3)
        for rule in ("sqrt", "heuristic")
    ]


def _grid_ipw_compare(paper_scale: bool) -> list[dict]:
    return [
        {"n": 100, "mu": mu, "method": method}
        for mu in (1.0, 2.0, 4.0, 8.0)
        for method in ("ipw", "ipw_clip", "resampling")
    ]


def _grid_staircase_rate(paper_scale: bool) -> list[dict]:
    ns = (1_000, 10_000, 100_000)
    return [{"n": n, "q": q} for q in (0.4, 0.8) for n in ns]


_REGISTRY: dict[str, _Experiment] = {
    "gaussian_ci": _Experiment(_run_gaussian_ci, _grid_gaussian_ci),
    "off_policy": _Experiment(_run_off_policy, _grid_off_policy, _off_policy_setup),
    "cond_indep": _Experiment(_run_cond_indep, _grid_cond_indep),
    "verma_gaussian": _Experiment(_run_verma_gaussian, _grid_verma_gaussian),
    "verma_binary": _Experiment(_run_verma_binary, _grid_verma_binary),
    "verma_nonlinear": _Experiment(_run_verma_nonlinear, _grid_verma_nonlinear),
    "ipw_compare": _Experiment(_run_ipw_compare, _grid_ipw_compare),
    "staircase_rate": _Experiment(_run_staircase_rate, _grid_staircase_rate),
}

EXPERIMENT_NAMES = tuple(sorted(_REGISTRY))


def default_grid(name: str, paper_scale: bool = False) -> list[dict]:
    return _REGISTRY[name].grid(paper_scale)


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> list[dict]:
    """Run all replications and return one aggregated row per grid point."""
    exp = _REGISTRY[spec.name]
    ctx = exp.setup(spec)
    base = RandomStream(spec.seed)
    jobs = [
        (gi, j, base.derive(spec.name, _grid_token(g), j))
        for gi, g in enumerate(spec.grid)
        for j in range(spec.replications)
    ]
    outcomes: list[dict | None] = [None] * len(jobs)

    def work(slot: int) -> None:
        gi, _j, stream = jobs[slot]
        outcomes[slot] = exp.run(spec.grid[gi], stream, ctx)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(jobs))))
    else:
        for slot in range(len(jobs)):
            work(slot)

    rows = []
    for gi, g in enumerate(spec.grid):
        got = [
            outcomes[slot]
            for slot, (gj, _, _) in enumerate(jobs)
            if gj == gi
        ]
        rejects = np.array([o["reject"] for o in got], dtype=float)
        rate = float(rejects.mean())
        stderr = float(np.sqrt(rate * (1.0 - rate) / rejects.size))
        row = dict(g)
        row["rejection_rate"] = rate
        row["mc_stderr"] = stderr
        row["mean_m_used"] = float(np.mean([o["m_used"] for o in got]))
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    """Serialize aggregated rows with repr-exact floats, one grid row each."""
    if not rows:
        return ""
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            value = row.get(key, "")
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"

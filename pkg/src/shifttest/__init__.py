"""Hypothesis testing under distributional shift via weighted resampling.

The package turns a hypothesis about an unobserved target distribution into
a test on observed data: evaluate shift weights, resample a small
pseudo-sample from the target, and apply an ordinary test to it.  Modules:

* :mod:`~shifttest.core` — datasets, weight functions, seeded streams;
* :mod:`~shifttest.densities` — conditional models, structural simulators,
  and the heavy-tailed staircase pair;
* :mod:`~shifttest.resampling` — the distinct-replacement sampler with its
  exact fallback chain, plus rejection sampling;
* :mod:`~shifttest.level_bounds` — finite-sample level bounds and the
  largest feasible resample size;
* :mod:`~shifttest.target_tests` — the test battery applied to resamples;
* :mod:`~shifttest.engine` — end-to-end pipelines and weight builders;
* :mod:`~shifttest.experiments` — reproducible simulation studies;
* :mod:`~shifttest.cli` — the ``shifttest`` command.
"""

from .core import (
    Dataset,
    RandomStream,
    TestResult,
    WeightFunction,
    estimate_second_moment,
    normalize_weights,
)
from .densities import (
    Assignment,
    DiscreteDistribution,
    GaussianConditional,
    NoiseSpec,
    ScmSpec,
    StaircasePair,
    fit_gaussian_conditional,
    gaussian_moment_threshold,
    scm_simulate,
    staircase_pair,
)
from .engine import (
    DensityModel,
    EstimatedShift,
    ExplicitShift,
    HeuristicConfig,
    HeuristicResult,
    RatioShift,
    SoftmaxPolicy,
    SplitPlan,
    UniformPolicy,
    choose_m_heuristic,
    ci_reduction_weights,
    ipw_mean_test,
    off_policy_weights,
    run_estimated_shift,
    run_known_shift,
    run_rejection_test,
    run_with_heuristic,
    shift_weights,
    two_sample_shift_weights,
)
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    default_grid,
    run_experiment,
)
from .level_bounds import (
    LevelBound,
    finite_level_bound,
    max_m_for_level,
    v_nm,
)
from .resampling import (
    IndexSample,
    ResamplePlan,
    drpl_exact_distribution,
    gibbs_refine,
    rejection_sample,
    sample_drpl,
    sample_norepl,
    sample_repl,
)
from .target_tests import (
    HypothesisTest,
    apply_test,
    bates_quantile,
    fisher_exact_2x2,
    hsic_permutation_test,
    mann_whitney_u,
    mean_perm_test,
    mmd_permutation_test,
    pearson_corr_test,
    regression_slope_gof,
    wilcoxon_signed_rank,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "RandomStream",
    "TestResult",
    "WeightFunction",
    "estimate_second_moment",
    "normalize_weights",
    "Assignment",
    "DiscreteDistribution",
    "GaussianConditional",
    "NoiseSpec",
    "ScmSpec",
    "StaircasePair",
    "fit_gaussian_conditional",
    "gaussian_moment_threshold",
    "scm_simulate",
    "staircase_pair",
    "DensityModel",
    "EstimatedShift",
    "ExplicitShift",
    "HeuristicConfig",
    "HeuristicResult",
    "RatioShift",
    "SoftmaxPolicy",
    "SplitPlan",
    "UniformPolicy",
    "choose_m_heuristic",
    "ci_reduction_weights",
    "ipw_mean_test",
    "off_policy_weights",
    "run_estimated_shift",
    "run_known_shift",
    "run_rejection_test",
    "run_with_heuristic",
    "shift_weights",
    "two_sample_shift_weights",
    "EXPERIMENT_NAMES",
    "ExperimentSpec",
    "default_grid",
    "run_experiment",
    "LevelBound",
    "finite_level_bound",
    "max_m_for_level",
    "v_nm",
    "IndexSample",
    "ResamplePlan",
    "drpl_exact_distribution",
    "gibbs_refine",
    "rejection_sample",
    "sample_drpl",
    "sample_norepl",
    "sample_repl",
    "HypothesisTest",
    "apply_test",
    "bates_quantile",
    "fisher_exact_2x2",
    "hsic_permutation_test",
    "mann_whitney_u",
    "mean_perm_test",
    "mmd_permutation_test",
    "pearson_corr_test",
    "regression_slope_gof",
    "wilcoxon_signed_rank",
    "__version__",
]

"""Command-line front end.

Subcommands:

* ``test`` — run one configured pipeline on a CSV file, print a JSON report;
* ``experiment`` — run a registered simulation study, print/write a CSV;
* ``bound`` — finite-sample level bound, or the largest feasible resample
  size when ``--alpha-psi`` is given without ``--m``;
* ``choose-m`` — run only the resample-size search for a configured shift;
* ``simulate`` — draw rows from a JSON structural model and emit CSV.

Config files are JSON; a parse failure exits nonzero and reports the byte
offset of the error.  All commands accept ``--out`` to write the report to a
file instead of stdout, and exit 0 on success (a rejected hypothesis is
still a success).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import Dataset, RandomStream, estimate_second_moment
from .densities import GaussianConditional, ScmSpec, scm_simulate
from .engine import (
    DensityModel,
    EstimatedShift,
    ExplicitShift,
    HeuristicConfig,
    RatioShift,
    choose_m_heuristic,
    run_estimated_shift,
    run_known_shift,
    run_rejection_test,
    run_with_heuristic,
    shift_weights,
)
from ._expr import parse_expression
from .core import WeightFunction
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    default_grid,
    rows_to_csv,
    run_experiment,
)
from .level_bounds import finite_level_bound, max_m_for_level
from .resampling import ResamplePlan
from .target_tests import HypothesisTest, regression_slope_gof

__all__ = ["main"]


def _fail(message: str) -> ValueError:
    return ValueError(message)


def _req(obj: dict, key: str, where: str):
    if key not in obj:
        raise _fail(f"config missing field {where}.{key}")
    return obj[key]


def _parse_model(obj: dict, where: str) -> DensityModel:
    response = str(_req(obj, "response", where))
    covariates = tuple(str(c) for c in obj.get("covariates", []))
    coefficients = tuple(float(c) for c in obj.get("coefficients", []))
    if len(coefficients) != len(covariates):
        raise _fail(f"{where}: coefficients and covariates lengths differ")
    model = GaussianConditional(
        intercept=float(obj.get("intercept", 0.0)),
        coefficients=coefficients,
        noise_sd=float(_req(obj, "noise_sd", where)),
    )
    return DensityModel(model, response, covariates)


def _parse_shift(obj: dict):
    kind = str(_req(obj, "kind", "shift"))
    if kind == "explicit":
        formula = str(_req(obj, "formula", "shift"))
        expr = parse_expression(formula)

        def evaluator(data: Dataset) -> np.ndarray:
            env = {name: data.col(name) for name in expr.identifiers}
            return np.broadcast_to(
                np.asarray(expr(env), dtype=np.float64), (data.n,)
            ).copy()

        return ExplicitShift(
            WeightFunction(evaluator=evaluator, domain_columns=expr.identifiers)
        )
    if kind == "ratio":
        return RatioShift(
            numerator=_parse_model(_req(obj, "numerator", "shift"), "shift.numerator"),
            denominator=_parse_model(
                _req(obj, "denominator", "shift"), "shift.denominator"
            ),
        )
    if kind == "estimated":
        return EstimatedShift(
            numerator=_parse_model(_req(obj, "numerator", "shift"), "shift.numerator"),
            response=str(_req(obj, "response", "shift")),
            covariates=tuple(str(c) for c in _req(obj, "covariates", "shift")),
        )
    raise _fail(f"shift.kind must be explicit, ratio, or estimated; got {kind!r}")


def _parse_test(obj: dict) -> HypothesisTest:
    return HypothesisTest(
        kind=str(_req(obj, "kind", "test")),
        alternative=str(obj.get("alternative", "two_sided")),
        b=int(obj.get("b", 500)),
        x=tuple(str(c) for c in obj.get("x", [])),
        y=tuple(str(c) for c in obj.get("y", [])),
        group=obj.get("group"),
        mu0=float(obj.get("mu0", 0.0)),
    )


def _parse_plan(obj: dict | None) -> ResamplePlan:
    if not obj:
        return ResamplePlan()
    return ResamplePlan(
        scheme=str(obj.get("scheme", "drpl")),
        max_repl_attempts=int(obj.get("max_repl_attempts", 1000)),
        max_norepl_attempts=int(obj.get("max_norepl_attempts", 1000)),
        gibbs_sweeps=int(obj.get("gibbs_sweeps", 50)),
    )


def _parse_heuristic(obj: dict) -> HeuristicConfig:
    response = str(_req(obj, "gof_response", "heuristic"))
    covariates = tuple(str(c) for c in _req(obj, "gof_covariates", "heuristic"))
    beta0 = np.zeros(len(covariates))

    def gof(sample: Dataset, stream: RandomStream) -> float:
        return regression_slope_gof(sample, response, covariates, beta0)

    return HeuristicConfig(
        gof=gof,
        alpha_c=float(obj.get("alpha_c", 0.05)),
        m0=obj.get("m0"),
        delta=obj.get("delta"),
        k_reps=int(obj.get("k_reps", 10)),
        strict_split=bool(obj.get("strict_split", False)),
    )


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise _fail("config root must be a JSON object")
    return obj


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def _result_json(result) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True, default=str)


def _resolve_seed(args, config: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def cmd_test(args) -> int:
    config = _load_config(args.config)
    data = Dataset.from_csv(str(_req(config, "data", "config")))
    shift = _parse_shift(_req(config, "shift", "config"))
    test = _parse_test(_req(config, "test", "config"))
    plan = _parse_plan(config.get("plan"))
    alpha = float(config.get("alpha", 0.05))
    stream = RandomStream(_resolve_seed(args, config))
    m_spec = _req(config, "m", "config")

    if plan.scheme == "rejection":
        bound = float(_req(config, "rejection_bound", "config"))
        result = run_rejection_test(data, shift, bound, test, stream, alpha)
    elif isinstance(shift, EstimatedShift):
        if not isinstance(m_spec, int):
            raise _fail("estimated shifts need an integer m")
        result = run_estimated_shift(
            data, shift, test, int(m_spec), plan,
            float(config.get("a", 0.5)), stream, alpha,
        )
    elif m_spec == "heuristic":
        cfg = _parse_heuristic(_req(config, "heuristic", "config"))
        result = run_with_heuristic(data, shift, test, cfg, plan, stream, alpha)
    elif m_spec == "finite-bound":
        raw = shift_weights(shift, data)
        second_moment = estimate_second_moment(raw)
        alpha_psi = float(config.get("alpha_psi", 2.0 * alpha))
        m = max_m_for_level(data.n, max(second_moment, 1.0), alpha, alpha_psi)
        if m is None:
            raise _fail(
                f"no resample size keeps the level bound below {alpha_psi}"
            )
        result = run_known_shift(data, shift, test, m, plan, stream, alpha)
        result.diagnostics["finite_bound"] = {
            "m": m, "weight_second_moment": second_moment, "alpha_psi": alpha_psi
        }
    elif isinstance(m_spec, int):
        result = run_known_shift(data, shift, test, int(m_spec), plan, stream, alpha)
    else:
        raise _fail('config.m must be an integer, "heuristic", or "finite-bound"')

    _emit(_result_json(result) + "\n", args.out)
    return 0


def cmd_choose_m(args) -> int:
    config = _load_config(args.config)
    data = Dataset.from_csv(str(_req(config, "data", "config")))
    shift = _parse_shift(_req(config, "shift", "config"))
    cfg = _parse_heuristic(_req(config, "heuristic", "config"))
    plan = _parse_plan(config.get("plan"))
    stream = RandomStream(_resolve_seed(args, config))
    choice = choose_m_heuristic(data, shift, cfg, plan, stream.derive("choose_m"))
    report = {
        "m": choice.m,
        "capped": choice.capped,
        "warning": choice.warning,
        "trace": [[m, p] for m, p in choice.trace],
    }
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_bound(args) -> int:
    if args.m is not None:
        lb = finite_level_bound(args.n, args.m, args.k, args.alpha_phi)
        report = lb.to_dict()
    else:
        if args.alpha_psi is None:
            raise _fail("provide --m for a single bound or --alpha-psi for a scan")
        m = max_m_for_level(args.n, args.k, args.alpha_phi, args.alpha_psi)
        report = {
            "n": args.n,
            "K": args.k,
            "alpha_phi": args.alpha_phi,
            "alpha_psi": args.alpha_psi,
            "max_m": m,
        }
        if m is None:
            report["message"] = (
                "no resample size satisfies the level bound; "
                "alpha_psi may be below alpha_phi"
            )
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def cmd_experiment(args) -> int:
    threads = int(os.environ.get("SHIFTTEST_THREADS", args.threads))
    spec = ExperimentSpec(
        name=args.name,
        grid=tuple(default_grid(args.name, args.paper_scale)),
        replications=args.replications,
        seed=args.seed if args.seed is not None else 0,
    )
    rows = run_experiment(spec, threads=threads)
    _emit(rows_to_csv(rows), args.out)
    return 0


def cmd_simulate(args) -> int:
    with open(args.scm, "r", encoding="utf-8") as fh:
        spec = ScmSpec.from_json(fh.read())
    data = scm_simulate(spec, args.n, RandomStream(args.seed or 0))
    lines = [",".join(data.columns)]
    for row in data.values:
        lines.append(",".join(repr(float(v)) for v in row))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shifttest",
        description="Hypothesis testing under distributional shift via resampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_test = sub.add_parser("test", help="run one configured test pipeline")
    p_test.add_argument("config", help="JSON run configuration")
    p_test.add_argument("--seed", type=int, default=None)
    p_test.add_argument("--out", default=None)
    p_test.set_defaults(func=cmd_test)

    p_choose = sub.add_parser("choose-m", help="run only the resample-size search")
    p_choose.add_argument("config", help="JSON configuration with shift + heuristic")
    p_choose.add_argument("--seed", type=int, default=None)
    p_choose.add_argument("--out", default=None)
    p_choose.set_defaults(func=cmd_choose_m)

    p_bound = sub.add_parser("bound", help="finite-sample level bound")
    p_bound.add_argument("--n", type=int, required=True)
    p_bound.add_argument("--m", type=int, default=None)
    p_bound.add_argument("--k", type=float, required=True,
                         help="second moment of the normalized weights")
    p_bound.add_argument("--alpha-phi", type=float, required=True)
    p_bound.add_argument("--alpha-psi", type=float, default=None)
    p_bound.add_argument("--out", default=None)
    p_bound.set_defaults(func=cmd_bound)

    p_exp = sub.add_parser("experiment", help="run a registered simulation study")
    p_exp.add_argument("--name", required=True, choices=EXPERIMENT_NAMES)
    p_exp.add_argument("--replications", type=int, default=200)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--threads", type=int, default=1)
    p_exp.add_argument("--paper-scale", action="store_true")
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(func=cmd_experiment)

    p_sim = sub.add_parser("simulate", help="draw rows from a JSON structural model")
    p_sim.add_argument("scm", help="JSON list of structural assignments")
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", default=None)
    p_sim.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as err:
        print(f"error: invalid JSON at byte {err.pos}: {err.msg}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

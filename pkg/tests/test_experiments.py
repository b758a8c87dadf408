"""Unit tests for the simulation-study harness."""

import numpy as np
import pytest

from shifttest import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    default_grid,
    run_experiment,
)
from shifttest.experiments import rows_to_csv

_ROW_KEYS = {"rejection_rate", "mc_stderr", "mean_m_used"}


def test_registry_names_are_stable():
    assert EXPERIMENT_NAMES == (
        "cond_indep",
        "gaussian_ci",
        "ipw_compare",
        "off_policy",
        "staircase_rate",
        "verma_binary",
        "verma_gaussian",
        "verma_nonlinear",
    )


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown experiment 'nope'"):
        ExperimentSpec(name="nope", grid=({"n": 10},), replications=1)
    with pytest.raises(ValueError, match="replications must be >= 1"):
        ExperimentSpec(name="staircase_rate", grid=({"n": 10},), replications=0)


def test_default_grids_have_the_documented_shapes():
    ci = default_grid("gaussian_ci")
    assert len(ci) == 4
    assert {g["n"] for g in ci} == {2000}
    assert {(g["theta"], g["sigma"]) for g in ci} == {
        (0.0, 1.0), (0.0, 4.0), (0.4, 1.0), (0.4, 4.0)
    }
    assert all(g["m"] == "sqrt" for g in ci)
    assert {g["n"] for g in default_grid("gaussian_ci", paper_scale=True)} == {10_000}

    stairs = default_grid("staircase_rate")
    assert {(g["n"], g["q"]) for g in stairs} == {
        (n, q) for q in (0.4, 0.8) for n in (1_000, 10_000, 100_000)
    }

    ipw = default_grid("ipw_compare")
    assert len(ipw) == 12
    assert {g["method"] for g in ipw} == {"ipw", "ipw_clip", "resampling"}
    assert {g["mu"] for g in ipw} == {1.0, 2.0, 4.0, 8.0}


def test_rows_carry_rates_and_exact_stderr():
    spec = ExperimentSpec(
        name="staircase_rate", grid=({"n": 50, "q": 0.4},), replications=40, seed=3
    )
    rows = run_experiment(spec)
    assert len(rows) == 1
    row = rows[0]
    assert set(row) == {"n", "q"} | _ROW_KEYS
    rate = row["rejection_rate"]
    assert 0.0 <= rate <= 1.0
    assert row["mc_stderr"] == float(np.sqrt(rate * (1.0 - rate) / 40))
    # m = floor(50^0.4) = 4 for every replication
    assert row["mean_m_used"] == 4.0


def test_runs_are_deterministic_and_thread_invariant():
    grid = ({"n": 60, "q": 0.4}, {"n": 90, "q": 0.8})
    spec = ExperimentSpec(name="staircase_rate", grid=grid, replications=3, seed=11)
    serial = run_experiment(spec, threads=1)
    again = run_experiment(spec, threads=1)
    threaded = run_experiment(spec, threads=3)
    assert rows_to_csv(serial) == rows_to_csv(again) == rows_to_csv(threaded)


def test_duplicate_grid_points_reproduce_the_same_row():
    g = {"n": 70, "q": 0.8}
    spec = ExperimentSpec(
        name="staircase_rate", grid=(g, dict(g)), replications=4, seed=2
    )
    rows = run_experiment(spec)
    assert rows[0] == rows[1]


def test_gaussian_ci_runs_at_a_small_grid_point():
    spec = ExperimentSpec(
        name="gaussian_ci",
        grid=({"n": 400, "theta": 0.0, "sigma": 1.0, "m": "sqrt"},),
        replications=3,
        seed=5,
    )
    row = run_experiment(spec)[0]
    assert row["mean_m_used"] == 20.0
    assert 0.0 <= row["rejection_rate"] <= 1.0


def test_off_policy_two_sample_variant_runs():
    spec = ExperimentSpec(
        name="off_policy",
        grid=({"n": 60, "delta": 0.0, "hypothesis": "two_sample_mw"},),
        replications=2,
        seed=7,
    )
    row = run_experiment(spec)[0]
    # pooled size is 2n = 120, so m = floor(sqrt(120)) = 10
    assert row["mean_m_used"] == 10.0


def test_remaining_studies_run_at_toy_sizes():
    toy = {
        "cond_indep": {"n": 120, "theta": 0.0, "tau": 1, "test": "pearson", "m": 6},
        "verma_gaussian": {"n": 200, "theta": 0.0, "m": "sqrt"},
        "verma_binary": {"n": 150, "edge": True, "m": "sqrt"},
        "verma_nonlinear": {"n": 150, "theta": 0.0, "m": "sqrt"},
    }
    for name, g in toy.items():
        spec = ExperimentSpec(name=name, grid=(g,), replications=2, seed=1)
        row = run_experiment(spec)[0]
        assert 0.0 <= row["rejection_rate"] <= 1.0, name
        assert row["mean_m_used"] >= 1.0, name


def test_unknown_method_inside_a_grid_point_is_reported():
    spec = ExperimentSpec(
        name="ipw_compare",
        grid=({"n": 30, "mu": 1.0, "method": "bogus"},),
        replications=1,
    )
    with pytest.raises(ValueError, match="unknown method 'bogus'"):
        run_experiment(spec)


def test_rows_to_csv_format_is_exact():
    rows = [
        {"n": 50, "q": 0.4, "rejection_rate": 0.25, "edge": True},
        {"n": 100, "q": 0.8, "rejection_rate": 1.0, "edge": False},
    ]
    assert rows_to_csv(rows) == (
        "n,q,rejection_rate,edge\n50,0.4,0.25,True\n100,0.8,1.0,False\n"
    )
    assert rows_to_csv([]) == ""
    ragged = [{"a": 1.0, "b": 2}, {"a": 3.5}]
    assert rows_to_csv(ragged) == "a,b\n1.0,2\n3.5,\n"

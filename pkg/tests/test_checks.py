import numpy as np
import pytest

from checks import (
    SuiteResult,
    brute_force_assignment,
    geometry_suite,
    grad_suite,
    matching_suite,
    rpe_suite,
    run_suites,
)


def test_suite_result_bounds():
    result = SuiteResult("demo")
    result.expect("small", 1e-6, 1e-3)
    assert result.passed
    result.expect("big", 1.0, 1e-3)
    assert not result.passed
    assert result.failures and result.failures[0].startswith("big=")
    result = SuiteResult("floor")
    result.expect("at_least", 1.0, 1.0, below=False)
    assert result.passed and result.to_dict()["measurements"] == {"at_least": 1.0}


def test_brute_force_assignment():
    assert brute_force_assignment(np.array([[1.0, 2.0], [2.0, 4.0]])) == 4.0


def test_matching_suite():
    result = matching_suite(trials=50)
    assert result.passed
    assert result.measurements["oracle_agreements"] == 50.0


def test_rpe_suite():
    result = rpe_suite(offsets_count=500)
    assert result.passed, result.failures
    errors = [result.measurements[f"table_res{r}_max_abs_err"] for r in (5, 10, 25, 50)]
    assert errors == sorted(errors, reverse=True)


@pytest.mark.slow
def test_geometry_suite():
    result = geometry_suite(pairs=10)
    assert result.passed, result.failures


@pytest.mark.slow
def test_grad_suite():
    result = grad_suite(max_entries=4)
    assert result.passed, result.failures
    assert result.measurements["vertex_mlp_parameters_checked"] > 0


def test_run_suites_single():
    results = run_suites("matching")
    assert [r.suite for r in results] == ["matching"]

"""Runs every numbered verification check, one test per check.

Each test prints its check's pass/fail line (straight to the real
stdout so pytest capture does not swallow it) and then asserts the
outcome, so a red test carries the failing sub-check in its message.
The same checks back the ``dasim verify`` subcommand.
"""

import sys

import pytest

from dasim import acceptance


def _run(number: int) -> acceptance.CriterionResult:
    results = acceptance.run_all({number})
    assert len(results) == 1
    result = results[0]
    print(result.line(), file=sys.__stdout__, flush=True)
    return result


def test_criterion_1_noise_sampler_distribution():
    result = _run(1)
    assert result.passed, result.detail


@pytest.mark.slow
def test_criterion_2_measurement_unbiasedness():
    result = _run(2)
    assert result.passed, result.detail


@pytest.mark.slow
def test_criterion_3_estimator_calibration():
    result = _run(3)
    assert result.passed, result.detail


@pytest.mark.slow
def test_criterion_4_swap_variance_conservativeness():
    result = _run(4)
    assert result.passed, result.detail


def test_criterion_5_swap_invariants():
    result = _run(5)
    assert result.passed, result.detail


def test_criterion_6_postprocessing_constraints():
    result = _run(6)
    assert result.passed, result.detail


def test_criterion_7_geocode_crosswalk():
    result = _run(7)
    assert result.passed, result.detail


@pytest.mark.slow
def test_criterion_8_error_ordering_and_composition_cost():
    result = _run(8)
    assert result.passed, result.detail


def test_criterion_9_degenerate_inputs():
    result = _run(9)
    assert result.passed, result.detail


def test_unknown_check_numbers_are_rejected():
    with pytest.raises(Exception) as excinfo:
        acceptance.run_all({1, 12})
    assert "12" in str(excinfo.value)


def test_run_all_covers_every_check_once():
    numbers = [r.number for r in acceptance.run_all({5, 9})]
    assert numbers == [5, 9]

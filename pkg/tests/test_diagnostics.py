"""
Tests for the finite-difference gradient-check suite.
"""

import pytest

from app.core.errors import ConfigurationError
from app.services.diagnostics import CHECKS, run_gradcheck_suite

FAST_CHECKS = [name for name in CHECKS if name != "detector"]


@pytest.mark.parametrize("name", FAST_CHECKS)
def test_check_passes(name):
    (report,) = run_gradcheck_suite(0, [name])
    assert report.passed, f"{name}: max relative error {report.max_relative_error:.3e}"
    assert report.failed_entries == 0


def test_reports_follow_the_requested_order():
    reports = run_gradcheck_suite(1, ["losses", "conv2d"])
    assert len(reports) == 2
    assert all(r.passed for r in reports)


def test_unknown_check():
    with pytest.raises(ConfigurationError, match="unknown"):
        run_gradcheck_suite(0, ["conv2d", "attention"])


@pytest.mark.slow
def test_whole_detector():
    (report,) = run_gradcheck_suite(0, ["detector"])
    assert report.passed

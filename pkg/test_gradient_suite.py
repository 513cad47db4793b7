"""Finite-difference checks of every operator, run through the suite registry."""

import pytest

from gradient_suite import CHECKS, TOLERANCE, run_suite


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_check_passes_for_seed_zero(name):
    assert CHECKS[name](0) < TOLERANCE


def test_run_suite_selects_by_name():
    results = run_suite(seeds=(0, 1), names=["linear", "ssim"])
    assert [r.name for r in results] == ["linear", "ssim"]
    assert all(r.passed for r in results)
    assert all(r.seconds >= 0 for r in results)


def test_run_suite_rejects_unknown_checks():
    with pytest.raises(ValueError):
        run_suite(names=["matmul"])

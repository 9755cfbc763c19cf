"""Gradient suites on seeds other than the acceptance seed."""

import pytest

from infogeo.gradsuite import (ELEMENTWISE_TOL, LOSSES, distill_suite, elementwise_suite,
                               loss_suite, tiny_config)


@pytest.mark.slow
def test_loss_suite_other_seed():
    errors = loss_suite(seed=3)
    assert set(errors) == set(LOSSES)
    assert max(errors.values()) < 1e-3


def test_distill_suite_both_forms():
    assert distill_suite(seed=4) < 1e-4


def test_elementwise_suite_small():
    assert elementwise_suite(trials=200, seed=5) < ELEMENTWISE_TOL


def test_tiny_config_keeps_struct_nontrivial():
    cfg = tiny_config()
    assert cfg.n_slots > cfg.r + 1 and cfg.batch_size == 2

#!/usr/bin/env python3
"""
Tests for the built-in property suites
"""

import numpy as np
import pytest

from core import autodiff as ad
from core import verification


def bad_tanh(a):
    out = np.tanh(a.data)
    return ad.make_node(out, (a,), lambda g: (g * (1.0 + out * out),), 'tanh')


def test_every_suite_is_registered_and_passes():
    table, status = verification.run_verify(seed=0)
    assert status == 0, table.to_string()
    assert list(table['suite']) == list(verification.SUITES)
    assert list(table.columns) == ['suite', 'cases', 'worst', 'tolerance', 'passed', 'detail']
    assert table['passed'].all()


def test_ot_check_runs_the_transport_suites_only():
    table, status = verification.run_ot_check(seed=1)
    assert status == 0
    assert tuple(table['suite']) == verification.OT_SUITES


def test_corrupted_adjoint_fails_the_gradient_suite():
    table, status = verification.run_suites(('grad_check', 'pooling_invariance'), seed=0,
                                            primitive_overrides={'tanh': bad_tanh})
    assert status == 1
    failed = table[~table['passed']]
    assert list(failed['suite']) == ['grad_check']
    assert 'tanh' in failed['detail'].iloc[0]


def test_suites_run_in_double_precision_and_restore_the_default():
    try:
        ad.set_default_dtype('float32')
        _, status = verification.run_suites(('grad_check',), seed=2)
        assert status == 0
        assert ad.get_default_dtype() == np.float32
    finally:
        ad.set_default_dtype('float64')


def test_unknown_suites_and_overrides_are_rejected():
    with pytest.raises(ValueError):
        verification.run_suites(('no_such_suite',))
    with pytest.raises(ValueError):
        verification.suite_grad_check(overrides={'arctan': bad_tanh})

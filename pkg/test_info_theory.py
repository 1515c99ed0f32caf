#!/usr/bin/env python3
"""
Tests for discrete entropies, the conditioning gain and the Hellman bound
"""

import numpy as np
import pytest

from core import info_theory
from core.info_theory import DiscreteJoint


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_conditional_entropy_of_binary_symmetric_channel():
    joint = DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]), ('x', 'y'))
    assert info_theory.conditional_entropy(joint, 'y', 'x') == pytest.approx(0.7219, abs=1e-4)
    assert info_theory.entropy(joint, 'y') == pytest.approx(1.0)


def test_zero_mass_cells_contribute_nothing():
    joint = DiscreteJoint(np.array([[0.5, 0.0], [0.0, 0.5]]), ('x', 'y'))
    assert info_theory.conditional_entropy(joint, 'y', 'x') == pytest.approx(0.0, abs=1e-12)


def test_conditioning_never_increases_entropy():
    rng = _rng(1)
    for _ in range(200):
        sizes = tuple(int(s) for s in rng.integers(2, 5, size=3))
        gain = info_theory.conditioning_gain(info_theory.random_joint(rng, sizes))
        assert gain.cmi >= -1e-12
        assert gain.cmi == pytest.approx(gain.h_y_given_x - gain.h_y_given_xp)


def test_conditionally_independent_positions_add_nothing():
    rng = _rng(2)
    for _ in range(50):
        gain = info_theory.conditioning_gain(info_theory.conditionally_independent_joint(rng))
        assert abs(gain.cmi) < 1e-9


def test_position_that_copies_the_label_removes_all_uncertainty():
    joints = info_theory.builtin_joints()
    gain = info_theory.conditioning_gain(joints['position-copies-label'])
    assert gain.h_y_given_x == pytest.approx(1.0)
    assert gain.h_y_given_xp == pytest.approx(0.0, abs=1e-12)
    assert info_theory.conditioning_gain(joints['independent-coin']).cmi == pytest.approx(0.0, abs=1e-12)


def test_hellman_bound_holds_and_is_tight_for_uniform_binary():
    rng = _rng(3)
    for _ in range(200):
        result = info_theory.hellman_bound(info_theory.random_joint(rng, (3, 2), ('x', 'y')))
        assert result.holds
        assert result.bayes_error <= result.bound + 1e-12
    uniform = info_theory.hellman_bound(DiscreteJoint(np.full((2, 2), 0.25), ('x', 'y')))
    assert uniform.bayes_error == pytest.approx(0.5)
    assert uniform.bound == pytest.approx(0.5)


def test_hellman_bound_uses_the_x_y_marginal_of_three_way_joints():
    joint = info_theory.builtin_joints()['position-copies-label']
    result = info_theory.hellman_bound(joint)
    assert result.bayes_error == pytest.approx(0.5)
    assert result.bound == pytest.approx(0.5)


def test_joint_validation():
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([[0.5, 0.4], [0.0, 0.0]]), ('x', 'y'))
    with pytest.raises(ValueError):
        DiscreteJoint(np.array([[1.5, -0.5], [0.0, 0.0]]), ('x', 'y'))
    with pytest.raises(ValueError):
        DiscreteJoint(np.full((2, 2), 0.25), ('x', 'x'))
    with pytest.raises(ValueError):
        DiscreteJoint(np.full((2, 2), 0.25))
    with pytest.raises(ValueError):
        info_theory.conditioning_gain(DiscreteJoint(np.full((2, 2), 0.25), ('x', 'y')))


def test_parse_joint_table():
    joint = info_theory.parse_joint_table("# binary channel\n2 2\n0.4, 0.1\n0.1 0.4\n")
    assert joint.axes == ('x', 'y')
    assert joint.table.shape == (2, 2)
    three_way = info_theory.parse_joint_table("2 1 2\n" + ' '.join(['0.25'] * 4))
    assert three_way.axes == ('x', 'p', 'y')


def test_parse_joint_table_errors_name_the_line():
    with pytest.raises(ValueError, match='line 2'):
        info_theory.parse_joint_table("2 2\n0.5 abc\n")
    with pytest.raises(ValueError):
        info_theory.parse_joint_table("2 2\n0.5 0.5\n")
    with pytest.raises(ValueError):
        info_theory.parse_joint_table("")


def test_load_joint_table_and_describe(tmp_path):
    path = tmp_path / 'joint.txt'
    path.write_text("2 2\n0.4 0.1\n0.1 0.4\n", encoding='utf-8')
    summary = info_theory.describe_joint(info_theory.load_joint_table(path))
    assert summary['H(Y|X)'] == pytest.approx(0.7219, abs=1e-4)
    assert summary['bayes_error'] == pytest.approx(0.2)
    assert 'H(Y|X,P)' not in summary

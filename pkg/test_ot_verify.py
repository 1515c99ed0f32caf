#!/usr/bin/env python3
"""
Tests for the optimal-transport checks
"""

import numpy as np
import pytest

from core import ot_verify, permutation
from core.autodiff import Tensor
from core.jigsaw import equivalence_loss
from core.ot_verify import CostMatrix


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_quadratic_cost_is_zero_on_the_diagonal_of_identical_sets():
    P = ot_verify.random_coordinates(5, _rng())
    C = ot_verify.quadratic_cost(P, P).C
    assert np.array_equal(np.diag(C), np.zeros(5))
    assert np.all(C >= 0)


def test_cost_matrix_validation():
    with pytest.raises(ValueError):
        CostMatrix(np.array([[0.0, -1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        CostMatrix(np.zeros(3))
    with pytest.raises(ValueError):
        ot_verify.quadratic_cost(np.zeros((3, 2)), np.zeros((4, 2)))


def test_bruteforce_and_assignment_agree():
    rng = _rng(1)
    for n in range(1, 7):
        P, Q = ot_verify.random_coordinates(n, rng), ot_verify.random_coordinates(n, rng)
        exact = ot_verify.emd_bruteforce(P, Q)
        assert exact.cost == pytest.approx(ot_verify.emd_assignment(P, Q).cost, abs=1e-12)
        rows, cols = exact.marginals()
        assert np.allclose(rows, 1.0 / n) and np.allclose(cols, 1.0 / n)


def test_bruteforce_refuses_large_sets():
    P = ot_verify.random_coordinates(9, _rng())
    with pytest.raises(ValueError):
        ot_verify.emd_bruteforce(P, P)


def test_one_dimensional_emd_matches_sorted_matching():
    P = np.array([0.0, 1.0, 3.0])
    Q = np.array([2.0, 0.5, 4.0])
    # sorted matching pairs 0-0.5, 1-2, 3-4
    assert ot_verify.emd_bruteforce(P, Q).cost == pytest.approx((0.25 + 1.0 + 1.0) / 3)


def test_annealed_sinkhorn_is_within_one_percent_of_exact():
    rng = _rng(2)
    for _ in range(5):
        n = int(rng.integers(2, 7))
        P, Q = ot_verify.random_coordinates(n, rng), ot_verify.random_coordinates(n, rng)
        exact = ot_verify.emd_bruteforce(P, Q).cost
        plan = ot_verify.sinkhorn_annealed(ot_verify.quadratic_cost(P, Q))
        assert abs(plan.cost - exact) <= 0.01 * exact
        rows, cols = plan.marginals()
        assert np.allclose(rows, 1.0 / n, atol=1e-6) and np.allclose(cols, 1.0 / n, atol=1e-6)


def test_sinkhorn_reports_non_convergence():
    rng = _rng(3)
    C = ot_verify.quadratic_cost(ot_verify.random_coordinates(5, rng), ot_verify.random_coordinates(5, rng))
    plan, (f, g) = ot_verify.sinkhorn(C, epsilon=1e-4, max_iters=1, tol=1e-15)
    assert not plan.converged
    assert plan.iterations == 1
    assert plan.violation > 0
    assert f.shape == g.shape == (5,)


def test_sinkhorn_rejects_non_positive_epsilon():
    with pytest.raises(ValueError):
        ot_verify.sinkhorn(np.zeros((2, 2)), epsilon=0.0)
    with pytest.raises(ValueError):
        ot_verify.sinkhorn_annealed(np.zeros((2, 2)), factor=1.5)


def test_shuffled_copy_has_zero_transport_cost():
    rng = _rng(4)
    for n in (3, 6, 12):
        coords = ot_verify.random_coordinates(n, rng)
        assert ot_verify.shuffled_emd(coords, permutation.sample(n, rng)) == pytest.approx(0.0, abs=1e-14)


def test_inverse_ot_objective_is_twice_n_equivalence_loss():
    rng = _rng(5)
    for _ in range(20):
        n, k = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        F, F_prime = rng.normal(size=(n, k)), rng.normal(size=(n, k))
        perm = permutation.sample(n, rng)
        assert ot_verify.matrix_form_check(F, F_prime, perm) < 1e-9
        objective = ot_verify.inverse_ot_objective(F, F_prime, perm)
        scaled = 2 * n * equivalence_loss(Tensor(F), Tensor(F_prime), perm).item()
        assert objective == pytest.approx(scaled, abs=1e-9)


def test_inverse_ot_objective_rejects_mismatches():
    with pytest.raises(ValueError):
        ot_verify.inverse_ot_objective(np.zeros((3, 2)), np.zeros((3, 3)), permutation.Permutation.identity(3))
    with pytest.raises(ValueError):
        ot_verify.inverse_ot_objective(np.zeros((3, 2)), np.zeros((3, 2)), permutation.Permutation.identity(2))

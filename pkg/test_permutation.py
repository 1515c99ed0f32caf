#!/usr/bin/env python3
"""
Tests for permutations and the shuffling operator
"""

import numpy as np
import pytest

from core import autodiff as ad
from core import permutation
from core.permutation import Permutation


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_apply_moves_row_sigma_i_to_row_i():
    perm = Permutation((2, 0, 3, 1))
    assert permutation.apply(perm, np.arange(4)).tolist() == [2, 0, 3, 1]
    X = np.arange(8).reshape(4, 2)
    assert np.array_equal(permutation.apply(perm, X), X[[2, 0, 3, 1]])


def test_apply_equals_left_multiplication_by_the_matrix():
    rng = _rng(1)
    perm = permutation.sample(6, rng)
    X = rng.normal(size=(6, 3))
    assert np.array_equal(permutation.to_matrix(perm) @ X, permutation.apply(perm, X))


def test_permutation_matrix_is_orthogonal():
    perm = permutation.sample(7, _rng(2))
    P = permutation.to_matrix(perm)
    assert np.array_equal(P.T @ P, np.eye(7))


def test_inverse_undoes_the_shuffle():
    rng = _rng(3)
    perm = permutation.sample(9, rng)
    X = rng.normal(size=(9, 2))
    restored = permutation.apply(permutation.inverse(perm), permutation.apply(perm, X))
    assert np.array_equal(restored, X)
    assert perm.compose(permutation.inverse(perm)).is_identity()


def test_compose_matches_matrix_product():
    rng = _rng(4)
    a, b = permutation.sample(5, rng), permutation.sample(5, rng)
    assert np.array_equal(permutation.to_matrix(a.compose(b)),
                          permutation.to_matrix(a) @ permutation.to_matrix(b))


def test_sample_is_a_seeded_bijection():
    first = permutation.sample(10, _rng(5))
    again = permutation.sample(10, _rng(5))
    assert first == again
    assert sorted(first.sigma) == list(range(10))


def test_identity_and_from_sequence():
    assert Permutation.identity(4).is_identity()
    assert permutation.from_sequence([1, 0]).sigma == (1, 0)
    assert len(Permutation.identity(3)) == 3


def test_invalid_permutations_are_rejected():
    with pytest.raises(ValueError):
        Permutation((0, 0, 1))
    with pytest.raises(ValueError):
        permutation.sample(0, _rng())
    with pytest.raises(ValueError):
        permutation.apply(Permutation.identity(3), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        Permutation.identity(3).compose(Permutation.identity(4))


def test_apply_on_tensors_is_differentiable():
    perm = Permutation((1, 2, 0))
    X = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    weights = ad.Tensor(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))
    ad.backward(ad.tensor_sum(ad.mul(permutation.apply(perm, X), weights)))
    # row sigma(i) of X receives the weight of row i
    assert np.array_equal(X.grad, [[3.0, 3.0], [1.0, 1.0], [2.0, 2.0]])


def test_sampling_is_uniform_over_small_groups():
    rng = _rng(6)
    counts = {}
    for _ in range(60000):
        sigma = permutation.sample(3, rng).sigma
        counts[sigma] = counts.get(sigma, 0) + 1
    assert len(counts) == 6
    for count in counts.values():
        assert abs(count / 60000 - 1 / 6) <= 0.03 / 6


def test_inverse_of_a_three_cycle():
    perm = Permutation((2, 0, 1))
    assert permutation.inverse(perm).sigma == (1, 2, 0)
    assert permutation.inverse(permutation.inverse(perm)) == perm
    assert permutation.apply(perm, np.array(['a', 'b', 'c'])).tolist() == ['c', 'a', 'b']

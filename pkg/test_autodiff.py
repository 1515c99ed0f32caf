#!/usr/bin/env python3
"""
Tests for the reverse-mode autodiff engine
"""

import numpy as np
import pytest

from core import autodiff as ad
from core.autodiff import DomainError, ShapeError, Tensor


def _leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def test_add_broadcast_accumulates_gradient_over_broadcast_axis():
    a = _leaf(np.ones((2, 3)))
    b = _leaf([1.0, 2.0, 3.0])
    ad.backward(ad.tensor_sum(ad.add(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, np.full(3, 2.0))


def test_reused_operand_accumulates_both_paths():
    a = _leaf([1.5, -2.0])
    ad.backward(ad.tensor_sum(ad.mul(a, a)))
    assert np.allclose(a.grad, [3.0, -4.0])


def test_scale_and_operators_build_the_same_graph():
    a = _leaf([[1.0, 2.0], [3.0, 4.0]])
    out = (a * 3.0 - a / 2.0).sum()
    out.backward()
    assert out.item() == pytest.approx(25.0)
    assert np.allclose(a.grad, 2.5)


def test_no_grad_records_nothing():
    a = _leaf([1.0, 2.0])
    with ad.no_grad():
        out = ad.mul(a, a)
    assert not out.requires_grad
    assert out.is_leaf


@pytest.mark.parametrize('name', ['tanh', 'sigmoid', 'softplus', 'exp', 'softmax', 'log_softmax', 'relu'])
def test_elementwise_and_softmax_gradients(name):
    rng = np.random.default_rng(3)
    x = _leaf(_away_from_zero(rng, (3, 4)))
    err = ad.grad_check(getattr(ad, name), [x])
    assert err < 1e-6


def test_log_gradient_on_positive_inputs():
    rng = np.random.default_rng(4)
    x = _leaf(rng.uniform(0.5, 2.0, size=(2, 3)))
    assert ad.grad_check(ad.log, [x]) < 1e-6


def test_matmul_and_batched_matmul_gradients():
    rng = np.random.default_rng(5)
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4, 2)))
    assert ad.grad_check(ad.matmul, [a, b]) < 1e-6
    batched, shared = _leaf(rng.normal(size=(2, 3, 2))), _leaf(rng.normal(size=(2, 4)))
    assert ad.grad_check(ad.matmul, [batched, shared]) < 1e-6


def test_layer_norm_gradient():
    rng = np.random.default_rng(6)
    x = _leaf(rng.normal(size=(3, 4)))
    gamma, beta = _leaf(rng.uniform(0.5, 1.5, size=4)), _leaf(rng.normal(size=4))
    assert ad.grad_check(ad.layer_norm, [x, gamma, beta]) < 1e-5


def test_depthwise_and_dense_conv2d_gradients():
    rng = np.random.default_rng(7)
    x = _leaf(rng.normal(size=(1, 3, 3, 2)))
    depthwise = _leaf(rng.normal(size=(3, 3, 1, 2)))
    assert ad.grad_check(lambda a, w: ad.conv2d(a, w, groups=2), [x, depthwise]) < 1e-6
    dense = _leaf(rng.normal(size=(3, 3, 2, 2)))
    assert ad.grad_check(ad.conv2d, [x, dense]) < 1e-6


def test_conv2d_identity_kernel_is_a_copy():
    x = Tensor(np.arange(18, dtype=np.float64).reshape(1, 3, 3, 2))
    w = np.zeros((3, 3, 1, 2))
    w[1, 1, 0, :] = 1.0
    assert np.array_equal(ad.conv2d(x, Tensor(w), groups=2).numpy(), x.numpy())


def test_structural_primitives_gradients():
    rng = np.random.default_rng(8)
    x = _leaf(rng.normal(size=(4, 3)))
    assert ad.grad_check(lambda a: ad.gather(a, [2, 0, 0, 3], axis=0), [x]) < 1e-6
    assert ad.grad_check(lambda a: ad.concat([a, ad.scale(a, 2.0)], axis=1), [x]) < 1e-6
    assert ad.grad_check(lambda a: ad.transpose(ad.reshape(a, (2, 6))), [x]) < 1e-6
    assert ad.grad_check(lambda a: ad.mean(a, axis=0), [x]) < 1e-6
    assert ad.grad_check(ad.sq_norm, [x]) < 1e-6


def test_max_reduce_routes_gradient_to_the_maximizer():
    x = _leaf([[1.0, 5.0], [3.0, 2.0]])
    ad.backward(ad.tensor_sum(ad.max_reduce(x, axis=0)))
    assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_clip_gradient_is_zero_outside_the_interval():
    x = _leaf([-2.0, 0.5, 3.0])
    ad.backward(ad.tensor_sum(ad.clip(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_shape_error_names_the_primitive():
    with pytest.raises(ShapeError) as excinfo:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert excinfo.value.primitive == 'matmul'
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_log_outside_domain_is_rejected():
    with pytest.raises(DomainError):
        ad.log(Tensor([0.0, 1.0]))


def test_forward_rejects_non_finite_results():
    with np.errstate(over='ignore'):
        with pytest.raises(DomainError):
            ad.forward(ad.exp, Tensor([1000.0]))


def test_backward_needs_a_scalar_root():
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(_leaf([1.0, 2.0]), 2.0))


def test_grad_check_limits_checked_elements():
    with pytest.raises(ValueError):
        ad.grad_check(ad.tanh, [_leaf(np.zeros((10, 10)))])


def test_grad_check_detects_a_wrong_adjoint():
    def bad_tanh(a):
        out = np.tanh(a.data)
        return ad.make_node(out, (a,), lambda g: (g * (1.0 + out * out),), 'tanh')

    x = _leaf(np.linspace(-1.0, 1.0, 6))
    assert ad.grad_check(bad_tanh, [x]) > 1e-2


def test_default_dtype_switch():
    try:
        ad.set_default_dtype('float32')
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        ad.set_default_dtype('float64')
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_default_dtype('float16')

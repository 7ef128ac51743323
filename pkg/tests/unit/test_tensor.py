# Copyright The SVBI Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License"). You
# may not use this file except in compliance with the License. A copy of
# the License is located at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# or in the "license" file accompanying this file. This file is
# distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF
# ANY KIND, either express or implied. See the License for the specific
# language governing permissions and limitations under the License.
import numpy as np
import pytest

from svbi import tensor
from svbi.tensor import Function, NonScalarLossError, ShapeMismatchError, Tensor
from tests.helpers import numeric_gradient


def _check_gradient(build, value, atol=1e-6):
    """Compare the tape gradient of ``build(Tensor) -> scalar`` against finite differences."""
    with tensor.precision(np.float64):
        x = Tensor(value, requires_grad=True)
        build(x).backward()
        expected = numeric_gradient(lambda v: build(Tensor(v)).item(), value)
        np.testing.assert_allclose(x.grad, expected, atol=atol, rtol=1e-5)


@pytest.fixture
def value():
    return np.random.default_rng(0).normal(size=(3, 4)) + 0.1


def test_default_dtype_is_float32():
    assert np.float32 == tensor.get_default_dtype()
    assert np.float32 == Tensor([1.0]).dtype


def test_precision_context():
    with tensor.precision(np.float64):
        assert np.float64 == Tensor([1.0]).dtype
    assert np.float32 == Tensor([1.0]).dtype


def test_no_grad_skips_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tensor.no_grad():
        assert not tensor.is_grad_enabled()
        y = x * 2
    assert tensor.is_grad_enabled()
    assert not y.requires_grad
    assert y.creator is None


def test_constants_do_not_require_grad():
    y = Tensor([1.0]) + 2.0
    assert not y.requires_grad


@pytest.mark.parametrize(
    "build",
    [
        lambda x: (x * x).sum(),
        lambda x: (x + 3.0).mean(),
        lambda x: (2.0 - x).sum(),
        lambda x: (1.0 / (x * x + 1.0)).sum(),
        lambda x: (-x).exp().sum(),
        lambda x: ((x * x + 1.0).log()).sum(),
        lambda x: (x**3).sum(),
        lambda x: x.tanh().sum(),
        lambda x: x.sigmoid().sum(),
        lambda x: x.softplus().sum(),
        lambda x: (x.reshape(4, 3) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
        lambda x: (x.transpose() * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
        lambda x: (x[1:, ::2] * x[1:, ::2]).sum(),
        lambda x: (x.sum(axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(),
        lambda x: (x.mean(axis=1, keepdims=True) * x).sum(),
        lambda x: (x @ Tensor(np.arange(8.0).reshape(4, 2))).sum(),
    ],
)
def test_gradients_match_finite_differences(build, value):
    _check_gradient(build, value)


def test_relu_and_abs_gradients():
    x = Tensor([-2.0, 3.0], requires_grad=True)
    (x.relu() + x.abs()).sum().backward()
    np.testing.assert_array_equal([-1.0, 2.0], x.grad)


def test_maximum_passes_gradient_that_lifts_off_the_floor():
    x = Tensor([-1.0, 0.5, -2.0], requires_grad=True)
    y = x.maximum(0.0)
    np.testing.assert_array_equal([0.0, 0.5, 0.0], y.numpy())
    y.backward(np.array([1.0, 1.0, -1.0]))
    np.testing.assert_array_equal([0.0, 1.0, -1.0], x.grad)


def test_broadcast_gradient_is_unbroadcast():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    bias = Tensor(np.ones((1, 3)), requires_grad=True)
    (x * 2.0 + bias).sum().backward()
    np.testing.assert_array_equal(np.full((1, 3), 2.0), bias.grad)
    np.testing.assert_array_equal(np.full((2, 3), 2.0), x.grad)


def test_unbroadcast_sums_leading_axes():
    grad = np.ones((4, 2, 3))
    np.testing.assert_array_equal(np.full((1, 3), 8.0), Function.unbroadcast(grad, (1, 3)))
    assert grad is Function.unbroadcast(grad, (4, 2, 3))


def test_reused_tensor_accumulates_within_one_pass():
    x = Tensor([3.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose([7.0], x.grad)


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal([4.0, 4.0], x.grad)
    x.zero_grad()
    assert x.grad is None


def test_intermediate_gradients_only_when_retained():
    x = Tensor([1.0, 2.0], requires_grad=True)
    hidden = x * 3.0
    kept = (x * 2.0).retain_grad()
    (hidden + kept).sum().backward()
    assert hidden.grad is None
    np.testing.assert_array_equal([1.0, 1.0], kept.grad)


def test_backward_on_non_scalar_requires_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLossError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.array([1.0, 0.5]))
    np.testing.assert_array_equal([2.0, 1.0], x.grad)


def test_detach_cuts_the_tape():
    x = Tensor([1.0], requires_grad=True)
    y = (x * 2.0).detach() * x
    y.sum().backward()
    np.testing.assert_array_equal([2.0], x.grad)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatchError) as error:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert 2 == len(error.value.axes)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    rhs = Tensor(rng.normal(size=(2, 4, 5)))
    _check_gradient(lambda x: (x @ rhs).sum(), rng.normal(size=(2, 3, 4)))


def test_scalar_accessors():
    x = Tensor([[1.0, 2.0]])
    assert (1, 2) == x.shape
    assert 2 == x.ndim
    assert 2 == x.size
    assert 3.0 == x.sum().item()
    assert "requires_grad=False" in repr(x)

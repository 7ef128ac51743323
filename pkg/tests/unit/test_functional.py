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

from svbi import functional as F
from svbi import tensor
from svbi.tensor import ShapeMismatchError, Tensor
from tests.helpers import numeric_gradient


def _naive_conv(x, weight, bias, stride, padding):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, w = x.shape
    o, _, k, _ = weight.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    out = np.zeros((n, o, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            patch = x[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, weight)
    return out + bias.reshape(1, -1, 1, 1)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_sum(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    weight = rng.normal(size=(4, 3, 3, 3))
    bias = rng.normal(size=(4,))
    with tensor.precision(np.float64):
        out = F.conv2d(Tensor(x), Tensor(weight), Tensor(bias), stride=stride, padding=padding)
    expected = _naive_conv(x, weight, bias, stride, padding)
    assert expected.shape == out.shape
    assert (F.conv_output_size(7, 3, stride, padding), F.conv_output_size(6, 3, stride, padding)) == out.shape[2:]
    np.testing.assert_allclose(expected, out.numpy(), atol=1e-10)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(1)
    x_value = rng.normal(size=(1, 2, 5, 5))
    w_value = rng.normal(size=(3, 2, 3, 3))
    b_value = rng.normal(size=(3,))
    side = F.conv_output_size(5, 3, stride, padding)
    cotangent = rng.normal(size=(1, 3, side, side))

    def loss(x, w, b):
        return (F.conv2d(x, w, b, stride=stride, padding=padding) * Tensor(cotangent)).sum()

    with tensor.precision(np.float64):
        x, w, b = Tensor(x_value, True), Tensor(w_value, True), Tensor(b_value, True)
        loss(x, w, b).backward()
        np.testing.assert_allclose(
            numeric_gradient(lambda v: loss(Tensor(v), Tensor(w_value), Tensor(b_value)).item(), x_value),
            x.grad,
            atol=1e-6,
        )
        np.testing.assert_allclose(
            numeric_gradient(lambda v: loss(Tensor(x_value), Tensor(v), Tensor(b_value)).item(), w_value),
            w.grad,
            atol=1e-6,
        )
        np.testing.assert_allclose(cotangent.sum(axis=(0, 2, 3)), b.grad, atol=1e-10)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeMismatchError) as error:
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
    assert ["input axis 1 = 3", "weight axis 1 = 4"] == error.value.axes


def test_conv2d_rank_mismatch():
    with pytest.raises(ShapeMismatchError):
        F.conv2d(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ShapeMismatchError) as error:
        F.conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))))
    assert 1 == len(error.value.axes)


def test_conv2d_invalid_stride():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_conv2d_bias_mismatch():
    with pytest.raises(ShapeMismatchError):
        F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


def test_pixel_shuffle_layout():
    x = np.arange(2 * 8 * 2 * 3, dtype=np.float32).reshape(2, 8, 2, 3)
    out = F.pixel_shuffle(Tensor(x), 2).numpy()
    assert (2, 2, 4, 6) == out.shape
    for n, c, h, w, i, j in [(0, 0, 0, 0, 0, 0), (1, 1, 1, 2, 1, 0), (0, 1, 0, 1, 1, 1), (1, 0, 1, 0, 0, 1)]:
        assert x[n, c * 4 + i * 2 + j, h, w] == out[n, c, h * 2 + i, w * 2 + j]


def test_pixel_shuffle_identity_and_mismatch():
    x = Tensor(np.zeros((1, 3, 2, 2)))
    assert x is F.pixel_shuffle(x, 1)
    with pytest.raises(ShapeMismatchError):
        F.pixel_shuffle(x, 2)


def test_upsample_block_shape():
    x = Tensor(np.ones((1, 2, 3, 4)))
    out = F.upsample_block(x, Tensor(np.ones((12, 2, 3, 3))), factor=2)
    assert (1, 3, 6, 8) == out.shape
    with pytest.raises(ValueError):
        F.upsample_block(x, Tensor(np.ones((27, 2, 3, 3))), factor=3)


def test_linear_and_pool():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    weight = Tensor(np.eye(3)[:2])
    np.testing.assert_allclose([[1.0, 2.0], [4.0, 5.0]], F.linear(x, weight, Tensor([1.0, 1.0])).numpy())
    pooled = F.global_avg_pool(Tensor(np.arange(8.0).reshape(1, 2, 2, 2)))
    np.testing.assert_allclose([[1.5, 5.5]], pooled.numpy())


def test_mse_and_weighted_mse():
    a = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    b = Tensor(np.zeros((1, 1, 2, 2)))
    assert 7.5 == pytest.approx(F.mse(a, b).item())
    weights = np.array([[[[2.0, 0.0], [0.0, 2.0]]]])
    assert (2 * 1 + 2 * 16) / 4 == pytest.approx(F.weighted_mse(a, b, weights).item())
    assert F.mse(a, b).item() == pytest.approx(F.weighted_mse(a, b, np.ones((1, 1, 2, 2))).item())


def test_mse_shape_mismatch():
    with pytest.raises(ShapeMismatchError) as error:
        F.mse(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((1, 2, 4))))
    assert ["axis 2: 3 vs 4"] == error.value.axes
    with pytest.raises(ShapeMismatchError):
        F.weighted_mse(Tensor(np.zeros((2,))), Tensor(np.zeros((3,))), 1.0)


def test_log_softmax_is_stable():
    out = F.log_softmax(Tensor(np.array([[1000.0, 0.0]]))).numpy()
    assert np.all(np.isfinite(out))
    assert 0.0 == pytest.approx(out[0, 0])
    np.testing.assert_allclose([[0.5, 0.5]], F.softmax(np.array([[3.0, 3.0]])))


def test_log_softmax_gradient():
    rng = np.random.default_rng(3)
    value = rng.normal(size=(2, 5))
    cotangent = Tensor(rng.normal(size=(2, 5)))
    with tensor.precision(np.float64):
        x = Tensor(value, True)
        (F.log_softmax(x) * cotangent).sum().backward()
        expected = numeric_gradient(lambda v: (F.log_softmax(Tensor(v)) * cotangent).sum().item(), value)
    np.testing.assert_allclose(expected, x.grad, atol=1e-6)


def test_one_hot():
    np.testing.assert_array_equal([[0, 1, 0], [0, 0, 1]], F.one_hot([1, 2], 3))


def test_softmax_cross_entropy():
    logits = Tensor(np.zeros((2, 4)), requires_grad=True)
    loss = F.softmax_cross_entropy(logits, [0, 3])
    assert np.log(4) == pytest.approx(loss.item(), rel=1e-6)
    loss.backward()
    np.testing.assert_allclose([0.125 - 0.5, 0.125, 0.125, 0.125], logits.grad[0], rtol=1e-6)


def test_softmax_cross_entropy_label_errors():
    with pytest.raises(ValueError) as error:
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    assert "[3]" in str(error.value)
    with pytest.raises(ShapeMismatchError):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_kd_divergence_zero_for_identical_logits():
    logits = np.array([[1.0, -2.0, 0.5]])
    assert 0.0 == pytest.approx(F.kd_divergence(Tensor(logits), logits, temperature=2.0).item(), abs=1e-6)


def test_kd_divergence_scaled_by_temperature_squared():
    student = np.array([[0.0, 0.0]])
    teacher = np.array([[2.0, 0.0]])
    p = F.softmax(teacher / 4.0)[0]
    expected = 16.0 * float(np.sum(p * (np.log(p) - np.log(0.5))))
    assert expected == pytest.approx(F.kd_divergence(Tensor(student), teacher, temperature=4.0).item(), rel=1e-5)


def test_kd_divergence_only_differentiates_student():
    student = Tensor(np.array([[0.0, 1.0]]), requires_grad=True)
    teacher = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    F.kd_divergence(student, teacher).backward()
    assert student.grad is not None
    assert teacher.grad is None


def test_kd_divergence_invalid_temperature():
    with pytest.raises(ValueError):
        F.kd_divergence(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), temperature=0)

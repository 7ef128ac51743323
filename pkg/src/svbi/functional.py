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
"""Layer operations and losses built on :mod:`svbi.tensor`."""
import numpy as np

from svbi.tensor import Function, ShapeMismatchError, Tensor, as_tensor


class Conv2d(Function):
    """2D cross-correlation over NCHW inputs with OIKK weights.

    The kernel is applied one tap at a time: every (ki, kj) offset contributes a tensordot between the
    strided input window and the weight slice, which keeps memory at one output-sized buffer.
    """

    def forward(self, x, weight, bias=None, stride=1, padding=0):
        self.stride = stride
        self.padding = padding
        n, _, h, w = x.shape
        out_channels, _, kh, kw = weight.shape
        self.out_h = (h + 2 * padding - kh) // stride + 1
        self.out_w = (w + 2 * padding - kw) // stride + 1
        self.x_pad = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        out = np.zeros((n, self.out_h, self.out_w, out_channels), dtype=x.dtype)
        for ki in range(kh):
            for kj in range(kw):
                window = self._window(self.x_pad, ki, kj)
                out += np.tensordot(window, weight[:, :, ki, kj], axes=([1], [1]))
        out = out.transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1)
        return np.ascontiguousarray(out)

    def _window(self, x_pad, ki, kj):
        s = self.stride
        return x_pad[:, :, ki : ki + s * (self.out_h - 1) + 1 : s, kj : kj + s * (self.out_w - 1) + 1 : s]

    def backward(self, grad):
        x, weight = self.tensors[0], self.tensors[1]
        _, _, kh, kw = weight.shape
        grad_x_pad = np.zeros_like(self.x_pad)
        grad_w = np.zeros_like(weight.data)
        s = self.stride
        for ki in range(kh):
            for kj in range(kw):
                window = self._window(self.x_pad, ki, kj)
                grad_w[:, :, ki, kj] = np.tensordot(grad, window, axes=([0, 2, 3], [0, 2, 3]))
                contribution = np.tensordot(grad, weight.data[:, :, ki, kj], axes=([1], [0]))
                grad_x_pad[
                    :, :, ki : ki + s * (self.out_h - 1) + 1 : s, kj : kj + s * (self.out_w - 1) + 1 : s
                ] += contribution.transpose(0, 3, 1, 2)
        p = self.padding
        grad_x = grad_x_pad[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else grad_x_pad
        if len(self.tensors) == 3:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Apply a 2D convolution.

    Args:
        x (Tensor): Input of shape (N, C, H, W).
        weight (Tensor): Kernel of shape (O, C, K, K).
        bias (Tensor): Optional bias of shape (O,).
        stride (int): Stride in both spatial dims.
        padding (int): Zero padding on every spatial border.

    Returns:
        Tensor: Output of shape (N, O, floor((H + 2p - K) / s) + 1, floor((W + 2p - K) / s) + 1).

    Raises:
        ShapeMismatchError: If ranks, channels or spatial extents are incompatible.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            "conv2d expects NCHW input and OIKK weight, got {} and {}".format(x.shape, weight.shape),
            axes=["input rank = {}".format(x.ndim), "weight rank = {}".format(weight.ndim)],
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            "conv2d channel mismatch: input axis 1 = {} vs weight axis 1 = {}".format(x.shape[1], weight.shape[1]),
            axes=["input axis 1 = {}".format(x.shape[1]), "weight axis 1 = {}".format(weight.shape[1])],
        )
    offending = []
    for axis, kernel_axis in ((2, 2), (3, 3)):
        if x.shape[axis] + 2 * padding < weight.shape[kernel_axis]:
            offending.append(
                "input axis {} = {} (+2*{} padding) < kernel axis {} = {}".format(
                    axis, x.shape[axis], padding, kernel_axis, weight.shape[kernel_axis]
                )
            )
    if offending:
        raise ShapeMismatchError("conv2d kernel larger than padded input: " + "; ".join(offending), axes=offending)
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1, got {}".format(stride))
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(
            "conv2d bias shape {} does not match {} output channels".format(bias.shape, weight.shape[0]),
            axes=["bias axis 0 = {}".format(bias.shape[0] if bias.ndim else 0)],
        )
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def pixel_shuffle(x, factor):
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r).

    ``out[n, c, h*r + i, w*r + j] = x[n, c*r*r + i*r + j, h, w]``.
    """
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if c % (factor * factor):
        raise ShapeMismatchError(
            "pixel_shuffle needs channels divisible by {}, got {}".format(factor * factor, c),
            axes=["input axis 1 = {}".format(c)],
        )
    out_c = c // (factor * factor)
    x = x.reshape(n, out_c, factor, factor, h, w)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return x.reshape(n, out_c, h * factor, w * factor)


def upsample_block(x, weight, bias=None, factor=2):
    """Sub-pixel upsampling: a same-padded convolution to C*r*r channels followed by a pixel shuffle.

    Args:
        x (Tensor): Input of shape (N, C, H, W).
        weight (Tensor): Kernel of shape (O*r*r, C, K, K).
        bias (Tensor): Optional bias of shape (O*r*r,).
        factor (int): 1 or 2.

    Returns:
        Tensor: Output of shape (N, O, H*r, W*r).
    """
    if factor not in (1, 2):
        raise ValueError("Unsupported upsampling factor {}, expected 1 or 2".format(factor))
    kernel = weight.shape[-1]
    return pixel_shuffle(conv2d(x, weight, bias, stride=1, padding=kernel // 2), factor)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for x of shape (N, in) and weight of shape (out, in)."""
    out = x @ weight.transpose(1, 0)
    if bias is not None:
        out = out + bias
    return out


def global_avg_pool(x):
    """Mean over the spatial axes of an NCHW tensor."""
    return x.mean(axis=(2, 3))


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        axes = [
            "axis {}: {} vs {}".format(i, sa, sb) for i, (sa, sb) in enumerate(zip(a.shape, b.shape)) if sa != sb
        ]
        if len(a.shape) != len(b.shape):
            axes.append("rank {} vs {}".format(len(a.shape), len(b.shape)))
        raise ShapeMismatchError("{} shape mismatch: {} vs {}".format(op, a.shape, b.shape), axes=axes)


def mse(a, b):
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mse", a, b)
    diff = a - b
    return (diff * diff).mean()


def weighted_mse(a, b, weights):
    """Mean over all elements of ``weights * (a - b)**2``; weights broadcast (e.g. (N, 1, H, W) over channels)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("weighted_mse", a, b)
    diff = a - b
    return (diff * diff * as_tensor(weights)).mean()


class LogSoftmax(Function):
    """Numerically stable log-softmax along the last axis."""

    def forward(self, x):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return grad - self.softmax * np.sum(grad, axis=-1, keepdims=True)


def log_softmax(logits):
    return LogSoftmax.apply(logits)


def softmax(logits):
    """Softmax of a numpy array or tensor along the last axis, as numpy."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    shifted = data - np.max(data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def one_hot(labels, num_classes, dtype=None):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype or np.float32)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels under softmax(logits).

    Args:
        logits (Tensor): Shape (N, C).
        labels (array-like): N integers in [0, C).

    Raises:
        ValueError: If a label is out of range.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    num_classes = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            "{} labels for {} rows of logits".format(labels.shape[0], logits.shape[0]),
            axes=["logits axis 0 = {}".format(logits.shape[0]), "labels axis 0 = {}".format(labels.shape[0])],
        )
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = sorted(set(int(v) for v in labels if v < 0 or v >= num_classes))
        raise ValueError("Labels {} out of range [0, {})".format(bad, num_classes))
    targets = one_hot(labels, num_classes, dtype=logits.dtype)
    return -(log_softmax(logits) * targets).sum(axis=-1).mean()


def kd_divergence(student_logits, teacher_logits, temperature=1.0):
    """``T**2 * KL(softmax(teacher / T) || softmax(student / T))`` averaged over the batch.

    The teacher logits are treated as constants.

    Raises:
        ValueError: If ``temperature`` is not positive.
    """
    if temperature <= 0:
        raise ValueError("Temperature must be positive, got {}".format(temperature))
    student_logits = as_tensor(student_logits)
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    _check_same_shape("kd_divergence", student_logits, Tensor(teacher))
    scale = 1.0 / temperature
    teacher_log_probs = log_softmax(Tensor(teacher) * scale).data
    student_log_probs = log_softmax(student_logits * scale)
    kl = (Tensor(np.exp(teacher_log_probs)) * (Tensor(teacher_log_probs) - student_log_probs)).sum(axis=-1)
    return kl.mean() * (temperature * temperature)

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
"""Dense tensors with define-by-run reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` with a numpy ``forward`` and a ``backward``
returning the gradient of each input. :meth:`Function.apply` records the function on the output
tensor so :meth:`Tensor.backward` can walk the tape in reverse topological order.
"""
import contextlib
import logging
import threading

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()


def get_default_dtype():
    """The float dtype new tensors are stored in (float32 unless overridden)."""
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Run the engine in ``dtype`` (e.g. ``numpy.float64`` for finite-difference checks)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible.

    Attributes:
        axes (list[str]): Human readable description of the offending axes.
    """

    def __init__(self, message, axes=None):
        super().__init__(message)
        self.axes = axes or []


class NonScalarLossError(ValueError):
    """Raised when backward is called on a non-scalar tensor without an explicit gradient."""


class Function(object):
    """Base class for differentiable operations."""

    def __init__(self, *tensors):
        self.tensors = tensors

    def forward(self, *args, **kwargs):
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad):
        """Return the gradient of the loss with respect to each input, given ``grad`` w.r.t. the output."""
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors, **kwargs):
        """Run ``forward`` on the tensors' data and record the function on the result."""
        tensors = tuple(as_tensor(t) for t in tensors)
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad, to_shape):
        """Sum out broadcast dimensions so ``grad`` matches ``to_shape``."""
        if grad.shape == tuple(to_shape):
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor(object):
    """A dense float array that may participate in the gradient tape.

    Args:
        data (array-like): Values, stored in the default dtype.
        requires_grad (bool): Whether gradients flow to this tensor.
        creator (Function): The function that produced this tensor, if any.
        name (str): Optional label used in diagnostics.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, creator=None, name=None):
        dtype = get_default_dtype()
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.creator = creator
        self.name = name
        self.grad = None
        self._retains_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        """A tensor sharing this tensor's values with no tape history."""
        return Tensor(self.data)

    def retain_grad(self):
        """Keep the gradient of this intermediate tensor after backward."""
        self._retains_grad = True
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every reachable leaf that requires them.

        Args:
            grad (array-like): Gradient w.r.t. this tensor. Defaults to 1 for a scalar.

        Raises:
            NonScalarLossError: If this tensor is not a scalar and ``grad`` is omitted.
        """
        if grad is None:
            if self.data.size != 1:
                raise NonScalarLossError("backward requires a scalar loss, got shape {}".format(self.shape))
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.creator is None or node._retains_grad:
                node._accumulate_grad(node_grad)
            if node.creator is None:
                continue
            input_grads = node.creator.backward(node_grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, parent_grad in zip(node.creator.tensors, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = Function.unbroadcast(np.asarray(parent_grad), parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad

    def _accumulate_grad(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # arithmetic

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return Matmul.apply(self, other)

    # reductions and shape

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # elementwise

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def abs(self):
        return Abs.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def softplus(self):
        return Softplus.apply(self)

    def maximum(self, floor):
        """Elementwise ``max(self, floor)`` for a constant floor; gradient flows where ``self > floor``."""
        return LowerBound.apply(self, bound=float(floor))

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={}{})".format(
            self.shape, self.requires_grad, ", name={!r}".format(self.name) if self.name else ""
        )


def as_tensor(value):
    """Wrap constants as non-differentiable tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, x, y):
        return x - y

    def backward(self, grad):
        return grad, -grad


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return -grad


class Mul(Function):
    def forward(self, x, y):
        return x * y

    def backward(self, grad):
        x, y = self.tensors
        return grad * y.data, grad * x.data


class Div(Function):
    def forward(self, x, y):
        return x / y

    def backward(self, grad):
        x, y = self.tensors
        return grad / y.data, -grad * x.data / (y.data * y.data)


class Pow(Function):
    def forward(self, x, exponent):
        self.exponent = exponent
        return np.power(x, exponent)

    def backward(self, grad):
        (x,) = self.tensors
        return grad * self.exponent * np.power(x.data, self.exponent - 1)


class Matmul(Function):
    """Matrix product with numpy batching over leading axes."""

    def forward(self, x, y):
        if x.shape[-1] != y.shape[-2]:
            raise ShapeMismatchError(
                "matmul inner dimensions differ: {} vs {}".format(x.shape, y.shape),
                axes=["lhs axis -1 = {}".format(x.shape[-1]), "rhs axis -2 = {}".format(y.shape[-2])],
            )
        return np.matmul(x, y)

    def backward(self, grad):
        x, y = self.tensors
        return np.matmul(grad, np.swapaxes(y.data, -1, -2)), np.matmul(np.swapaxes(x.data, -1, -2), grad)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (x,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, x.shape)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.mean(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        (x,) = self.tensors
        if self.axis is None:
            count = x.size
        else:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            count = int(np.prod([x.shape[a] for a in axes]))
            if not self.keepdims:
                grad = np.expand_dims(grad, axes)
        return np.broadcast_to(grad / count, x.shape)


class Reshape(Function):
    def forward(self, x, shape):
        return np.reshape(x, shape)

    def backward(self, grad):
        (x,) = self.tensors
        return np.reshape(grad, x.shape)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return np.transpose(grad)
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, x, index):
        self.index = index
        return x[index]

    def backward(self, grad):
        (x,) = self.tensors
        out = np.zeros_like(x.data)
        np.add.at(out, self.index, grad)
        return out


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, grad):
        (x,) = self.tensors
        return grad / x.data


class Abs(Function):
    def forward(self, x):
        return np.abs(x)

    def backward(self, grad):
        (x,) = self.tensors
        return grad * np.sign(x.data)


class ReLU(Function):
    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, grad):
        (x,) = self.tensors
        return grad * (x.data > 0)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return grad * (1 - self.out * self.out)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 0.5 * (1 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return grad * self.out * (1 - self.out)


class Softplus(Function):
    def forward(self, x):
        return np.logaddexp(0, x)

    def backward(self, grad):
        (x,) = self.tensors
        return grad * 0.5 * (1 + np.tanh(0.5 * x.data))


class LowerBound(Function):
    def forward(self, x, bound):
        self.bound = bound
        return np.maximum(x, bound)

    def backward(self, grad):
        (x,) = self.tensors
        # pass gradients that push values up from the floor
        return grad * ((x.data >= self.bound) | (grad < 0))

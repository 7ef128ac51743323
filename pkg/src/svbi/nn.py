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
"""Parameter containers and the layers shared by the teacher and the codec."""
import collections
import logging

import numpy as np

from svbi import functional as F
from svbi.tensor import Tensor

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A trainable tensor. Its dotted name is assigned by the owning :class:`Module`."""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.frozen = False


class StateDictError(KeyError):
    """Raised when a state dict does not match a module's parameters."""

    def __init__(self, message, missing=None, unexpected=None, mismatched=None):
        super().__init__(message)
        self.missing = missing or []
        self.unexpected = unexpected or []
        self.mismatched = mismatched or []


class Module(object):
    """Base class for anything holding parameters.

    Parameters and sub-modules assigned as attributes are registered in assignment order, which
    fixes the parameter order of checkpoints.
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", collections.OrderedDict())
        object.__setattr__(self, "_modules", collections.OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        """Yield ``(dotted_name, Parameter)`` pairs in registration order."""
        for key, param in self._parameters.items():
            yield prefix + key, param
        for key, module in self._modules.items():
            for item in module.named_parameters(prefix + key + "."):
                yield item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for key, module in self._modules.items():
            for item in module.named_modules(prefix + key + "."):
                yield item

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        """Stop gradient flow into this module's parameters and mark them immutable."""
        for p in self.parameters():
            p.requires_grad = False
            p.frozen = True
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
            p.frozen = False
        return self

    def state_dict(self):
        """Copies of the parameter values keyed by dotted name."""
        return collections.OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        """Copy values from ``state`` into the parameters.

        Raises:
            StateDictError: On missing, unexpected or mis-shaped entries (missing/unexpected only if strict).
        """
        params = collections.OrderedDict(self.named_parameters())
        missing = [k for k in params if k not in state]
        unexpected = [k for k in state if k not in params]
        mismatched = [
            "{}: {} vs {}".format(k, tuple(np.shape(state[k])), params[k].shape)
            for k in params
            if k in state and tuple(np.shape(state[k])) != params[k].shape
        ]
        if mismatched or (strict and (missing or unexpected)):
            raise StateDictError(
                "State dict does not match module: missing={}, unexpected={}, mismatched={}".format(
                    missing, unexpected, mismatched
                ),
                missing,
                unexpected,
                mismatched,
            )
        for key, param in params.items():
            if key in state:
                param.data = np.ascontiguousarray(np.asarray(state[key], dtype=param.data.dtype))
        return self


class ModuleList(Module):
    """Registers modules under their list index."""

    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for module in modules:
            self.append(module)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Sequential(ModuleList):
    def forward(self, x):
        for module in self:
            x = module(x)
        return x


def kaiming_uniform(rng, shape, fan_in):
    """Kaiming-uniform draw for ReLU networks: U(-sqrt(6 / fan_in), sqrt(6 / fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution layer with Kaiming-uniform weights and zero biases."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        if bias:
            self.bias = Parameter(np.zeros(out_channels))
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class UpsampleBlock(Module):
    """Sub-pixel convolution upsampling by ``factor`` (1 or 2)."""

    def __init__(self, in_channels, out_channels, rng, factor=2, kernel_size=3):
        super().__init__()
        if factor not in (1, 2):
            raise ValueError("Unsupported upsampling factor {}, expected 1 or 2".format(factor))
        self.factor = factor
        out = out_channels * factor * factor
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (out, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out))

    def forward(self, x):
        return F.upsample_block(x, self.weight, self.bias, factor=self.factor)


class ResidualBlock(Module):
    """Two stacked 3x3 convolutions with an identity or 1x1 projection shortcut.

    ``out = act(conv1(relu(conv0(x))) + shortcut(x))``; the output activation can be disabled for
    blocks producing signed values such as the latent.
    """

    def __init__(self, in_channels, out_channels, rng, stride=1, activate_output=True):
        super().__init__()
        self.activate_output = activate_output
        self.conv0 = Conv2d(in_channels, out_channels, 3, rng, stride=stride)
        self.conv1 = Conv2d(out_channels, out_channels, 3, rng)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, rng, stride=stride, padding=0)
        else:
            self.shortcut = None

    def forward(self, x):
        out = self.conv1(self.conv0(x).relu())
        out = out + (self.shortcut(x) if self.shortcut is not None else x)
        return out.relu() if self.activate_output else out


def residual_block_parameter_count(in_channels, out_channels, stride=1):
    """Closed-form parameter count of :class:`ResidualBlock`."""
    count = in_channels * out_channels * 9 + out_channels + out_channels * out_channels * 9 + out_channels
    if stride != 1 or in_channels != out_channels:
        count += in_channels * out_channels + out_channels
    return count

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
"""Adam with bias correction, exponential learning-rate decay and gradient clipping."""
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)


class MissingGradientError(ValueError):
    """Raised when an optimizer step finds parameters without gradients."""

    def __init__(self, message, names=None):
        super().__init__(message)
        self.names = names or []


class FrozenParameterError(RuntimeError):
    """Raised on any attempt to update a frozen parameter."""

    def __init__(self, message, names=None):
        super().__init__(message)
        self.names = names or []


class AdamState(object):
    """Moments and hyper-parameters of an Adam optimizer.

    Attributes:
        m (dict[str, numpy.ndarray]): First moments keyed by parameter name.
        v (dict[str, numpy.ndarray]): Second moments keyed by parameter name.
        step (int): Number of completed updates.
        lr (float): Learning rate of the next update.
        beta1 (float): First moment decay.
        beta2 (float): Second moment decay.
        eps (float): Denominator offset.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {}
        self.v = {}
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(state, named_params):
    """Apply one Adam update in place.

    Args:
        state (AdamState): Optimizer state, updated in place.
        named_params (list[(str, Parameter)]): The parameters to update.

    Raises:
        FrozenParameterError: If any parameter is frozen.
        MissingGradientError: If any parameter has no gradient, listing their names.
    """
    named_params = list(named_params)
    frozen = [name for name, p in named_params if getattr(p, "frozen", False)]
    if frozen:
        raise FrozenParameterError("Refusing to update frozen parameters: {}".format(frozen), frozen)
    missing = [name for name, p in named_params if p.grad is None]
    if missing:
        raise MissingGradientError("Parameters without gradients: {}".format(missing), missing)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in named_params:
        grad = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


class Adam(object):
    """Adam over a fixed list of named parameters.

    Examples:
        .. code-block:: python

            optimizer = Adam(model.named_parameters(), lr=1e-3)
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
    """

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        frozen = [name for name, p in self.named_params if getattr(p, "frozen", False)]
        if frozen:
            raise FrozenParameterError("Cannot optimize frozen parameters: {}".format(frozen), frozen)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def step(self):
        adam_step(self.state, self.named_params)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def exp_lr_schedule(step, total_steps, lr_start=1e-3, lr_end=1e-6):
    """Geometric interpolation from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``.

    Raises:
        ValueError: If ``total_steps`` is 0 or ``step`` is outside [0, total_steps].
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive, got {}".format(total_steps))
    if not 0 <= step <= total_steps:
        raise ValueError("step {} outside [0, {}]".format(step, total_steps))
    return lr_start * math.exp(math.log(lr_end / lr_start) * step / total_steps)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        float: The norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm is not None and total > max_norm > 0:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype, copy=False)
    return total

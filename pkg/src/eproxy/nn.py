"""Stateful layer wrappers: each forward caches what its backward needs.

A module is used once per forward/backward pair. ``backward`` returns the
gradient w.r.t. the module input and stores parameter gradients on the
:class:`~eproxy.tensor.Parameter` objects.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConvLayer, Parameter


def _accumulate(p: Parameter, g: np.ndarray) -> None:
    p.grad = g if p.grad is None else p.grad + g


class Module:
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return []

    def __call__(self, x):
        return self.forward(x)


class Conv(Module):
    def __init__(self, layer: ConvLayer, need_input_grad: bool = True):
        self.layer = layer
        self.need_input_grad = need_input_grad
        self._cache = None

    def forward(self, x):
        out, cols = T.conv_forward_cols(x, self.layer)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad):
        x_shape, cols = self._cache
        self._cache = None
        gx, gk = T.conv_backward_cols(x_shape, cols, self.layer, grad, self.need_input_grad)
        _accumulate(self.layer.param, gk)
        return gx

    def parameters(self):
        return [self.layer.param]


class ReLU(Module):
    def forward(self, x):
        self._x = x
        return T.relu_forward(x)

    def backward(self, grad):
        x, self._x = self._x, None
        return T.relu_backward(x, grad)


class AvgPool3x3(Module):
    def forward(self, x):
        self._x = x
        return T.avgpool3x3_forward(x)

    def backward(self, grad):
        x, self._x = self._x, None
        return T.avgpool3x3_backward(x, grad)


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


class Zero(Module):
    def forward(self, x):
        return np.zeros_like(x)

    def backward(self, grad):
        return np.zeros_like(grad)


class Sequential(Module):
    def __init__(self, *modules: Module):
        self.modules = list(modules)

    def forward(self, x):
        for m in self.modules:
            x = m.forward(x)
        return x

    def backward(self, grad):
        for m in reversed(self.modules):
            grad = m.backward(grad)
        return grad

    def parameters(self):
        return [p for m in self.modules for p in m.parameters()]


class BatchNorm(Module):
    """Affine batch norm. Training mode normalises with batch statistics and
    updates running averages; eval mode uses the running averages."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=T.DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=T.DTYPE))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def forward(self, x):
        if not self.training:
            return T.batchnorm_eval(x, self.gamma.value, self.beta.value,
                                    self.running_mean, self.running_var, self.eps)
        out, self._cache, mean, var = T.batchnorm_forward(x, self.gamma.value, self.beta.value, self.eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * var * n / max(n - 1, 1)
        return out

    def backward(self, grad):
        gx, gg, gb = T.batchnorm_backward(self._cache, self.gamma.value, grad)
        self._cache = None
        _accumulate(self.gamma, gg)
        _accumulate(self.beta, gb)
        return gx

    def parameters(self):
        return [self.gamma, self.beta]


def set_training(module, flag: bool) -> None:
    """Recursively toggle batch-norm mode on anything reachable from ``module``."""
    seen = set()

    def visit(obj):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        if isinstance(obj, BatchNorm):
            obj.training = flag
        elif isinstance(obj, Module):
            for v in vars(obj).values():
                visit(v)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                visit(v)

    visit(module)


class GlobalAvgPool(Module):
    """(b, c, h, w) -> (b, c)."""

    def forward(self, x):
        self._shape = x.shape
        return T.global_avg_pool_forward(x)

    def backward(self, grad):
        return T.global_avg_pool_backward(self._shape, grad)


class Linear(Module):
    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, n_in: int, n_out: int, rng, scheme: str = "kaiming_uniform") -> "Linear":
        w = T.init_kernel((n_out, n_in), scheme, rng)
        return cls(Parameter(w), Parameter(np.zeros(n_out, dtype=T.DTYPE)))

    def forward(self, x):
        self._x = x
        return T.linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = T.linear_backward(self._x, self.weight.value, grad)
        self._x = None
        _accumulate(self.weight, gw)
        _accumulate(self.bias, gb)
        return gx

    def parameters(self):
        return [self.weight, self.bias]

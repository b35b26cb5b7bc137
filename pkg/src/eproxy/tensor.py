"""Rank-4 float32 tensor ops with hand-written backward passes.

A "Tensor4" is a C-contiguous float32 ``numpy`` array of shape
``(batch, channel, height, width)``; gradients live in separate arrays of the
same shape. Every op here is a pure function of its inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

DTYPE = np.float32



@contextlib.contextmanager
def precision(dtype):
    """Temporarily run every op (and newly created parameters) in ``dtype``.

    Only meant for numerical checks; not thread-safe.
    """
    global DTYPE
    old, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = old


INIT_SCHEMES = ("kaiming_gauss", "kaiming_uniform", "xavier_gauss", "xavier_uniform")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (b, c, h, w), got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values entering {where}")


@dataclass(eq=False)
class Parameter:
    """A trainable (or frozen) array with its gradient and momentum buffer."""

    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray | None = None
    momentum_buf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.momentum_buf = np.zeros_like(self.value)
        if not self.trainable:
            self.value.flags.writeable = False

    def zero_grad(self) -> None:
        self.grad = None


@dataclass(eq=False)
class ConvLayer:
    """2-D convolution without bias; square odd kernel, zero padding."""

    param: Parameter
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kernel = self.param.value
        if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
            raise ShapeError(f"kernel must be (c_out, c_in, k, k), got {kernel.shape}")
        if kernel.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel.shape[2]}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding {self.stride}/{self.padding}")

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int, rng: Rng, scheme: str = "kaiming_gauss",
               stride: int = 1, padding: int | None = None, trainable: bool = True) -> "ConvLayer":
        kernel = init_kernel((c_out, c_in, k, k), scheme, rng)
        pad = (k - 1) // 2 if padding is None else padding
        return cls(Parameter(kernel, trainable=trainable), stride=stride, padding=pad)

    @property
    def kernel(self) -> np.ndarray:
        return self.param.value

    @property
    def trainable(self) -> bool:
        return self.param.trainable

    @property
    def momentum_buf(self) -> np.ndarray:
        return self.param.momentum_buf

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo


# --------------------------------------------------------------------------- init


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    raise ShapeError(f"cannot compute fans for shape {shape}")


def init_kernel(shape, scheme: str, rng: Rng) -> np.ndarray:
    """Kaiming / Xavier initialisation, Gaussian or uniform flavour."""
    fan_in, fan_out = _fans(tuple(shape))
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"zero fan for shape {tuple(shape)}")
    family, _, dist = scheme.partition("_")
    if family == "kaiming":
        denom = fan_in
    elif family == "xavier":
        denom = fan_in + fan_out
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    if dist == "gauss":
        values = rng.normal(0.0, np.sqrt(2.0 / denom), size=tuple(shape))
    elif dist == "uniform":
        bound = np.sqrt(6.0 / denom)
        values = rng.uniform(-bound, bound, size=tuple(shape))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return values.astype(DTYPE)


# --------------------------------------------------------------------------- conv


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold ``x`` into a ``(c*k*k, b*ho*wo)`` column matrix."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo)
    return cols, ho, wo


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    d = dcols.reshape(c, k, k, b, ho, wo)
    dxp = np.zeros((c, b, hp, wp), dtype=DTYPE)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += d[:, di, dj]
    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> tuple[int, int]:
    if x.shape[1] != layer.c_in:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels but kernel {layer.kernel.shape} expects c_in={layer.c_in}"
        )
    ho, wo = layer.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv output would be {ho}x{wo} for input {x.shape[2]}x{x.shape[3]}, "
            f"k={layer.k}, stride={layer.stride}, padding={layer.padding}"
        )
    return ho, wo


def conv_forward_cols(x: np.ndarray, layer: ConvLayer):
    """Forward pass that also returns the unfolded input for reuse in backward."""
    _check_conv_input(x, layer)
    b = x.shape[0]
    if layer.k == 1 and layer.stride == 1 and layer.padding == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(layer.c_in, -1)
        ho, wo = x.shape[2], x.shape[3]
    else:
        cols, ho, wo = im2col(x, layer.k, layer.stride, layer.padding)
    out = layer.kernel.reshape(layer.c_out, -1) @ cols
    out = np.ascontiguousarray(out.reshape(layer.c_out, b, ho, wo).transpose(1, 0, 2, 3))
    return out, cols


def conv2d_forward(x, layer: ConvLayer) -> np.ndarray:
    """Cross-correlation of ``x`` with ``layer.kernel`` (zero padding, no bias)."""
    x = as_tensor4(x, "conv input")
    check_finite(x, "conv2d")
    return conv_forward_cols(x, layer)[0]


def conv_backward_cols(x_shape, cols: np.ndarray, layer: ConvLayer, grad_out: np.ndarray,
                       need_input_grad: bool = True):
    b, _, h, w = x_shape
    ho, wo = layer.output_hw(h, w)
    if grad_out.shape != (b, layer.c_out, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {(b, layer.c_out, ho, wo)}")
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(layer.c_out, -1)
    grad_kernel = (g2 @ cols.T).reshape(layer.kernel.shape)
    if not need_input_grad:
        return None, grad_kernel
    dcols = layer.kernel.reshape(layer.c_out, -1).T @ g2
    if layer.k == 1 and layer.stride == 1 and layer.padding == 0:
        grad_input = np.ascontiguousarray(dcols.reshape(layer.c_in, b, h, w).transpose(1, 0, 2, 3))
    else:
        grad_input = col2im(dcols, x_shape, layer.k, layer.stride, layer.padding, ho, wo)
    return grad_input, grad_kernel


def conv2d_backward(x, layer: ConvLayer, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. input and kernel. The kernel gradient is produced for frozen layers too."""
    x = as_tensor4(x, "conv input")
    grad_out = as_tensor4(grad_out, "conv grad_out")
    _check_conv_input(x, layer)
    if layer.k == 1 and layer.stride == 1 and layer.padding == 0:
        cols = x.transpose(1, 0, 2, 3).reshape(layer.c_in, -1)
    else:
        cols = im2col(x, layer.k, layer.stride, layer.padding)[0]
    return conv_backward_cols(x.shape, cols, layer, grad_out)


# --------------------------------------------------------------------------- pointwise / pooling


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=DTYPE)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, DTYPE(0)).astype(DTYPE, copy=False)


def _box3(x: np.ndarray) -> np.ndarray:
    """3x3 box sum with zero padding, stride 1."""
    h, w = x.shape[-2:]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += xp[:, :, di:di + h, dj:dj + w]
    return out


def _pool_counts(h: int, w: int) -> np.ndarray:
    ones = np.ones((1, 1, h, w), dtype=DTYPE)
    return _box3(ones)


def avgpool3x3_forward(x: np.ndarray) -> np.ndarray:
    """3x3 average pool, stride 1, padding 1; padded cells are excluded from the mean."""
    return _box3(x) / _pool_counts(*x.shape[-2:])


def avgpool3x3_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return _box3(grad_out / _pool_counts(*x.shape[-2:]))


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=DTYPE)


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    g = grad_out[:, :, None, None] / DTYPE(h * w)
    return np.ascontiguousarray(np.broadcast_to(g, x_shape), dtype=DTYPE)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input width {x.shape[1]} != weight in-features {weight.shape[1]}")
    return x @ weight.T + bias


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_weight, grad_bias)``."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Per-channel normalisation with batch statistics.

    Returns ``(out, cache, mean, var)``; ``var`` is the biased batch variance.
    """
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = (x - mean.astype(DTYPE)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(DTYPE, copy=False), (xhat, inv_std), mean, var


def batchnorm_backward(cache, gamma: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)`` for :func:`batchnorm_forward`."""
    xhat, inv_std = cache
    n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    dxhat = grad_out * gamma[None, :, None, None]
    sum_d = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    gx = (inv_std / DTYPE(n))[None, :, None, None] * (
        DTYPE(n) * dxhat - sum_d[None, :, None, None] - xhat * sum_dx[None, :, None, None])
    return gx.astype(DTYPE, copy=False), grad_gamma.astype(DTYPE), grad_beta.astype(DTYPE)


def batchnorm_eval(x: np.ndarray, gamma, beta, running_mean, running_var, eps: float = 1e-5) -> np.ndarray:
    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(DTYPE)
    scale = (gamma * inv_std)[None, :, None, None]
    shift = (beta - running_mean.astype(DTYPE) * gamma * inv_std)[None, :, None, None]
    return (x * scale + shift).astype(DTYPE, copy=False)


# --------------------------------------------------------------------------- losses


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over every element and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    check_finite(pred, "mse_loss")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (DTYPE(2.0 / diff.size) * diff).astype(DTYPE, copy=False)
    return loss, grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch; labels are integer class ids."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    check_finite(logits, "softmax_cross_entropy")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, (grad / b).astype(DTYPE)

"""Central finite-difference checks for every differentiable layer.

Each case contracts the layer output with a fixed random tensor ``R`` so the
scalar ``L = sum(f(x) * R)`` has analytic gradient ``backward(R)``. Errors are
norm-wise: ``|g_num - g_an| / max(|g_num| + |g_an|, tiny)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .arch import MINI_SPACE, materialize
from .rng import Rng

EPS = 1e-3
TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS, coords=None) -> np.ndarray:
    """Perturb ``x`` in place, one coordinate at a time (all of them, or only
    ``coords`` of the flattened array; the rest stay zero)."""
    g = np.zeros(x.shape)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _contract(out, r) -> float:
    return float(np.sum(np.asarray(out, np.float64) * r))


def _module_check(module: nn.Module, x: np.ndarray, rng: Rng, params=()) -> float:
    """Worst error over the input gradient and each listed parameter."""
    r = rng.normal(size=module.forward(x).shape)

    def loss():
        return _contract(module.forward(x), r)

    for p in module.parameters():
        p.zero_grad()
    module.forward(x)
    gx = module.backward(r.astype(T.DTYPE))
    errs = [rel_error(numeric_grad(loss, x), gx)] if gx is not None else []
    for p in params:
        analytic = p.grad.copy()
        errs.append(rel_error(numeric_grad(loss, p.value), analytic))
    return max(errs)


def _input(rng: Rng, shape, margin: float = 0.0) -> np.ndarray:
    x = rng.normal(size=shape)
    if margin:
        # keep away from the ReLU kink so differences do not straddle it
        x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)
    return x.astype(T.DTYPE)


def _conv_case(k: int, stride: int):
    def case(rng: Rng) -> float:
        layer = T.ConvLayer.create(3, 4, k, rng, "kaiming_gauss", stride=stride)
        return _module_check(nn.Conv(layer), _input(rng, (2, 3, 7, 7)), rng, [layer.param])
    return case


def _relu(rng):
    return _module_check(nn.ReLU(), _input(rng, (2, 3, 5, 5), margin=0.05), rng)


def _avgpool(rng):
    return _module_check(nn.AvgPool3x3(), _input(rng, (2, 3, 5, 6)), rng)


def _gap(rng):
    return _module_check(nn.GlobalAvgPool(), _input(rng, (2, 3, 4, 4)), rng)


def _linear(rng):
    lin = nn.Linear.create(6, 4, rng)
    lin.bias.value[:] = rng.normal(size=4)
    return _module_check(lin, _input(rng, (5, 6)), rng, [lin.weight, lin.bias])


def _batchnorm(rng):
    bn = nn.BatchNorm(3)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, size=3)
    bn.beta.value[:] = rng.normal(size=3)
    return _module_check(bn, _input(rng, (4, 3, 3, 3)), rng, [bn.gamma, bn.beta])


def _mse(rng):
    pred = _input(rng, (2, 3, 4, 4))
    target = _input(rng, (2, 3, 4, 4))
    _, g = T.mse_loss(pred, target)
    return rel_error(numeric_grad(lambda: T.mse_loss(pred, target)[0], pred), g)


def _cross_entropy(rng):
    logits = _input(rng, (6, 4))
    labels = rng.integers(4, size=6)
    _, g = T.softmax_cross_entropy(logits, labels)
    return rel_error(numeric_grad(lambda: T.softmax_cross_entropy(logits, labels)[0], logits), g)


def _backbone(rng):
    """Whole mini-space backbone, checked on 24 coordinates of a few parameter
    tensors. Runs in float64: a dozen float32 layers with batch norm amplify
    rounding past the tolerance even though every layer passes on its own."""
    with T.precision(np.float64):
        return _backbone_f64(rng)


def _backbone_f64(rng):
    spec = MINI_SPACE.random(rng)
    net = materialize(spec, rng, "kaiming_gauss")
    x = _input(rng, (2, 3, 8, 8))
    r = rng.normal(size=net.forward(x).shape)
    params = net.parameters()
    for p in params:
        p.zero_grad()
    net.forward(x)
    net.backward(r)
    live = [p for p in params if p.grad is not None]
    picks = [live[i] for i in sorted(rng.sample_indices(len(live), min(3, len(live))))]
    errs = []
    for p in picks:
        coords = rng.sample_indices(p.value.size, min(24, p.value.size))
        num = numeric_grad(lambda: _contract(net.forward(x), r), p.value, 1e-6, coords=coords)
        errs.append(rel_error(num.reshape(-1)[coords], p.grad.reshape(-1)[coords]))
    return max(errs)


CASES: dict[str, Callable[[Rng], float]] = {
    "conv1x1": _conv_case(1, 1),
    "conv3x3": _conv_case(3, 1),
    "conv3x3_s2": _conv_case(3, 2),
    "conv7x7": _conv_case(7, 1),
    "relu": _relu,
    "avgpool3x3": _avgpool,
    "global_avg_pool": _gap,
    "linear": _linear,
    "batchnorm": _batchnorm,
    "mse": _mse,
    "cross_entropy": _cross_entropy,
    "backbone": _backbone,
}


def run_gradchecks(seed: int, per_case: int = 9) -> list[CheckResult]:
    """``per_case`` seeded repetitions of every case (108 checks by default)."""
    out = []
    for name, case in CASES.items():
        for i in range(per_case):
            out.append(CheckResult(name, i, case(Rng.from_key(seed, "gradcheck", name, i))))
    return out

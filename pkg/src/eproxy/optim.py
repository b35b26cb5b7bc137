"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .tensor import DTYPE, Parameter


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-5
    iterations: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def sgd_step(params: Iterable[Parameter], cfg: SgdConfig, lr: float | None = None) -> None:
    """In-place update ``v = m*v + (g + wd*w); w -= lr*v``.

    Frozen parameters and parameters without a gradient are skipped. ``lr``
    overrides ``cfg.lr`` (used by schedules).
    """
    step = DTYPE(cfg.lr if lr is None else lr)
    mom = DTYPE(cfg.momentum)
    wd = DTYPE(cfg.weight_decay)
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        g = p.grad.astype(DTYPE, copy=False)
        if wd:
            g = g + wd * p.value
        buf = p.momentum_buf
        buf *= mom
        buf += g
        p.value -= step * buf

"""Few-shot regression proxy with a frozen barrier layer.

A candidate backbone is extended with a trainable transform conv and a frozen,
randomly initialised barrier conv; backbone and transform are trained for a
handful of SGD steps to regress a synthetic target, and the last loss (scaled
by a FLOPS term) is the architecture's score. Lower is better.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .arch import TAPS, ArchSpec, SearchSpace, get_space, materialize, normalized_flops, tap_hw
from .optim import SgdConfig, sgd_step
from .rng import Rng
from .tensor import INIT_SCHEMES, ConvLayer, NonFiniteError, mse_loss
from .targets import COEFF_GRID, FeatureCombo, TargetSpec, gen_input_batch, make_targets

KERNEL_GRID = (1, 3, 7)
CMID_GRID = (16, 32, 64, 128, 256, 512)
LR_GRID = tuple(round(0.5 + 0.1 * i, 1) for i in range(11))
ALPHA_GRID = tuple(round(-0.5 + 0.1 * i, 1) + 0.0 for i in range(11))
DEFAULT_C_OUT = 16


@dataclass(frozen=True)
class ProxyConfig:
    transform_kernel: int = 1
    barrier_kernel: int = 3
    c_mid: int = 64
    combo: FeatureCombo = FeatureCombo()
    lr: float = 1.0
    init: str = "kaiming_gauss"
    tap: str = "final"
    alpha: float = 0.0
    barrier_enabled: bool = True
    sgd: SgdConfig = SgdConfig()
    seed: int = 0

    def __post_init__(self):
        if self.transform_kernel not in KERNEL_GRID or self.barrier_kernel not in KERNEL_GRID:
            raise ValueError(f"kernel sizes must be in {KERNEL_GRID}")
        if self.c_mid not in CMID_GRID:
            raise ValueError(f"c_mid={self.c_mid} not in {CMID_GRID}")
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init={self.init!r} not in {INIT_SCHEMES}")
        if self.tap not in TAPS:
            raise ValueError(f"tap={self.tap!r} not in {TAPS}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be a positive finite number, got {self.lr}")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def grid_errors(self) -> list[str]:
        """Numeric fields that lie off the searchable grid (allowed for ablations)."""
        errs = []
        if self.lr not in LR_GRID:
            errs.append(f"lr={self.lr} not in {LR_GRID}")
        if self.alpha not in ALPHA_GRID:
            errs.append(f"alpha={self.alpha} not in {ALPHA_GRID}")
        return errs

    @property
    def c_out(self) -> int:
        return DEFAULT_C_OUT if self.barrier_enabled else self.c_mid

    @property
    def effective_sgd(self) -> SgdConfig:
        return dataclasses.replace(self.sgd, lr=self.lr)

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["combo"] = dataclasses.asdict(self.combo)
        d["sgd"] = {k: v for k, v in dataclasses.asdict(self.sgd).items() if k != "lr"}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, strict: bool = True) -> "ProxyConfig":
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}; allowed: {sorted(names)}")
        kw = dict(d)
        if "combo" in kw:
            combo_keys = {f.name for f in dataclasses.fields(FeatureCombo)}
            bad = sorted(set(kw["combo"]) - combo_keys)
            if bad:
                raise ValueError(f"unknown combo keys {bad}; allowed: {sorted(combo_keys)}")
            kw["combo"] = FeatureCombo(**kw["combo"])
        if "sgd" in kw:
            sgd_keys = {"momentum", "weight_decay", "iterations"}
            bad = sorted(set(kw["sgd"]) - sgd_keys)
            if bad:
                raise ValueError(f"unknown sgd keys {bad}; allowed: {sorted(sgd_keys)} (lr is top-level)")
            kw["sgd"] = SgdConfig(**kw["sgd"])
        cfg = cls(**kw)
        if strict and cfg.grid_errors():
            raise ValueError("; ".join(cfg.grid_errors()))
        return cfg

    @classmethod
    def from_json(cls, text: str, strict: bool = True) -> "ProxyConfig":
        return cls.from_dict(json.loads(text), strict=strict)


@dataclass
class EvalResult:
    arch: str
    final_loss: float
    adjusted_score: float
    loss_trace: list[float]
    flops_norm: float
    seed: int
    diverged: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ProxyHead:
    transform: nn.Sequential
    barrier: nn.Module
    transform_layer: ConvLayer
    barrier_layer: ConvLayer | None = field(default=None)


def build_head(backbone_channels: int, cfg: ProxyConfig, rng: Rng) -> ProxyHead:
    """Trainable transform (conv + batch norm, C_back -> c_mid) followed by a
    frozen barrier conv (c_mid -> c_out).

    With the barrier disabled the second layer is the identity and targets
    carry ``c_mid`` channels.
    """
    layer = ConvLayer.create(backbone_channels, cfg.c_mid, cfg.transform_kernel, rng, cfg.init)
    transform = nn.Sequential(nn.Conv(layer), nn.BatchNorm(cfg.c_mid))
    if not cfg.barrier_enabled:
        return ProxyHead(transform, nn.Identity(), layer)
    barrier = ConvLayer.create(cfg.c_mid, cfg.c_out, cfg.barrier_kernel, rng, cfg.init, trainable=False)
    return ProxyHead(transform, nn.Conv(barrier), layer, barrier)


def target_spec_for(cfg: ProxyConfig, arch_template: ArchSpec, input_hw=(32, 32)) -> TargetSpec:
    h, w = tap_hw(arch_template, *input_hw, tap=cfg.tap)
    return TargetSpec(h_out=h, w_out=w, c_out=cfg.c_out, combo=cfg.combo, seed=cfg.seed)


def proxy_task(cfg: ProxyConfig, space: SearchSpace, x: np.ndarray | None = None):
    """The fixed ``(X, Y)`` pair every architecture is scored against for ``cfg``."""
    if x is None:
        x = gen_input_batch(Rng.from_key(cfg.seed, "input"))
    tspec = target_spec_for(cfg, space.make([space.ops[0]] * space.num_edges), x.shape[2:])
    return x, make_targets(tspec, x)


def eproxy_evaluate(spec: ArchSpec, cfg: ProxyConfig, x: np.ndarray, y: np.ndarray,
                    space: SearchSpace | None = None) -> EvalResult:
    """Train backbone + transform for ``cfg.sgd.iterations`` steps; report the last loss."""
    space = space or _space_for(spec)
    fn = normalized_flops(spec, space, (x.shape[1], x.shape[2], x.shape[3]))
    backbone = materialize(spec, Rng.from_key(cfg.seed, "backbone"), cfg.init, in_channels=x.shape[1])
    c_back = backbone.tap_channels(cfg.tap)
    h, w = backbone.tap_hw(x.shape[2], x.shape[3], cfg.tap)
    if y.shape != (x.shape[0], cfg.c_out, h, w):
        raise ValueError(f"target shape {y.shape} != expected {(x.shape[0], cfg.c_out, h, w)}")
    head = build_head(c_back, cfg, Rng.from_key(cfg.seed, "head", c_back))
    params = backbone.parameters() + head.transform.parameters()
    sgd = cfg.effective_sgd
    trace: list[float] = []
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(sgd.iterations):
            for p in params:
                p.zero_grad()
            try:
                out = head.barrier.forward(head.transform.forward(backbone.forward(x, cfg.tap)))
                loss, grad = mse_loss(out, y)
            except NonFiniteError:
                loss = math.inf
            trace.append(loss)
            if not math.isfinite(loss):
                diverged = True
                break
            grad = head.transform.backward(head.barrier.backward(grad))
            backbone.backward(grad)
            sgd_step(params, sgd)
    if diverged:
        final, score = math.inf, math.inf
    else:
        final = trace[-1]
        score = final * (1.0 + cfg.alpha * fn)
    return EvalResult(spec.encode(), final, score, trace, fn, cfg.seed, diverged)


def _space_for(spec: ArchSpec) -> SearchSpace:
    for name in ("mini", "nb201"):
        space = get_space(name)
        if space.num_nodes == spec.cell.num_nodes and all(o in space.ops for o in spec.cell.ops):
            return space
    raise ValueError(f"no known space fits {spec.encode()}")


def _eval_job(args):
    spec, cfg, x, y, space = args
    return eproxy_evaluate(spec, cfg, x, y, space)


def evaluate_many(specs, cfg: ProxyConfig, x, y, space=None, jobs: int = 1) -> list[EvalResult]:
    """Evaluate in input order; ``jobs > 1`` fans out over processes with identical results."""
    args = [(s, cfg, x, y, space) for s in specs]
    if jobs <= 1 or len(args) < 2:
        return [_eval_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_eval_job, args, chunksize=max(1, len(args) // (4 * jobs))))


def rank_architectures(specs, cfg: ProxyConfig, x, y, space=None, jobs: int = 1) -> list[EvalResult]:
    """Ascending adjusted score; ties (and infinities) ordered by arch string."""
    if len(specs) < 2:
        raise ValueError("need at least two architectures to rank")
    results = evaluate_many(specs, cfg, x, y, space, jobs)
    return sorted(results, key=lambda r: (r.adjusted_score, r.arch))

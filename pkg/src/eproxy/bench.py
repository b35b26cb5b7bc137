"""Desk-scale ground truth: train every architecture of a small space on a toy
classification task and store the results as a tabular benchmark."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import nn
from . import tensor as T
from .arch import ArchSpec, SearchSpace, count_flops, get_space, materialize
from .optim import SgdConfig, sgd_step
from .rng import Rng, derive_seed
from .targets import read_epb, write_epb

# class signatures: (fx, fy) plane-wave frequencies and per-channel colour weights
CLASS_SIGNATURES = (
    ((2, 0), (1.0, 0.6, 0.2)),
    ((0, 2), (0.2, 1.0, 0.6)),
    ((2, 2), (0.6, 0.2, 1.0)),
    ((2, -2), (1.0, 1.0, 0.2)),
    ((3, 0), (0.2, 0.6, 1.0)),
    ((0, 3), (1.0, 0.2, 0.6)),
    ((3, 3), (0.6, 1.0, 0.2)),
    ((3, -3), (0.2, 1.0, 1.0)),
)


@dataclass
class ToyTask:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    seed: int

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_epb(d / "train.epb", self.x_train)
        write_epb(d / "test.epb", self.x_test)
        (d / "train.labels").write_bytes(self.y_train.astype("<u2").tobytes())
        (d / "test.labels").write_bytes(self.y_test.astype("<u2").tobytes())
        (d / "task.json").write_text(json.dumps({"num_classes": self.num_classes, "seed": self.seed}))

    @classmethod
    def load(cls, directory) -> "ToyTask":
        d = Path(directory)
        meta = json.loads((d / "task.json").read_text())
        x_train, x_test = read_epb(d / "train.epb"), read_epb(d / "test.epb")
        y_train = np.frombuffer((d / "train.labels").read_bytes(), dtype="<u2").astype(np.int64)
        y_test = np.frombuffer((d / "test.labels").read_bytes(), dtype="<u2").astype(np.int64)
        if len(y_train) != len(x_train) or len(y_test) != len(x_test):
            raise ValueError("label count does not match image count")
        return cls(x_train, y_train, x_test, y_test, meta["num_classes"], meta["seed"])


def _class_images(rng: Rng, label: int, n: int, size: int, noise: float, amplitude: float) -> np.ndarray:
    (fx, fy), colour = CLASS_SIGNATURES[label]
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    wave = 2 * np.pi * (fx * xx + fy * yy)
    jitter = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    base = np.sin(wave[None] + jitter[:, None, None])  # (n, h, w)
    imgs = 0.5 + amplitude * np.asarray(colour)[None, :, None, None] * base[:, None]
    imgs = imgs + rng.normal(0.0, noise, size=imgs.shape)
    return np.clip(imgs, 0.0, 1.0)


def build_toy_task(seed: int, num_classes: int = 4, n_train: int = 512, n_test: int = 256,
                   size: int = 16, noise: float = 0.25, amplitude: float = 0.12) -> ToyTask:
    """Class-balanced images: class-specific plane wave with random phase jitter plus Gaussian noise."""
    if not 2 <= num_classes <= len(CLASS_SIGNATURES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_SIGNATURES)}]")
    if n_train % num_classes or n_test % num_classes:
        raise ValueError("split sizes must be divisible by num_classes")
    rng = Rng.from_key(seed, "toy-task")

    def split(n, tag):
        per = n // num_classes
        sub = rng.spawn(tag)
        xs = np.concatenate([_class_images(sub, c, per, size, noise, amplitude) for c in range(num_classes)])
        ys = np.repeat(np.arange(num_classes), per)
        order = np.asarray(sub.permutation(n))
        return xs[order].astype(T.DTYPE), ys[order].astype(np.int64)

    x_train, y_train = split(n_train, "train")
    x_test, y_test = split(n_test, "test")
    return ToyTask(x_train, y_train, x_test, y_test, num_classes, seed)


def nearest_centroid_accuracy(task: ToyTask) -> float:
    flat = task.x_train.reshape(len(task.x_train), -1)
    cents = np.stack([flat[task.y_train == c].mean(0) for c in range(task.num_classes)])
    test = task.x_test.reshape(len(task.x_test), -1)
    d = ((test[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(1) == task.y_test).mean())


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    test_accuracy: float
    diverged: bool
    loss_trace: list[float] = field(default_factory=list)


class Classifier(nn.Module):
    """Backbone + global average pool + linear head."""

    def __init__(self, spec: ArchSpec, num_classes: int, rng: Rng, in_channels: int = 3):
        self.backbone = materialize(spec, rng, "kaiming_gauss", in_channels)
        self.pool = nn.GlobalAvgPool()
        self.head = nn.Linear.create(self.backbone.tap_channels(), num_classes, rng)

    def forward(self, x):
        return self.head.forward(self.pool.forward(self.backbone.forward(x)))

    def backward(self, grad):
        return self.backbone.backward(self.pool.backward(self.head.backward(grad)))

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()


def predict(model: Classifier, x: np.ndarray, batch: int = 256) -> np.ndarray:
    nn.set_training(model, False)
    try:
        logits = [model.forward(x[i:i + batch]) for i in range(0, len(x), batch)]
    finally:
        nn.set_training(model, True)
    return np.concatenate(logits).argmax(1)


def train_full(spec: ArchSpec, task: ToyTask, rng: Rng, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train ``spec`` with a classification head; report final test accuracy."""
    model = Classifier(spec, task.num_classes, rng.spawn("init"), task.x_train.shape[1])
    params = model.parameters()
    n = len(task.x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sgd = SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, iterations=total)
    order_rng = rng.spawn("order")
    trace = []
    step = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            order = np.asarray(order_rng.permutation(n))
            epoch_loss = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                for p in params:
                    p.zero_grad()
                try:
                    loss, grad = T.softmax_cross_entropy(model.forward(task.x_train[idx]), task.y_train[idx])
                except T.NonFiniteError:
                    loss = math.inf
                if not math.isfinite(loss):
                    return TrainResult(1.0 / task.num_classes, True, trace)
                model.backward(grad)
                lr_t = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total))
                sgd_step(params, sgd, lr=lr_t)
                step += 1
                epoch_loss += loss * len(idx)
            trace.append(epoch_loss / n)
        pred = predict(model, task.x_test)
    return TrainResult(float((pred == task.y_test).mean()), False, trace)


# --------------------------------------------------------------------------- tabular benchmark


class AccuracyOracle(Protocol):
    def query(self, arch) -> dict: ...


@dataclass
class TabularBench:
    meta: dict
    entries: dict[str, dict]

    @property
    def space(self) -> SearchSpace:
        return get_space(self.meta["space"]["name"])

    def query(self, arch) -> dict:
        key = arch if isinstance(arch, str) else arch.encode()
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"architecture {key!r} is not in the benchmark") from None

    def accuracy(self, arch) -> float:
        return self.query(arch)["acc"]

    def archs(self) -> list[str]:
        return list(self.entries)

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "entries": self.entries}, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "TabularBench":
        d = json.loads(Path(path).read_text())
        if set(d) != {"meta", "entries"}:
            raise ValueError(f"bench file must have exactly 'meta' and 'entries', got {sorted(d)}")
        return cls(d["meta"], d["entries"])


class CountingOracle:
    """Wraps a bench and counts every ground-truth lookup."""

    def __init__(self, bench: TabularBench):
        self.bench = bench
        self.count = 0

    def query(self, arch) -> dict:
        self.count += 1
        return self.bench.query(arch)


def query(bench: TabularBench, spec) -> dict:
    return bench.query(spec)


def _train_job(args):
    spec, task, seed, cfg, timed = args
    t0 = time.perf_counter()
    res = train_full(spec, task, Rng(derive_seed(seed, "train", spec.encode())), cfg)
    secs = round(time.perf_counter() - t0, 3) if timed else 0.0
    return spec.encode(), res, secs


def build_bench(space: SearchSpace, task: ToyTask, seed: int, cfg: TrainConfig = TrainConfig(),
                jobs: int = 1, record_timing: bool = False, progress=None) -> TabularBench:
    """Train every architecture of ``space`` once.

    Each architecture's seed is derived from ``seed`` and its arch string, so
    the result does not depend on ``jobs`` or ordering. ``secs`` is 0 unless
    ``record_timing`` (wall-clock values are not reproducible).
    """
    specs = list(space.enumerate())
    args = [(s, task, seed, cfg, record_timing) for s in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = []
        for a in args:
            results.append(_train_job(a))
            if progress:
                progress(len(results), len(args), results[-1])
    entries = {}
    diverged = []
    for arch, res, secs in results:
        entries[arch] = {"acc": res.test_accuracy, "flops": count_flops(space.decode(arch), task.x_train.shape[1:]),
                         "secs": secs}
        if res.diverged:
            diverged.append(arch)
    meta = {
        "space": space.descriptor(),
        "task_seed": task.seed,
        "seed": seed,
        "task": {"num_classes": task.num_classes, "n_train": len(task.x_train), "n_test": len(task.x_test),
                 "image": list(task.x_train.shape[1:])},
        "training": cfg.to_dict(),
        "diverged": sorted(diverged),
    }
    return TabularBench(meta, entries)

"""Cell-based architecture space and its materialisation into a conv backbone.

A cell is a DAG over ``num_nodes`` nodes; node 0 is the cell input, the last
node its output, and every node sums the outputs of its incoming edges. Each
edge ``i -> j`` (``i < j``) carries one op. Edges are listed by target node,
then source node: ``(0,1), (0,2), (1,2), (0,3), (1,3), (2,3), ...``.

The macro skeleton is ``stem conv -> [cells, downsample] x (stages-1) ->
cells -> ReLU``; each downsample is ReLU + stride-2 3x3 conv doubling the
channel count. There is no pooling or linear head.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import nn
from .rng import Rng
from .tensor import ConvLayer, Parameter

TAPS = ("final", "before_ds1", "before_ds2")


class OpKind(str, enum.Enum):
    ZERO = "zero"
    SKIP = "skip"
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    AVGPOOL3X3 = "avgpool3x3"

    @property
    def kernel_size(self) -> int:
        return {OpKind.CONV1X1: 1, OpKind.CONV3X3: 3}.get(self, 0)


def edge_order(num_nodes: int) -> list[tuple[int, int]]:
    return [(i, j) for j in range(1, num_nodes) for i in range(j)]


def nodes_for_edges(num_edges: int) -> int:
    n = 2
    while n * (n - 1) // 2 < num_edges:
        n += 1
    if n * (n - 1) // 2 != num_edges:
        raise ValueError(f"{num_edges} edges do not form a complete DAG")
    return n


@dataclass(frozen=True)
class CellSpec:
    num_nodes: int
    ops: tuple[OpKind, ...]

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ValueError("a cell needs at least 2 nodes")
        object.__setattr__(self, "ops", tuple(OpKind(o) for o in self.ops))
        if len(self.ops) != self.num_nodes * (self.num_nodes - 1) // 2:
            raise ValueError(f"{len(self.ops)} ops given for a {self.num_nodes}-node cell")

    @property
    def edges(self) -> list[tuple[int, int, OpKind]]:
        return [(i, j, op) for (i, j), op in zip(edge_order(self.num_nodes), self.ops)]


@dataclass(frozen=True)
class ArchSpec:
    cell: CellSpec
    stem_channels: int = 16
    cells_per_stage: int = 1
    num_stages: int = 3

    def encode(self) -> str:
        return "|".join(op.value for op in self.cell.ops)

    def __str__(self):
        return self.encode()

    def stage_channels(self, stage: int) -> int:
        return self.stem_channels * 2 ** stage


@dataclass(frozen=True)
class SearchSpace:
    name: str
    ops: tuple[OpKind, ...]
    num_nodes: int
    stem_channels: int = 16
    cells_per_stage: int = 1
    num_stages: int = 3

    @property
    def num_edges(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2

    @property
    def size(self) -> int:
        return len(self.ops) ** self.num_edges

    def descriptor(self) -> dict:
        return {
            "name": self.name,
            "ops": [o.value for o in self.ops],
            "num_nodes": self.num_nodes,
            "stem_channels": self.stem_channels,
            "cells_per_stage": self.cells_per_stage,
            "num_stages": self.num_stages,
        }

    def make(self, ops) -> ArchSpec:
        return ArchSpec(CellSpec(self.num_nodes, tuple(ops)), self.stem_channels,
                        self.cells_per_stage, self.num_stages)

    def decode(self, text: str) -> ArchSpec:
        parts = text.strip().split("|")
        if len(parts) != self.num_edges:
            raise ValueError(f"arch string {text!r} has {len(parts)} ops; space {self.name!r} needs {self.num_edges}")
        try:
            ops = [OpKind(p) for p in parts]
        except ValueError:
            raise ValueError(f"arch string {text!r} contains an unknown op; allowed: "
                             f"{[o.value for o in self.ops]}") from None
        bad = [o.value for o in ops if o not in self.ops]
        if bad:
            raise ValueError(f"ops {bad} are not part of space {self.name!r}")
        return self.make(ops)

    def enumerate(self) -> Iterator[ArchSpec]:
        for ops in itertools.product(self.ops, repeat=self.num_edges):
            yield self.make(ops)

    def random(self, rng: Rng) -> ArchSpec:
        return random_spec(self, rng)

    def mutate(self, spec: ArchSpec, rng: Rng, rate: float = 0.0) -> ArchSpec:
        return mutate_spec(spec, rng, self)

    def max_spec(self) -> ArchSpec:
        """Per-edge FLOPS-maximal architecture."""
        best = max(self.ops, key=lambda o: o.kernel_size)
        return self.make([best] * self.num_edges)


MINI_SPACE = SearchSpace("mini", (OpKind.ZERO, OpKind.SKIP, OpKind.CONV1X1, OpKind.CONV3X3), num_nodes=3)
NB201_SPACE = SearchSpace("nb201", tuple(OpKind), num_nodes=4)
SPACES = {s.name: s for s in (MINI_SPACE, NB201_SPACE)}


def get_space(name: str) -> SearchSpace:
    try:
        return SPACES[name]
    except KeyError:
        raise ValueError(f"unknown space {name!r}; known: {sorted(SPACES)}") from None


def random_spec(space: SearchSpace, rng: Rng) -> ArchSpec:
    return space.make([space.ops[i] for i in rng.integers(len(space.ops), size=space.num_edges)])


def mutate_spec(spec: ArchSpec, rng: Rng, space: SearchSpace) -> ArchSpec:
    """Change exactly one uniformly chosen edge to a different uniformly chosen op."""
    ops = list(spec.cell.ops)
    e = rng.integers(len(ops))
    choices = [o for o in space.ops if o != ops[e]]
    ops[e] = rng.choice(choices)
    return ArchSpec(CellSpec(spec.cell.num_nodes, tuple(ops)), spec.stem_channels,
                    spec.cells_per_stage, spec.num_stages)


# --------------------------------------------------------------------------- FLOPS


def _conv_out(h: int, k: int, stride: int) -> int:
    return (h + 2 * ((k - 1) // 2) - k) // stride + 1


def layer_flops(spec: ArchSpec, input_dims=(3, 32, 32)) -> list[tuple[str, float]]:
    """Per-conv MAC counts (per sample) as ``(layer name, macs)`` pairs."""
    c_in, h, w = input_dims
    c = spec.stem_channels
    out = [("stem", 9.0 * c_in * c * h * w)]
    for s in range(spec.num_stages):
        for cell_idx in range(spec.cells_per_stage):
            for i, j, op in spec.cell.edges:
                k = op.kernel_size
                if k:
                    out.append((f"s{s}.c{cell_idx}.{i}->{j}.{op.value}", float(k * k * c * c * h * w)))
        if s < spec.num_stages - 1:
            h, w = _conv_out(h, 3, 2), _conv_out(w, 3, 2)
            out.append((f"ds{s + 1}", 9.0 * c * (2 * c) * h * w))
            c *= 2
    return out


def count_flops(spec: ArchSpec, input_dims=(3, 32, 32)) -> float:
    """Multiply-accumulates per sample over all conv layers; zero/skip/pool cost nothing."""
    return float(sum(m for _, m in layer_flops(spec, input_dims)))


def normalized_flops(spec: ArchSpec, space: SearchSpace, input_dims=(3, 32, 32)) -> float:
    ref = ArchSpec(space.max_spec().cell, spec.stem_channels, spec.cells_per_stage, spec.num_stages)
    if spec.cell.num_nodes != space.num_nodes:
        raise ValueError(f"spec has {spec.cell.num_nodes} nodes, space {space.name!r} has {space.num_nodes}")
    return count_flops(spec, input_dims) / count_flops(ref, input_dims)


# --------------------------------------------------------------------------- materialisation


def _op_module(op: OpKind, channels: int, rng: Rng, scheme: str) -> nn.Module:
    if op is OpKind.ZERO:
        return nn.Zero()
    if op is OpKind.SKIP:
        return nn.Identity()
    if op is OpKind.AVGPOOL3X3:
        return nn.AvgPool3x3()
    k = op.kernel_size
    return nn.Sequential(nn.ReLU(), nn.Conv(ConvLayer.create(channels, channels, k, rng, scheme)),
                         nn.BatchNorm(channels))


class Cell(nn.Module):
    """Executes a :class:`CellSpec`; structurally-zero paths are skipped."""

    def __init__(self, spec: CellSpec, channels: int, rng: Rng, scheme: str):
        self.spec = spec
        self.edges = [(i, j, op, _op_module(op, channels, rng, scheme)) for i, j, op in spec.edges]

    def forward(self, x):
        n = self.spec.num_nodes
        nodes: list[np.ndarray | None] = [x] + [None] * (n - 1)
        active = []
        for i, j, op, mod in self.edges:
            if op is OpKind.ZERO or nodes[i] is None:
                continue
            y = mod.forward(nodes[i])
            nodes[j] = y if nodes[j] is None else nodes[j] + y
            active.append((i, j, mod))
        self._active = active
        self._dead = nodes[-1] is None
        return np.zeros_like(x) if self._dead else nodes[-1]

    def backward(self, grad):
        if self._dead:
            return np.zeros_like(grad)
        n = self.spec.num_nodes
        grads: list[np.ndarray | None] = [None] * n
        grads[-1] = grad
        for i, j, mod in reversed(self._active):
            if grads[j] is None:
                continue
            g = mod.backward(grads[j])
            grads[i] = g if grads[i] is None else grads[i] + g
        return np.zeros_like(grad) if grads[0] is None else grads[0]

    def parameters(self):
        return [p for *_, mod in self.edges for p in mod.parameters()]


def _tap_stage(tap: str, num_stages: int) -> int:
    if tap == "final":
        return num_stages - 1
    idx = {"before_ds1": 0, "before_ds2": 1}.get(tap)
    if idx is None:
        raise ValueError(f"unknown tap {tap!r}; expected one of {TAPS}")
    if idx >= num_stages - 1:
        raise ValueError(f"tap {tap!r} needs at least {idx + 2} stages, have {num_stages}")
    return idx


def tap_channels(spec: ArchSpec, tap: str = "final") -> int:
    return spec.stage_channels(_tap_stage(tap, spec.num_stages))


def tap_hw(spec: ArchSpec, h: int, w: int, tap: str = "final") -> tuple[int, int]:
    for _ in range(_tap_stage(tap, spec.num_stages)):
        h, w = _conv_out(h, 3, 2), _conv_out(w, 3, 2)
    return h, w


@dataclass(eq=False)
class Backbone(nn.Module):
    """Headless fully convolutional network materialised from an :class:`ArchSpec`."""

    spec: ArchSpec
    stem: nn.Sequential
    stages: list[list[Cell]]
    downsamples: list[nn.Sequential]
    _ran: list = field(default_factory=list, repr=False)

    def tap_channels(self, tap: str = "final") -> int:
        return tap_channels(self.spec, tap)

    def tap_hw(self, h: int, w: int, tap: str = "final") -> tuple[int, int]:
        return tap_hw(self.spec, h, w, tap)

    def forward(self, x, tap: str = "final"):
        last = _tap_stage(tap, self.spec.num_stages)
        ran: list[nn.Module] = [self.stem]
        x = self.stem.forward(x)
        for s in range(last + 1):
            if s > 0:
                ds = self.downsamples[s - 1]
                x = ds.forward(x)
                ran.append(ds)
            for cell in self.stages[s]:
                x = cell.forward(x)
                ran.append(cell)
        relu = nn.ReLU()
        x = relu.forward(x)
        ran.append(relu)
        self._ran = ran
        return x

    def backward(self, grad):
        for mod in reversed(self._ran):
            grad = mod.backward(grad)
        return grad

    def parameters(self) -> list[Parameter]:
        params = list(self.stem.parameters())
        for s, cells in enumerate(self.stages):
            if s > 0:
                params += self.downsamples[s - 1].parameters()
            for cell in cells:
                params += cell.parameters()
        return params


def materialize(spec: ArchSpec, rng: Rng, init_scheme: str = "kaiming_gauss", in_channels: int = 3) -> Backbone:
    """Instantiate weights for ``spec``; deterministic in ``(spec, rng state, scheme)``."""
    c = spec.stem_channels
    stem = nn.Sequential(nn.Conv(ConvLayer.create(in_channels, c, 3, rng, init_scheme), need_input_grad=False),
                         nn.BatchNorm(c))
    stages, downsamples = [], []
    for s in range(spec.num_stages):
        if s > 0:
            downsamples.append(nn.Sequential(nn.ReLU(), nn.Conv(
                ConvLayer.create(c, 2 * c, 3, rng, init_scheme, stride=2, padding=1)), nn.BatchNorm(2 * c)))
            c *= 2
        stages.append([Cell(spec.cell, c, rng, init_scheme) for _ in range(spec.cells_per_stage)])
    return Backbone(spec, stem, stages, downsamples)

"""Input batches and synthetic regression targets.

Three target families are available and can be summed with per-family
coefficients: the output of an untrained 6-layer conv net fed the input
batch, separable sine patterns, and Rademacher (+/-1) "dot" maps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ConvLayer

COEFF_GRID = (0.5, 1.0, 1.5, 2.0)
FEATURES = ("fcn", "sine", "dot")

EPB_MAGIC = b"EPXB"
EPB_VERSION = 1
_EPB_HEADER = struct.Struct("<4sB4I")


class BatchFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureCombo:
    use_fcn: bool = True
    use_sine: bool = False
    use_dot: bool = False
    coeff_fcn: float = 1.0
    coeff_sine: float = 1.0
    coeff_dot: float = 1.0

    def __post_init__(self):
        if not (self.use_fcn or self.use_sine or self.use_dot):
            raise ValueError("at least one target feature must be enabled")
        for name in FEATURES:
            c = getattr(self, f"coeff_{name}")
            if c not in COEFF_GRID:
                raise ValueError(f"coeff_{name}={c} not in {COEFF_GRID}")

    def enabled(self) -> list[tuple[str, float]]:
        return [(n, getattr(self, f"coeff_{n}")) for n in FEATURES if getattr(self, f"use_{n}")]

    def scaled(self, factor: float) -> "FeatureCombo":
        """Copy with every coefficient multiplied; bypasses the grid check."""
        obj = object.__new__(FeatureCombo)
        for k, v in self.__dict__.items():
            object.__setattr__(obj, k, v * factor if k.startswith("coeff_") else v)
        return obj


@dataclass(frozen=True)
class TargetSpec:
    h_out: int
    w_out: int
    c_out: int = 16
    combo: FeatureCombo = FeatureCombo()
    seed: int = 0
    sine_freqs: tuple[int, ...] = (1, 4, 8)


# --------------------------------------------------------------------------- .epb files


def encode_epb(x: np.ndarray) -> bytes:
    x = T.as_tensor4(x)
    return _EPB_HEADER.pack(EPB_MAGIC, EPB_VERSION, *x.shape) + x.astype("<f4").tobytes()


def decode_epb(buf: bytes) -> np.ndarray:
    if len(buf) < _EPB_HEADER.size:
        raise BatchFormatError(f"truncated header: file ends at byte {len(buf)}, header needs {_EPB_HEADER.size}")
    magic, version, b, c, h, w = _EPB_HEADER.unpack_from(buf, 0)
    if magic != EPB_MAGIC:
        raise BatchFormatError(f"bad magic {magic!r} at byte 0, expected {EPB_MAGIC!r}")
    if version != EPB_VERSION:
        raise BatchFormatError(f"unsupported version {version} at byte 4")
    n = b * c * h * w
    start = _EPB_HEADER.size
    need = start + 4 * n
    if len(buf) != need:
        raise BatchFormatError(
            f"payload size mismatch at byte {start}: dims {(b, c, h, w)} need {4 * n} bytes, "
            f"found {len(buf) - start}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=start).astype(T.DTYPE).reshape(b, c, h, w)


def write_epb(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_epb(x))


def read_epb(path) -> np.ndarray:
    return decode_epb(Path(path).read_bytes())


# --------------------------------------------------------------------------- inputs


def gen_input_batch(rng: Rng | None = None, b: int = 16, c: int = 3, h: int = 32, w: int = 32,
                    source: str = "synthetic", path=None) -> np.ndarray:
    """A batch of images in [0, 1].

    Synthetic images are 0.5 plus three random low-frequency plane waves per
    channel plus uniform noise, clipped.
    """
    if source == "file":
        if path is None:
            raise ValueError("file source needs a path")
        x = read_epb(path)
        return x
    if source != "synthetic":
        raise ValueError(f"unknown input source {source!r}")
    if rng is None:
        raise ValueError("synthetic source needs an rng")
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.empty((b, c, h, w))
    for i in range(b):
        for ch in range(c):
            img = np.full((h, w), 0.5)
            amps = rng.uniform(0.05, 0.2, size=3)
            freqs = rng.integers(4, size=(3, 2))
            phases = rng.uniform(0.0, 2 * np.pi, size=3)
            for a, (fx, fy), ph in zip(amps, freqs, phases):
                img += a * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
            img += rng.uniform(-0.1, 0.1, size=(h, w))
            out[i, ch] = img
    return np.clip(out, 0.0, 1.0).astype(T.DTYPE)


# --------------------------------------------------------------------------- targets

FCN_WIDTHS = (32, 32, 64, 64, 64)


def _fcn_strides(h_in: int, h_out: int) -> list[int]:
    n_down = 0
    h = h_in
    while h > h_out:
        h = (h - 1) // 2 + 1
        n_down += 1
    if h != h_out or n_down > 2:
        raise T.ShapeError(f"cannot map input height {h_in} to target height {h_out} with <= 2 stride-2 layers")
    # stride-2 layers sit at positions 3 and 5 (1-based); earlier taps drop the later ones
    strides = [1] * 6
    for pos in (2, 4)[:n_down]:
        strides[pos] = 2
    return strides


def gen_fcn_target(x: np.ndarray, spec: TargetSpec, rng: Rng) -> np.ndarray:
    """Output of an untrained 6-layer conv(3x3)/ReLU net.

    Widths 3->32->32->64(s2)->64->64(s2)->c_out with Kaiming-Gaussian weights;
    the number of stride-2 layers follows the requested output resolution.
    """
    x = T.as_tensor4(x, "fcn input")
    strides = _fcn_strides(x.shape[2], spec.h_out)
    widths = list(FCN_WIDTHS) + [spec.c_out]
    c = x.shape[1]
    for idx, (width, stride) in enumerate(zip(widths, strides)):
        layer = ConvLayer.create(c, width, 3, rng, "kaiming_gauss", stride=stride, padding=1, trainable=False)
        x = T.conv2d_forward(x, layer)
        if idx < len(widths) - 1:
            x = T.relu_forward(x)
        c = width
    if x.shape[2:] != (spec.h_out, spec.w_out):
        raise T.ShapeError(f"fcn target dims {x.shape[2:]} != requested {(spec.h_out, spec.w_out)}")
    return x


def sine_frequency_pairs(freqs) -> list[tuple[int, int]]:
    return [(fw, fh) for fw in freqs for fh in freqs]


def gen_sine_target(spec: TargetSpec, batch: int = 16) -> np.ndarray:
    """Channel m: ``sin(2*pi*f_w*j/w) * sin(2*pi*f_h*i/h)``, frequency pairs cycling over the grid."""
    if spec.c_out < 1:
        raise ValueError("c_out must be >= 1")
    pairs = sine_frequency_pairs(spec.sine_freqs)
    i = np.arange(spec.h_out)[:, None]
    j = np.arange(spec.w_out)[None, :]
    maps = np.empty((spec.c_out, spec.h_out, spec.w_out))
    for m in range(spec.c_out):
        fw, fh = pairs[m % len(pairs)]
        maps[m] = np.sin(2 * np.pi * fw * j / spec.w_out) * np.sin(2 * np.pi * fh * i / spec.h_out)
    return np.ascontiguousarray(np.broadcast_to(maps, (batch,) + maps.shape), dtype=T.DTYPE)


def gen_dot_target(spec: TargetSpec, rng: Rng, batch: int = 16) -> np.ndarray:
    """I.i.d. Rademacher map, shared by every sample in the batch."""
    maps = rng.rademacher((spec.c_out, spec.h_out, spec.w_out))
    return np.ascontiguousarray(np.broadcast_to(maps, (batch,) + maps.shape), dtype=T.DTYPE)


def combine_targets(spec: TargetSpec, x: np.ndarray, rng: Rng) -> np.ndarray:
    """Coefficient-weighted elementwise sum of the enabled features.

    Each family draws from its own child stream (``rng.spawn("fcn")`` /
    ``rng.spawn("dot")``) so toggling one family never perturbs another.
    """
    b = x.shape[0]
    out = np.zeros((b, spec.c_out, spec.h_out, spec.w_out), dtype=T.DTYPE)
    for name, coeff in spec.combo.enabled():
        if name == "fcn":
            feat = gen_fcn_target(x, spec, rng.spawn("fcn"))
        elif name == "sine":
            feat = gen_sine_target(spec, b)
        else:
            feat = gen_dot_target(spec, rng.spawn("dot"), b)
        out += T.DTYPE(coeff) * feat
    return out


def make_targets(spec: TargetSpec, x: np.ndarray) -> np.ndarray:
    return combine_targets(spec, x, Rng.from_key(spec.seed, "targets"))

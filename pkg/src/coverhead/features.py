"""Handcrafted per-pixel features and the FMAP exchange format.

Channel order (D = 14), all computed over a (2r+1)^2 window with clamp-to-edge
borders where a window is involved:

    0-2    R, G, B in [0, 1]
    3-5    local mean of R, G, B
    6-8    local standard deviation of R, G, B
    9      gradient magnitude of intensity (central differences)
    10-13  window means of c*cos(h), c*sin(h), c*cos(2h), c*sin(2h), the first two
           trigonometric moments of the chroma-weighted hue histogram

Hue h and chroma c come from the hexagonal opponent projection
alpha = R - (G + B)/2, beta = sqrt(3)/2 (G - B), so grey pixels contribute 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from coverhead.core import CoverheadError, DomainError, ParseError

N_CHANNELS = 14
CHANNEL_NAMES = (
    "r", "g", "b",
    "mean_r", "mean_g", "mean_b",
    "sd_r", "sd_g", "sd_b",
    "grad_mag",
    "hue_c1", "hue_s1", "hue_c2", "hue_s2",
)
SD_FLOOR = 1e-8

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER = struct.Struct("<4sHIII")
# largest payload accepted when reading, in float32 values
FMAP_MAX_VALUES = 1 << 31


class FmapMagicError(ParseError):
    pass


class FmapVersionError(ParseError):
    pass


class FmapTruncatedError(ParseError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated FMAP payload: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class FmapDimensionError(ParseError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class FeatureMap:
    """Channel-planar float32 features of shape (D, H, W)."""

    data: np.ndarray
    normalization: NormStats | None = field(default=None, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DomainError(f"feature data must be (D, H, W), got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """(D, H*W) view in row-major pixel order."""
        return self.data.reshape(self.channels, -1)

    def mirrored(self) -> "FeatureMap":
        return FeatureMap(np.ascontiguousarray(self.data[:, :, ::-1]), self.normalization)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window of each pixel with edge replication (last two axes)."""
    pad = [(0, 0)] * (a.ndim - 2) + [(r + 1, r), (r + 1, r)]
    p = np.pad(a, pad, mode="edge")
    # a zero row/col in front makes the inclusive prefix sums differentiable by slicing
    p[..., 0, :] = 0
    p[..., :, 0] = 0
    c = p.cumsum(axis=-2).cumsum(axis=-1)
    k = 2 * r + 1
    return c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]


def extract(image: np.ndarray, radius: int = 3) -> FeatureMap:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DomainError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if radius < 1:
        raise DomainError(f"radius must be >= 1, got {radius}")
    h, w, _ = img.shape
    n = (2 * radius + 1) ** 2
    rgb_int = np.moveaxis(img.astype(np.int64), -1, 0)  # (3, H, W)
    out = np.empty((N_CHANNELS, h, w), dtype=np.float64)
    out[0:3] = rgb_int / 255.0

    # integer window sums keep the variance of a constant window exactly zero
    s1 = _box_sum(rgb_int, radius)
    s2 = _box_sum(rgb_int * rgb_int, radius)
    out[3:6] = s1 / (n * 255.0)
    var_num = n * s2 - s1 * s1
    out[6:9] = np.sqrt(np.maximum(var_num, 0)) / (n * 255.0)

    inten = out[0:3].mean(axis=0)
    p = np.pad(inten, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    out[9] = np.hypot(gx, gy)

    r, g, b = out[0], out[1], out[2]
    alpha = r - 0.5 * (g + b)
    beta = (np.sqrt(3.0) / 2.0) * (g - b)
    chroma = np.hypot(alpha, beta)
    safe = np.where(chroma > 0, chroma, 1.0)
    moments = np.stack([
        alpha,
        beta,
        (alpha * alpha - beta * beta) / safe,
        2.0 * alpha * beta / safe,
    ])
    out[10:14] = _box_sum(moments, radius) / n
    return FeatureMap(out.astype(np.float32))


def fit_normalizer(maps: Sequence[FeatureMap]) -> NormStats:
    """Per-channel mean and standard deviation over every pixel of the given maps."""
    maps = list(maps)
    if not maps:
        raise CoverheadError("fit_normalizer needs at least one feature map")
    d = maps[0].channels
    total = 0
    s = np.zeros(d)
    for m in maps:
        if m.channels != d:
            raise DomainError(f"channel mismatch: {m.channels} vs {d}")
        s += m.flat().sum(axis=1, dtype=np.float64)
        total += m.width * m.height
    mean = s / total
    ss = np.zeros(d)
    for m in maps:
        ss += ((m.flat().astype(np.float64) - mean[:, None]) ** 2).sum(axis=1)
    std = np.maximum(np.sqrt(ss / total), SD_FLOOR)
    return NormStats(mean, std)


def normalize_array(data: np.ndarray, stats: NormStats, dtype=np.float32) -> np.ndarray:
    shape = (-1,) + (1,) * (data.ndim - 1)
    return ((data - stats.mean.reshape(shape)) / stats.std.reshape(shape)).astype(dtype)


def apply_normalizer(fmap: FeatureMap, stats: NormStats) -> FeatureMap:
    if fmap.channels != stats.mean.shape[0]:
        raise DomainError(f"stats have {stats.mean.shape[0]} channels, map has {fmap.channels}")
    return FeatureMap(normalize_array(fmap.data, stats), stats)


def encode_fmap(fmap: FeatureMap) -> bytes:
    d, h, w = fmap.data.shape
    header = _HEADER.pack(FMAP_MAGIC, FMAP_VERSION, w, h, d)
    return header + fmap.data.astype("<f4", copy=False).tobytes(order="C")


def decode_fmap(buf: bytes) -> FeatureMap:
    if len(buf) < 4 or buf[:4] != FMAP_MAGIC:
        raise FmapMagicError(f"bad FMAP magic {bytes(buf[:4])!r}, expected {FMAP_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise FmapTruncatedError(_HEADER.size, len(buf))
    _, version, w, h, d = _HEADER.unpack_from(buf)
    if version != FMAP_VERSION:
        raise FmapVersionError(f"unsupported FMAP version {version}")
    n_values = w * h * d
    if n_values > FMAP_MAX_VALUES:
        raise FmapDimensionError(f"FMAP dimensions {w}x{h}x{d} exceed the {FMAP_MAX_VALUES}-value limit")
    expected = n_values * 4
    payload = buf[_HEADER.size:]
    if len(payload) < expected:
        raise FmapTruncatedError(expected, len(payload))
    data = np.frombuffer(payload, dtype="<f4", count=n_values).astype(np.float32).reshape(d, h, w)
    return FeatureMap(data)


def write_fmap(fmap: FeatureMap, path) -> None:
    Path(path).write_bytes(encode_fmap(fmap))


def read_fmap(path) -> FeatureMap:
    return decode_fmap(Path(path).read_bytes())

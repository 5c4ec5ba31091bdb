"""Physical-prior shadow attention from two color spaces.

A frame is thresholded in grayscale and in HSV (S and V channels only),
each candidate mask is cleaned by a morphological opening, the two are
OR-ed together, and the result weights the input frame so that candidate
shadow pixels are emphasised.

Conventions fixed here:
  * luma uses BT.601 weights with round-half-up;
  * S and V live on a 0-255 scale;
  * morphology treats out-of-bounds pixels as unset for both erosion
    and dilation;
  * weighting is multiplicative, out = rgb * (1 + w * mask), with an
    additive alternative selectable per config.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError, ShapeError


@dataclass
class Frame:
    """8-bit RGB image, shape (height, width, 3)."""
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ShapeError(f"Frame expects HxWx3, got {self.rgb.shape}")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class BinaryMask:
    bits: np.ndarray  # bool, (height, width)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ShapeError(f"BinaryMask expects HxW, got {self.bits.shape}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class AttentionMap:
    """Per-pixel weight, 1 + w where the mask is set and 1 elsewhere."""
    weights: np.ndarray


@dataclass
class MsaConfig:
    gray_min: int = 0
    gray_max: int = 120
    s_min: int = 0
    s_max: int = 155
    v_min: int = 6
    v_max: int = 130
    kernel: int = 5
    weight_strength: float = 1.0
    weight_strategy: str = "multiply"  # or "add"

    def __post_init__(self):
        for lo, hi, name in ((self.gray_min, self.gray_max, "gray"),
                             (self.s_min, self.s_max, "s"),
                             (self.v_min, self.v_max, "v")):
            if lo > hi:
                raise ConfigError(f"{name} range [{lo},{hi}] has min > max")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.weight_strength < 0:
            raise ConfigError("weight_strength must be nonnegative")
        if self.weight_strategy not in ("multiply", "add"):
            raise ConfigError(f"unknown weight_strategy {self.weight_strategy!r}")


def rgb_to_gray(f: Frame) -> np.ndarray:
    """BT.601 luma, round-half-up, uint8 (height, width)."""
    rgb = f.rgb.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def rgb_to_sv(f: Frame) -> tuple[np.ndarray, np.ndarray]:
    """Saturation and value channels on a 0-255 scale (hue is not needed)."""
    rgb = f.rgb.astype(np.float64)
    v = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    s = np.zeros_like(v)
    nz = v > 0
    s[nz] = np.floor(255.0 * (v[nz] - mn[nz]) / v[nz] + 0.5)
    return s.astype(np.uint8), v.astype(np.uint8)


def threshold_mask(channels: list[np.ndarray],
                   ranges: list[tuple[int, int]]) -> BinaryMask:
    """Pixel is set iff every channel lies inclusively within its range."""
    if len(channels) != len(ranges):
        raise ShapeError("one range per channel required")
    shape = channels[0].shape
    bits = np.ones(shape, dtype=bool)
    for ch, (lo, hi) in zip(channels, ranges):
        if ch.shape != shape:
            raise ShapeError(f"channel shapes differ: {ch.shape} vs {shape}")
        bits &= (ch >= lo) & (ch <= hi)
    return BinaryMask(bits)


def _erode(bits: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.zeros((bits.shape[0] + 2 * r, bits.shape[1] + 2 * r), dtype=bool)
    padded[r:r + bits.shape[0], r:r + bits.shape[1]] = bits
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.all(axis=(2, 3))


def _dilate(bits: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.zeros((bits.shape[0] + 2 * r, bits.shape[1] + 2 * r), dtype=bool)
    padded[r:r + bits.shape[0], r:r + bits.shape[1]] = bits
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.any(axis=(2, 3))


def morph_open(m: BinaryMask, kernel: int) -> BinaryMask:
    """Erosion then dilation with an all-ones kernel x kernel element."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd, got {kernel}")
    if kernel == 1:
        return BinaryMask(m.bits.copy())
    return BinaryMask(_dilate(_erode(m.bits, kernel), kernel))


def combine(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    return BinaryMask(a.bits | b.bits)


def apply_attention(f: Frame, m: BinaryMask, w: float,
                    strategy: str = "multiply") -> np.ndarray:
    """Weight the frame by the mask; returns float64 (H, W, 3)."""
    if w < 0:
        raise ConfigError("weight_strength must be nonnegative")
    if (f.height, f.width) != (m.height, m.width):
        raise ShapeError("frame/mask dimension mismatch")
    rgb = f.rgb.astype(np.float64)
    mask = m.bits[..., None].astype(np.float64)
    if strategy == "multiply":
        return rgb * (1.0 + w * mask)
    if strategy == "add":
        return rgb + w * 255.0 * mask
    raise ConfigError(f"unknown weight_strategy {strategy!r}")


def attention_map(m: BinaryMask, w: float) -> AttentionMap:
    return AttentionMap(np.where(m.bits, 1.0 + w, 1.0))


def msa_map(f: Frame, cfg: MsaConfig) -> tuple[BinaryMask, AttentionMap, np.ndarray]:
    """Full pipeline: threshold both color spaces, open, union, weight."""
    gray = rgb_to_gray(f)
    s, v = rgb_to_sv(f)
    m_gray = threshold_mask([gray], [(cfg.gray_min, cfg.gray_max)])
    m_hsv = threshold_mask([s, v], [(cfg.s_min, cfg.s_max), (cfg.v_min, cfg.v_max)])
    combined = combine(morph_open(m_gray, cfg.kernel), morph_open(m_hsv, cfg.kernel))
    amap = attention_map(combined, cfg.weight_strength)
    weighted = apply_attention(f, combined, cfg.weight_strength, cfg.weight_strategy)
    return combined, amap, weighted

"""Image file helpers: RGB PNG / binary PPM frames and {0,255} mask PNGs."""
from __future__ import annotations

import numpy as np
from pathlib import Path
from PIL import Image

from .errors import DatasetError


def read_frame(path) -> np.ndarray:
    """Load an 8-bit RGB image (PNG or binary P6 PPM) as (H, W, 3) uint8."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":  # comment to end of line
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    if fields[0] != b"P6":
        raise DatasetError(f"{path}: not a binary P6 PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM supported")
    i += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw[i:i + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DatasetError(f"{path}: truncated PPM payload")
    return pixels.reshape(h, w, 3).copy()


def write_frame(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def read_mask(path) -> np.ndarray:
    """Load a single-channel mask PNG; returns bool (H, W).

    Values must be exactly 0 or 255.
    """
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise DatasetError(f"{path}: non-binary mask values {bad.tolist()}")
    return arr == 255


def mask_values(path) -> np.ndarray:
    """Raw mask values without the binarity check (for validation reports)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_mask(path, bits: np.ndarray) -> None:
    arr = np.where(np.asarray(bits, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def write_overlay(path, weighted: np.ndarray) -> None:
    """Store a weighted frame as RGB PNG, rescaling to the 0-255 range."""
    w = np.asarray(weighted, dtype=np.float64)
    top = max(255.0, float(w.max())) if w.size else 255.0
    Image.fromarray((w / top * 255.0).astype(np.uint8), mode="RGB").save(path)

"""Minimal binary PPM (P6) writing: zero dependencies, bit-exact output."""

from __future__ import annotations

from pathlib import Path

import numpy as np

Array = np.ndarray


def to_gray(values: Array) -> Array:
    """Min-max scale a 2-d array to uint8; constant fields map to mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def gray_to_rgb(gray: Array) -> Array:
    return np.repeat(gray[:, :, None], 3, axis=2)


def write_ppm(path, pixels: Array) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 pixmap."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"write_ppm expects (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())

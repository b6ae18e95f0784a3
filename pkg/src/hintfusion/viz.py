"""Binary portable-pixmap (P6) output for token color maps, one pixel per token."""
from __future__ import annotations

import numpy as np

from .hints import pca_color_map


def rgb_to_bytes(rgb) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-to-even."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if np.any(rgb < 0) or np.any(rgb > 1) or not np.all(np.isfinite(rgb)):
        raise ValueError("colors must lie in [0, 1]")
    return np.rint(rgb * 255.0).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """``pixels`` is (rows, cols, 3) uint8."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (rows, cols, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    rows, cols, _ = pixels.shape
    return f"P6\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a P6 image (magic {fields[0]!r})")
    cols, rows, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = blob[pos:]
    if len(data) != rows * cols * 3:
        raise ValueError(f"expected {rows * cols * 3} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols, 3).copy()


def affinity_image(tokens, grid: tuple[int, int]) -> np.ndarray:
    """PCA color map of ``tokens`` laid out row-major on ``grid``."""
    rows, cols = grid
    rgb = pca_color_map(tokens)
    if rgb.shape[0] != rows * cols:
        raise ValueError(f"{rgb.shape[0]} tokens do not fill a {rows}x{cols} grid")
    return rgb_to_bytes(rgb).reshape(rows, cols, 3)

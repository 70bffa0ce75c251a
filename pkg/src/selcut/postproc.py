"""Mask clean-up: square-element opening and gating by a second modality."""

from __future__ import annotations

import numpy as np

from .errors import InvalidDataError
from .segmenter import to_bins


def _offsets(k: int) -> range:
    # even sizes anchor at the top-left pixel of the central 2x2
    if k < 1:
        raise ValueError("structuring element size must be >= 1")
    lo = (k - 1) // 2
    return range(-lo, k - lo)


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = a[y + dy, x + dx], False outside the grid."""
    h, w = a.shape
    out = np.zeros_like(a)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[ys, xs] = a[yd, xd]
    return out


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    out = np.ones_like(m)
    for dy in _offsets(k):
        for dx in _offsets(k):
            out &= _shifted(m, dy, dx)
    return out


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    for dy in _offsets(k):
        for dx in _offsets(k):
            out |= _shifted(m, -dy, -dx)
    return out


def morphological_open(mask: np.ndarray, k: int) -> np.ndarray:
    """Erode then dilate with a k x k all-ones element (outside counts as background)."""
    return dilate(erode(mask, k), k)


def modality_gate(mask: np.ndarray, gate_image, gate_threshold: int) -> np.ndarray:
    """Keep mask pixels where the gate image is at least ``gate_threshold`` (0-255)."""
    m = np.asarray(mask, dtype=bool)
    g = np.asarray(getattr(gate_image, "pixels", gate_image), dtype=np.float64)
    if m.shape != g.shape:
        raise InvalidDataError(f"mask shape {m.shape} != gate image shape {g.shape}")
    return m & (to_bins(g) >= gate_threshold)

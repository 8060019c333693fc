"""Pure-Python kernels. Reference semantics for the compiled twin in ``_ckernels.pyx``."""

from __future__ import annotations

import math
from typing import Sequence

Rect = Sequence[float]  # (x0, y0, x1, y1)


def pixel_span(lo: float, hi: float, size: int) -> tuple[int, int]:
    """Inclusive pixel index range covered by the continuous interval [lo, hi).

    A pixel ``i`` covers ``[i, i+1)``; it is filled when it overlaps the
    interval with non-zero length. Result is clipped to ``[0, size-1]``;
    an empty span comes back as ``(a, b)`` with ``a > b``.
    """
    a = max(int(math.floor(lo)), 0)
    b = min(int(math.ceil(hi)) - 1, size - 1)
    return a, b


def raster_rects(
    width: int,
    height: int,
    background: Sequence[int],
    rects: Sequence[Rect],
    colors: Sequence[Sequence[int]],
) -> bytes:
    """Paint axis-aligned rects (normalized coords) in order onto an RGB canvas."""
    row = bytes(background) * width
    buf = bytearray(row * height)
    for (x0, y0, x1, y1), rgb in zip(rects, colors):
        c0, c1 = pixel_span(x0 * width, x1 * width, width)
        r0, r1 = pixel_span(y0 * height, y1 * height, height)
        if c0 > c1 or r0 > r1:
            continue
        run = bytes(rgb) * (c1 - c0 + 1)
        for r in range(r0, r1 + 1):
            start = (r * width + c0) * 3
            buf[start : start + len(run)] = run
    return bytes(buf)


def intersection_area(a: Rect, b: Rect) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def first_overlap(rects: Sequence[Rect], probe: Rect) -> int:
    """Index of the first rect with positive-area intersection with ``probe``, or -1."""
    for i, r in enumerate(rects):
        if intersection_area(r, probe) > 0.0:
            return i
    return -1


def quantize_bins(values: Sequence[float], n_bins: int) -> list[int]:
    """floor(v * n_bins) clamped to [0, n_bins - 1]."""
    out = []
    for v in values:
        i = int(math.floor(v * n_bins))
        out.append(0 if i < 0 else (n_bins - 1 if i >= n_bins else i))
    return out

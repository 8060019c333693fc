# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of ``_pykernels``; results must match it bit for bit."""

from libc.math cimport floor, ceil


cdef inline void _span(double lo, double hi, int size, int* a, int* b):
    cdef int x = <int>floor(lo)
    cdef int y = <int>ceil(hi) - 1
    a[0] = x if x > 0 else 0
    b[0] = y if y < size - 1 else size - 1


def pixel_span(double lo, double hi, int size):
    cdef int a, b
    _span(lo, hi, size, &a, &b)
    return a, b


def raster_rects(int width, int height, background, rects, colors):
    cdef bytearray buf = bytearray(bytes(background) * (width * height))
    cdef unsigned char[::1] px = buf
    cdef int c0, c1, r0, r1, r, c, base
    cdef unsigned char cr, cg, cb
    cdef double x0, y0, x1, y1
    for rect, rgb in zip(rects, colors):
        x0, y0, x1, y1 = rect
        _span(x0 * width, x1 * width, width, &c0, &c1)
        _span(y0 * height, y1 * height, height, &r0, &r1)
        if c0 > c1 or r0 > r1:
            continue
        cr = rgb[0]
        cg = rgb[1]
        cb = rgb[2]
        for r in range(r0, r1 + 1):
            base = (r * width + c0) * 3
            for c in range(c1 - c0 + 1):
                px[base] = cr
                px[base + 1] = cg
                px[base + 2] = cb
                base += 3
    return bytes(buf)


cdef inline double _inter(double ax0, double ay0, double ax1, double ay1,
                          double bx0, double by0, double bx1, double by1):
    cdef double w = (ax1 if ax1 < bx1 else bx1) - (ax0 if ax0 > bx0 else bx0)
    cdef double h = (ay1 if ay1 < by1 else by1) - (ay0 if ay0 > by0 else by0)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def intersection_area(a, b):
    return _inter(a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3])


def first_overlap(rects, probe):
    cdef double px0 = probe[0], py0 = probe[1], px1 = probe[2], py1 = probe[3]
    cdef int i = 0
    for r in rects:
        if _inter(r[0], r[1], r[2], r[3], px0, py0, px1, py1) > 0.0:
            return i
        i += 1
    return -1


def quantize_bins(values, int n_bins):
    cdef list out = []
    cdef int i
    cdef double v
    for v in values:
        i = <int>floor(v * n_bins)
        if i < 0:
            i = 0
        elif i >= n_bins:
            i = n_bins - 1
        out.append(i)
    return out

from __future__ import annotations

import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bc2chat import kernels

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])
IDS = ["python", "compiled"][: len(BACKENDS)]

coord = st.floats(-0.2, 1.2, allow_nan=False)
rects = st.tuples(coord, coord, coord, coord).map(
    lambda r: (min(r[0], r[2]), min(r[1], r[3]), max(r[0], r[2]), max(r[1], r[3]))
)


def test_compiled_backend_selected_when_built():
    if kernels.compiled_backend is None:
        pytest.skip("extension not built")
    assert kernels.BACKEND_NAME == "compiled"


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_pixel_span_worked_example(k):
    # box centered at (0.5, 0.5), 0.1 x 0.2, on a 256 x 128 canvas
    assert k.pixel_span(0.45 * 256, 0.55 * 256, 256) == (115, 140)
    assert k.pixel_span(0.4 * 128, 0.6 * 128, 128) == (51, 76)
    assert k.pixel_span(-5.0, 3.0, 10) == (0, 2)
    assert k.pixel_span(9.5, 30.0, 10) == (9, 9)


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_raster_paints_in_order(k):
    img = k.raster_rects(4, 2, (0, 0, 0), [(0, 0, 0.5, 1), (0.25, 0, 1, 0.5)], [(1, 1, 1), (2, 2, 2)])
    assert len(img) == 4 * 2 * 3
    assert list(img[0::3]) == [1, 2, 2, 2, 1, 1, 0, 0]


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_quantize_bins(k):
    assert k.quantize_bins([0.0, 0.5, 1.0, -1.0, 2.0, 255.5 / 256], 256) == [0, 128, 255, 0, 255, 255]


@given(rects, rects)
def test_intersection_oracle(a, b):
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    for k in BACKENDS:
        assert k.intersection_area(a, b) == pytest.approx(w * h, abs=1e-15)
        assert k.intersection_area(a, b) == k.intersection_area(b, a)


@given(st.lists(rects, max_size=8), rects)
def test_backends_agree(rs, probe):
    outs = [(k.first_overlap(rs, probe), [k.intersection_area(r, probe) for r in rs]) for k in BACKENDS]
    assert all(o == outs[0] for o in outs)


@given(st.lists(st.floats(-1, 2, allow_nan=False), max_size=20), st.integers(1, 300))
def test_quantize_backends_agree(vals, n):
    ref = [min(max(math.floor(v * n), 0), n - 1) for v in vals]
    for k in BACKENDS:
        assert k.quantize_bins(vals, n) == ref


def test_raster_backends_agree():
    rng = random.Random(5)
    for _ in range(30):
        rs, cs = [], []
        for _ in range(rng.randrange(6)):
            x0, y0 = rng.uniform(-0.1, 1), rng.uniform(-0.1, 1)
            rs.append((x0, y0, x0 + rng.uniform(0, 0.5), y0 + rng.uniform(0, 0.5)))
            cs.append(tuple(rng.randrange(256) for _ in range(3)))
        imgs = {k.raster_rects(37, 19, (9, 8, 7), rs, cs) for k in BACKENDS}
        assert len(imgs) == 1

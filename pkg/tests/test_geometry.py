import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cadet.geometry import (Box, GeometryError, LtrbOffsets, box_from_offsets, box_iou_matrix,
                            centerness_target, iou, ltrb_offsets)


def test_iou_examples():
    assert iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0
    # intersection 1, union 4 + 4 - 1
    assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_touching_boxes_have_zero_iou():
    assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0


@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, math.inf, 1), (math.nan, 0, 1, 1)])
def test_degenerate_boxes_rejected(coords):
    with pytest.raises(GeometryError):
        Box(*coords)


def test_ltrb_examples():
    assert ltrb_offsets(1, 1, Box(0, 0, 2, 2)) == (1, 1, 1, 1)
    assert ltrb_offsets(0, 0, Box(0, 0, 2, 2)) == (0, 0, 2, 2)
    assert ltrb_offsets(1, 2, Box(0, 0, 4, 4)) == (1, 2, 3, 2)
    assert min(ltrb_offsets(5, 5, Box(0, 0, 2, 2))) < 0


def test_centerness_examples():
    assert centerness_target(LtrbOffsets(1, 1, 1, 1)) == 1.0
    assert centerness_target(LtrbOffsets(1, 2, 3, 2)) == pytest.approx(math.sqrt(1 / 3), abs=1e-12)
    assert centerness_target(LtrbOffsets(1, 1, 9, 1)) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(GeometryError):
        centerness_target(LtrbOffsets(0, 1, 1, 1))


coord = st.floats(-100, 100, allow_nan=False)
side = st.floats(0.01, 50, allow_nan=False)
boxes = st.builds(lambda x, y, w, h: Box(x, y, x + w, y + h), coord, coord, side, side)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


@given(boxes, st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_offsets_reconstruct_box(box, fx, fy):
    px = box.x1 + fx * box.width
    py = box.y1 + fy * box.height
    o = ltrb_offsets(px, py, box)
    assert o.l + o.r == pytest.approx(box.width, rel=1e-9)
    assert o.t + o.b == pytest.approx(box.height, rel=1e-9)
    back = box_from_offsets(px, py, o)
    np.testing.assert_allclose(back.as_tuple(), box.as_tuple(), rtol=1e-12, atol=1e-9)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_centerness_swap_invariance(l, t, r, b):
    c = centerness_target(LtrbOffsets(l, t, r, b))
    assert c == centerness_target(LtrbOffsets(r, t, l, b))
    assert c == centerness_target(LtrbOffsets(l, b, r, t))
    assert 0 < c <= 1


def test_centerness_decreases_away_from_center():
    box = Box(0, 0, 10, 6)
    values = [centerness_target(ltrb_offsets(x, 3, box)) for x in np.linspace(5, 9.9, 20)]
    assert all(b < a for a, b in zip(values, values[1:]))
    values = [centerness_target(ltrb_offsets(x, 3, box)) for x in np.linspace(5, 0.1, 20)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_iou_matrix_matches_scalar(rng):
    from oracles import random_box

    a = [random_box(rng) for _ in range(6)]
    b = [random_box(rng) for _ in range(5)]
    m = box_iou_matrix([x.as_tuple() for x in a], [x.as_tuple() for x in b])
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            assert m[i, j] == iou(x, y)

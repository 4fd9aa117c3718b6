"""Axis-aligned box arithmetic, per-location regression offsets and centerness."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Rectangle in image pixels, corner convention: (x1, y1) is the top-left."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)


class LtrbOffsets(NamedTuple):
    """Distances from a location to the left, top, right and bottom box sides."""

    l: float
    t: float
    r: float
    b: float


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ltrb_offsets(px: float, py: float, box: Box) -> LtrbOffsets:
    return LtrbOffsets(px - box.x1, py - box.y1, box.x2 - px, box.y2 - py)


def box_from_offsets(px: float, py: float, o: LtrbOffsets) -> Box:
    return Box(px - o.l, py - o.t, px + o.r, py + o.b)


def centerness_target(o: LtrbOffsets) -> float:
    l, t, r, b = o
    if min(o) <= 0:
        raise GeometryError(f"centerness needs strictly positive offsets, got {tuple(o)}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


# Vectorized forms used by assignment and evaluation.

def boxes_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = boxes_area(a)[:, None] + boxes_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def centerness_from_ltrb(ltrb: np.ndarray) -> np.ndarray:
    ltrb = np.asarray(ltrb, dtype=np.float64)
    l, t, r, b = (ltrb[..., i] for i in range(4))
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)

"""Ground-truth boxes -> per-pixel, per-pyramid-level supervision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box

BACKGROUND = -1

DEFAULT_STRIDES = (8, 16, 32, 64, 128)
DEFAULT_SCALE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, math.inf))


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    stride: int
    scale_range: tuple[float, float]


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PyramidLevel, ...] = field(
        default_factory=lambda: tuple(
            PyramidLevel(i, s, r)
            for i, s, r in zip(range(3, 8), DEFAULT_STRIDES, DEFAULT_SCALE_RANGES)
        )
    )

    def __post_init__(self):
        if [lv.index for lv in self.levels] != [3, 4, 5, 6, 7]:
            raise AssignmentError("pyramid must have exactly the levels 3..7")
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise AssignmentError(f"strides must increase strictly: {strides}")
        ranges = [lv.scale_range for lv in self.levels]
        if ranges[0][0] != 0.0 or ranges[-1][1] != math.inf:
            raise AssignmentError("scale ranges must tile (0, inf)")
        for (lo, hi), (nlo, _) in zip(ranges, ranges[1:]):
            if hi != nlo or hi <= lo:
                raise AssignmentError(f"scale ranges not contiguous: {ranges}")

    @classmethod
    def from_lists(cls, strides: Sequence[int], scale_ranges: Sequence[Sequence[float]]) -> "PyramidSpec":
        levels = tuple(
            PyramidLevel(i, int(s), (float(r[0]), float(r[1])))
            for i, s, r in zip(range(3, 3 + len(strides)), strides, scale_ranges)
        )
        return cls(levels)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(lv.stride for lv in self.levels)

    def feature_sizes(self, image_w: int, image_h: int) -> list[tuple[int, int]]:
        """(H_i, W_i) per level."""
        return [(-(-image_h // lv.stride), -(-image_w // lv.stride)) for lv in self.levels]


@dataclass
class LevelTargets:
    cls_target: np.ndarray  # (H, W) int, BACKGROUND where negative
    ctr_target: np.ndarray  # (H, W) float, 0 where negative
    reg_target: np.ndarray  # (H, W, 4) float ltrb pixels, 0 where negative
    pos_mask: np.ndarray  # (H, W) bool


def pyramid_locations(spec: PyramidSpec, image_w: int, image_h: int) -> list[np.ndarray]:
    """Image coordinates of every feature-map cell: one (H_i, W_i, 2) array of (px, py) per level."""
    if image_w <= 0 or image_h <= 0:
        raise AssignmentError(f"image size must be positive, got {image_w}x{image_h}")
    out = []
    for lv, (h, w) in zip(spec.levels, spec.feature_sizes(image_w, image_h)):
        s = lv.stride
        xs = s / 2.0 + np.arange(w, dtype=np.float64) * s
        ys = s / 2.0 + np.arange(h, dtype=np.float64) * s
        gx, gy = np.meshgrid(xs, ys)
        out.append(np.stack([gx, gy], axis=-1))
    return out


def assign_targets(
    gts: Sequence[tuple[Box, int]],
    spec: PyramidSpec,
    image_w: int,
    image_h: int,
    num_classes: int | None = None,
) -> list[LevelTargets]:
    """Build per-level classification, centerness and ltrb targets.

    A location is positive for a box when it lies strictly inside it and the
    largest of its four offsets falls in the level's half-open range
    ``(lo, hi]``. Among qualifying boxes the smallest area wins, then the
    lowest index in ``gts``.
    """
    for box, cid in gts:
        if cid < 0 or (num_classes is not None and cid >= num_classes):
            raise AssignmentError(f"class id {cid} out of range")
        if box.x1 < 0 or box.y1 < 0 or box.x2 > image_w or box.y2 > image_h:
            raise AssignmentError(f"box {box.as_tuple()} outside {image_w}x{image_h} image")

    boxes = np.array([b.as_tuple() for b, _ in gts], dtype=np.float64).reshape(-1, 4)
    classes = np.array([c for _, c in gts], dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])

    targets = []
    for lv, locs in zip(spec.levels, pyramid_locations(spec, image_w, image_h)):
        h, w = locs.shape[:2]
        cls_t = np.full((h, w), BACKGROUND, dtype=np.int64)
        ctr_t = np.zeros((h, w), dtype=np.float64)
        reg_t = np.zeros((h, w, 4), dtype=np.float64)
        if len(boxes):
            px = locs[..., 0:1]
            py = locs[..., 1:2]
            ltrb = np.stack(
                [px - boxes[:, 0], py - boxes[:, 1], boxes[:, 2] - px, boxes[:, 3] - py], axis=-1
            )  # (H, W, G, 4)
            inside = ltrb.min(axis=-1) > 0
            max_off = ltrb.max(axis=-1)
            lo, hi = lv.scale_range
            ok = inside & (max_off > lo) & (max_off <= hi)
            cand_area = np.where(ok, areas, np.inf)
            winner = cand_area.argmin(axis=-1)
            pos = ok.any(axis=-1)
            yy, xx = np.nonzero(pos)
            g = winner[yy, xx]
            cls_t[yy, xx] = classes[g]
            sel = ltrb[yy, xx, g]
            reg_t[yy, xx] = sel
            lr = np.minimum(sel[:, 0], sel[:, 2]) / np.maximum(sel[:, 0], sel[:, 2])
            tb = np.minimum(sel[:, 1], sel[:, 3]) / np.maximum(sel[:, 1], sel[:, 3])
            ctr_t[yy, xx] = np.sqrt(lr * tb)
        targets.append(LevelTargets(cls_t, ctr_t, reg_t, cls_t != BACKGROUND))
    return targets

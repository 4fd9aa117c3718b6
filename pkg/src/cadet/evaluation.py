"""Decode per-pixel head outputs into boxes, suppress duplicates, and score them with COCO-style AP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .assignment import PyramidSpec, pyramid_locations
from .geometry import Box, box_iou_matrix, boxes_area

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.arange(101) / 100.0


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().double().numpy()
    return np.asarray(t, dtype=np.float64)


def decode(outputs: Sequence, spec: PyramidSpec, image_w: int, image_h: int,
           score_thresh: float = 0.05, topk: int = 100, index: int = 0) -> list[Detection]:
    """Turn one image's per-level head outputs into scored, clipped boxes (before NMS).

    Score per location and class is ``sqrt(sigmoid(cls) * sigmoid(ctr))``.
    ``index`` picks the image out of batched outputs.
    """
    if not 0 < score_thresh < 1 or topk < 1:
        raise EvaluationError("score_thresh must lie in (0, 1) and topk must be >= 1")
    if len(outputs) != len(spec.levels):
        raise EvaluationError(f"{len(outputs)} output levels vs {len(spec.levels)} pyramid levels")
    dets: list[Detection] = []
    for out, locs in zip(outputs, pyramid_locations(spec, image_w, image_h)):
        cls = _as_numpy(out.cls_logits[index])
        ctr = _as_numpy(out.ctr_logits[index])
        reg = _as_numpy(out.reg[index])
        if cls.shape[:2] != locs.shape[:2]:
            raise EvaluationError(f"output map {cls.shape[:2]} does not match location grid {locs.shape[:2]}")
        scores = np.sqrt(_sigmoid(cls) * _sigmoid(ctr)[..., None])
        flat = scores.reshape(-1)
        cand = np.nonzero(flat > score_thresh)[0]
        if cand.size == 0:
            continue
        order = np.argsort(-flat[cand], kind="stable")[:topk]
        cand = cand[order]
        num_classes = cls.shape[-1]
        loc_idx, cls_idx = np.divmod(cand, num_classes)
        pts = locs.reshape(-1, 2)[loc_idx]
        ltrb = reg.reshape(-1, 4)[loc_idx]
        boxes = np.stack([pts[:, 0] - ltrb[:, 0], pts[:, 1] - ltrb[:, 1],
                          pts[:, 0] + ltrb[:, 2], pts[:, 1] + ltrb[:, 3]], axis=1)
        boxes[:, 0::2] = boxes[:, 0::2].clip(0, image_w)
        boxes[:, 1::2] = boxes[:, 1::2].clip(0, image_h)
        for b, c, s in zip(boxes, cls_idx, flat[cand]):
            if b[2] > b[0] and b[3] > b[1] and s > 0:
                dets.append(Detection(Box(*map(float, b)), int(c), float(s)))
    return dets


def _canonical_key(d: Detection, i: int):
    b = d.box
    return (-d.score, -b.area, b.x1, b.y1, b.x2, b.y2, d.class_id, i)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.6) -> list[Detection]:
    """Greedy per-class suppression. Ties in score go to the larger box, then to box coordinates."""
    if not 0 < iou_thresh < 1:
        raise EvaluationError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: _canonical_key(dets[i], i))
    ranked = [dets[i] for i in order]
    if not ranked:
        return []
    boxes = np.array([d.box.as_tuple() for d in ranked])
    classes = np.array([d.class_id for d in ranked])
    ious = box_iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(ranked), dtype=bool)
    keep = []
    for i in range(len(ranked)):
        if suppressed[i]:
            continue
        keep.append(ranked[i])
        suppressed |= (classes == classes[i]) & (ious[i] > iou_thresh)
    return keep


def postprocess(outputs, spec: PyramidSpec, image_w: int, image_h: int, score_thresh=0.05, topk=100,
                nms_iou=0.6, max_dets=100, index: int = 0) -> list[Detection]:
    dets = nms(decode(outputs, spec, image_w, image_h, score_thresh, topk, index), nms_iou)
    return dets[:max_dets]


@dataclass
class MetricsReport:
    map: float
    map50: float
    map75: float
    map_s: float
    map_m: float
    map_l: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    n_gts: int = 0
    n_dets: int = 0

    def to_record(self) -> dict:
        """JSON-safe dict; undefined (empty-bucket) values become ``None``."""
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "map": clean(self.map), "map50": clean(self.map50), "map75": clean(self.map75),
            "map_s": clean(self.map_s), "map_m": clean(self.map_m), "map_l": clean(self.map_l),
            "per_class": {str(k): {kk: clean(vv) for kk, vv in v.items()} for k, v in self.per_class.items()},
            "n_gts": self.n_gts, "n_dets": self.n_dets,
        }


def size_buckets_for(image_size: int, reference: int = 800) -> dict[str, tuple[float, float]]:
    """COCO's small/medium/large area bounds (32^2, 96^2) rescaled to ``image_size``."""
    k = (image_size / reference) ** 2
    a1, a2 = 32.0**2 * k, 96.0**2 * k
    return {"s": (0.0, a1), "m": (a1, a2), "l": (a2, math.inf)}


def _match_image(det_boxes, det_scores, gt_boxes, gt_ignore, thr):
    """COCO greedy matching for one image and class.

    Returns per-detection (matched, ignored) flags in score order, plus the
    order itself.
    """
    d_order = np.argsort(-det_scores, kind="stable")
    g_order = np.argsort(gt_ignore, kind="stable")  # non-ignored first
    gb = gt_boxes[g_order]
    gi = gt_ignore[g_order]
    ious = box_iou_matrix(det_boxes[d_order], gb) if len(gb) and len(d_order) else np.zeros((len(d_order), len(gb)))
    taken = np.zeros(len(gb), dtype=bool)
    matched = np.zeros(len(d_order), dtype=bool)
    ignored = np.zeros(len(d_order), dtype=bool)
    for k in range(len(d_order)):
        best, m = min(thr, 1 - 1e-10), -1
        for g in range(len(gb)):
            if taken[g]:
                continue
            if m > -1 and not gi[m] and gi[g]:
                break
            if ious[k, g] < best:
                continue
            best, m = ious[k, g], g
        if m > -1:
            taken[m] = True
            matched[k] = True
            ignored[k] = gi[m]
    return d_order, matched, ignored


def average_precision(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        return math.nan
    tpc = np.cumsum(tp, dtype=np.float64)
    fpc = np.cumsum(fp, dtype=np.float64)
    recall = tpc / n_gt
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    valid = idx < len(precision)
    q[valid] = precision[idx[valid]]
    return math.fsum(q) / len(q)


def _gt_arrays(gts):
    items = gts.gts() if hasattr(gts, "gts") else list(gts)
    boxes = np.array([b.as_tuple() for b, _ in items], dtype=np.float64).reshape(-1, 4)
    classes = np.array([c for _, c in items], dtype=np.int64)
    return boxes, classes


def class_ap(preds, gts, image_ids, class_id, thr, area_range=(0.0, math.inf), max_dets=100) -> float:
    lo, hi = area_range
    scores, tps, fps = [], [], []
    n_gt = 0
    for iid in image_ids:
        gboxes, gcls = _gt_arrays(gts[iid])
        gboxes = gboxes[gcls == class_id]
        garea = boxes_area(gboxes)
        gignore = ((garea < lo) | (garea > hi)).astype(np.int64)
        n_gt += int((gignore == 0).sum())
        dets = [d for d in preds[iid] if d.class_id == class_id]
        dets = sorted(dets, key=lambda d: -d.score)[:max_dets]
        if not dets:
            continue
        dboxes = np.array([d.box.as_tuple() for d in dets])
        dscores = np.array([d.score for d in dets])
        order, matched, ignored = _match_image(dboxes, dscores, gboxes, gignore, thr)
        darea = boxes_area(dboxes[order])
        ignored = ignored | (~matched & ((darea < lo) | (darea > hi)))
        scores.append(dscores[order])
        tps.append(matched & ~ignored)
        fps.append(~matched & ~ignored)
    if n_gt == 0:
        return math.nan
    if not scores:
        return 0.0
    scores = np.concatenate(scores)
    order = np.argsort(-scores, kind="mergesort")
    tp = np.concatenate(tps)[order]
    fp = np.concatenate(fps)[order]
    return average_precision(tp, fp, n_gt)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def evaluate_map(preds: Mapping[str, Sequence[Detection]], gts: Mapping, num_classes: int,
                 iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
                 size_buckets: Mapping[str, tuple[float, float]] | None = None,
                 max_dets: int = 100) -> MetricsReport:
    """COCO-style AP family over all images.

    ``gts`` maps image id to a ``SceneAnnotation`` or a list of ``(Box,
    class_id)``. Classes without ground truth are left out of the means, and a
    metric with nothing to average is NaN.
    """
    if set(preds) != set(gts):
        missing = sorted(set(gts) ^ set(preds))[:5]
        raise EvaluationError(f"image ids differ between predictions and ground truth, e.g. {missing}")
    image_ids = sorted(gts)
    if size_buckets is None:
        size_buckets = size_buckets_for(800)
    thresholds = [float(t) for t in iou_thresholds]

    per_class = {}
    ap_all, ap50, ap75 = [], [], []
    for c in range(num_classes):
        aps = [class_ap(preds, gts, image_ids, c, t, max_dets=max_dets) for t in thresholds]
        a50 = class_ap(preds, gts, image_ids, c, 0.5, max_dets=max_dets)
        a75 = class_ap(preds, gts, image_ids, c, 0.75, max_dets=max_dets)
        per_class[c] = {"ap": _nanmean(aps), "ap50": a50, "ap75": a75}
        ap_all += aps
        ap50.append(a50)
        ap75.append(a75)
    bucket_maps = {}
    for name in ("s", "m", "l"):
        rng = size_buckets[name]
        vals = [class_ap(preds, gts, image_ids, c, t, rng, max_dets)
                for c in range(num_classes) for t in thresholds]
        bucket_maps[name] = _nanmean(vals)
    n_gts = sum(len(_gt_arrays(gts[i])[1]) for i in image_ids)
    n_dets = sum(len(preds[i]) for i in image_ids)

    def zero_if_undefined(v):
        return 0.0 if math.isnan(v) else v

    return MetricsReport(
        map=zero_if_undefined(_nanmean(ap_all)),
        map50=zero_if_undefined(_nanmean(ap50)),
        map75=zero_if_undefined(_nanmean(ap75)),
        map_s=bucket_maps["s"], map_m=bucket_maps["m"], map_l=bucket_maps["l"],
        per_class=per_class, n_gts=n_gts, n_dets=n_dets,
    )


def export_response_maps(model, image: np.ndarray, out_dir, stem: str = "image",
                         delta: float = 20.0) -> list[Path]:
    """Write each level's center-aware map as an 8-bit PNG at input resolution plus a ``.npy`` of raw values.

    ``image`` is ``(H, W, 3)`` uint8 or float in [0, 1].
    """
    from .alignment import center_aware_map

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(img, dtype=dtype).permute(2, 0, 1)[None]
    h, w = img.shape[:2]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        _, outs = model(x)
    model.train(was_training)
    written = []
    for lvl, out in zip(range(3, 3 + len(outs)), outs):
        m = center_aware_map(out.cls_logits[0], out.ctr_logits[0], delta).double().numpy()
        stride = model.strides[lvl - 3]
        up = np.repeat(np.repeat(m, stride, axis=0), stride, axis=1)[:h, :w]
        png = out_dir / f"{stem}_P{lvl}.png"
        Image.fromarray(np.round(up * 255.0).clip(0, 255).astype(np.uint8), mode="L").save(png)
        np.save(out_dir / f"{stem}_P{lvl}.npy", m)
        written.append(png)
    with open(out_dir / f"{stem}_levels.json", "w") as fh:
        json.dump({"levels": [p.name for p in written], "delta": delta, "size": [h, w]}, fh)
    return written

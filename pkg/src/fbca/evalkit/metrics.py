"""Box overlap, greedy matching, NMS and the log-average miss rate over FPPI in [1e-2, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]  # x, y, w, h in pixels; (x, y) is the top-left corner

MR_FLOOR = 1e-10


def iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class DetectionRecord:
    """Scored detections and ground truth for one image."""

    detections: list[tuple[Box, float]] = field(default_factory=list)
    gts: list[Box] = field(default_factory=list)

    def order(self) -> list[int]:
        """Detection indices by descending score, ties by lower index."""
        return sorted(range(len(self.detections)), key=lambda i: (-self.detections[i][1], i))

    def sorted(self) -> DetectionRecord:
        return DetectionRecord([self.detections[i] for i in self.order()], list(self.gts))


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    order: list[int]  # detection indices in matching order
    is_tp: list[bool]  # aligned with ``order``
    gt_of: list[int]  # matched GT index per ordered detection, -1 if none


def match_detections(dets: Sequence[tuple[Box, float]], gts: Sequence[Box], iou_thresh: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching; each GT absorbs at most one detection."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    taken = [False] * len(gts)
    is_tp, gt_of = [], []
    for i in order:
        box = dets[i][0]
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            o = iou(box, gt)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
        is_tp.append(best >= 0)
        gt_of.append(best)
    tp = sum(is_tp)
    return MatchResult(tp=tp, fp=len(order) - tp, fn=len(gts) - tp, order=order, is_tp=is_tp, gt_of=gt_of)


def nms(dets: Sequence[tuple[Box, float]], iou_thresh: float = 0.5) -> list[tuple[Box, float]]:
    """Greedy suppression in descending score order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept: list[tuple[Box, float]] = []
    for i in order:
        if all(iou(dets[i][0], k[0]) < iou_thresh for k in kept):
            kept.append(dets[i])
    return kept


def fppi_reference_points(n_points: int = 9) -> np.ndarray:
    return np.logspace(-2.0, 0.0, n_points)


def miss_rate_curve(records: Sequence[DetectionRecord], iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(fppi, miss_rate) at every distinct score threshold, led by the empty-detection point (0, 1)."""
    n_img = len(records)
    n_gt = sum(len(r.gts) for r in records)
    if n_img == 0:
        raise ValueError("miss-rate curve needs at least one image")
    if n_gt == 0:
        raise ValueError("miss rate is undefined without ground truth")
    scores, hits = [], []
    for rec in records:
        m = match_detections(rec.detections, rec.gts, iou_thresh)
        for i, tp in zip(m.order, m.is_tp):
            scores.append(rec.detections[i][1])
            hits.append(tp)
    fppi, mr = [0.0], [1.0]
    if scores:
        scores = np.asarray(scores, dtype=np.float64)
        hits = np.asarray(hits, dtype=np.int64)
        order = np.argsort(-scores, kind="stable")
        s_sorted = scores[order]
        tp_cum = np.cumsum(hits[order])
        fp_cum = np.cumsum(1 - hits[order])
        # last position of every distinct-score group
        ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
        fppi += (fp_cum[ends] / n_img).tolist()
        mr += (1.0 - tp_cum[ends] / n_gt).tolist()
    return np.asarray(fppi), np.asarray(mr)


def log_average_miss_rate(fppi: np.ndarray, mr: np.ndarray, n_points: int = 9) -> float:
    """Sample the curve at log-spaced references with the largest-FPPI-at-or-below rule."""
    samples = []
    for ref in fppi_reference_points(n_points):
        below = np.flatnonzero(fppi <= ref)
        # curve points are ordered by threshold, so the last qualifying one has the largest FPPI
        samples.append(mr[below[-1]] if below.size else 1.0)
    return float(np.exp(np.mean(np.log(np.maximum(samples, MR_FLOOR)))))


def mr2(records: Sequence[DetectionRecord], iou_thresh: float = 0.5, n_points: int = 9) -> float:
    """Log-average miss rate over FPPI in [1e-2, 1e0]; lower is better."""
    fppi, mr = miss_rate_curve(records, iou_thresh)
    return log_average_miss_rate(fppi, mr, n_points)

"""Single-scale anchor-free head: per-cell objectness plus center offset and log size."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..numerics import functional as F
from ..numerics.module import Conv2d, ConvBnAct, Module
from ..numerics.rng import RngStream
from ..numerics.tensor import Tensor
from .metrics import Box

STRIDE = 8


class DetectionHead(Module):
    """3x3 ConvBnAct then a 1x1 conv to 5 maps: objectness logit, dx, dy, log w, log h."""

    def __init__(self, channels: int, rng: RngStream | None = None, negative_slope: float = 0.1, dtype=np.float64):
        rng = rng or RngStream(0)
        self.stem = ConvBnAct(channels, channels, 3, rng=rng, negative_slope=negative_slope, dtype=dtype)
        self.pred = Conv2d(channels, 5, 1, rng=rng, dtype=dtype)
        # small objectness/box init keeps early logits near zero
        self.pred.kernel.data *= 0.01

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return self.pred(self.stem(x, training))


def head_forward(x: Tensor, head: DetectionHead, training: bool = False) -> tuple[Tensor, Tensor]:
    """Returns (objectness probability [N, 1, h, w], box regressors [N, 4, h, w])."""
    out = head(x, training)
    obj, box = F.split(out, [1, 4], axis=1)
    return F.sigmoid(obj), box


def build_targets(boxes: Sequence[Sequence[Box]], grid: tuple[int, int], stride: int = STRIDE, dtype=np.float64):
    """Objectness, regression targets and positive mask; the cell holding a GT center is its only positive."""
    n = len(boxes)
    gh, gw = grid
    obj = np.zeros((n, 1, gh, gw), dtype=dtype)
    reg = np.zeros((n, 4, gh, gw), dtype=dtype)
    for b, img_boxes in enumerate(boxes):
        for x, y, w, h in img_boxes:
            cx, cy = (x + w / 2.0) / stride, (y + h / 2.0) / stride
            j, i = min(int(cx), gw - 1), min(int(cy), gh - 1)
            if obj[b, 0, i, j]:
                continue  # first GT claims the cell
            obj[b, 0, i, j] = 1.0
            reg[b, :, i, j] = (cx - j, cy - i, math.log(w / stride), math.log(h / stride))
    return obj, reg, obj.copy()


def head_loss(pred: Tensor, obj_t: np.ndarray, reg_t: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed BCE over all cells plus L1 over positive cells, both divided by the positive count."""
    logits, reg = F.split(pred, [1, 4], axis=1)
    npos = max(float(mask.sum()), 1.0)
    bce = F.bce_with_logits(logits, obj_t).sum()
    l1 = (F.absolute(reg - reg_t) * mask).sum()
    return (bce + l1) * (1.0 / npos)


def _iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    iw = np.clip(np.minimum(x2[:, None], x2[None]) - np.maximum(x1[:, None], x1[None]), 0.0, None)
    ih = np.clip(np.minimum(y2[:, None], y2[None]) - np.maximum(y1[:, None], y1[None]), 0.0, None)
    inter = iw * ih
    area = boxes[:, 2] * boxes[:, 3]
    return inter / (area[:, None] + area[None] - inter)


def decode(pred: np.ndarray, stride: int = STRIDE, nms_iou: float = 0.5, min_score: float = 0.0):
    """Per image: NMS-filtered list of (box, score) from raw head output [N, 5, h, w]."""
    n, _, gh, gw = pred.shape
    logits = pred[:, 0].reshape(n, -1)
    scores = np.exp(-np.logaddexp(0.0, -logits))
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    out = []
    for b in range(n):
        w = np.exp(np.clip(pred[b, 3], -6.0, 6.0)) * stride
        h = np.exp(np.clip(pred[b, 4], -6.0, 6.0)) * stride
        cx = (jj + pred[b, 1]) * stride
        cy = (ii + pred[b, 2]) * stride
        boxes = np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1).reshape(-1, 4)
        s = scores[b]
        order = np.argsort(-s, kind="stable")
        order = order[s[order] >= min_score]
        boxes, s = boxes[order], s[order]
        overlap = _iou_matrix(boxes)
        alive = np.ones(len(s), dtype=bool)
        kept = []
        for i in range(len(s)):
            if not alive[i]:
                continue
            kept.append((tuple(float(v) for v in boxes[i]), float(s[i])))
            alive &= overlap[i] < nms_iou
        out.append(kept)
    return out

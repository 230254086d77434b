"""Boxes, anchor grids, IoU, ground-truth matching, and delta coding."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class GeometryError(Exception):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise GeometryError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Anchor:
    box: Box
    grid_y: int
    grid_x: int
    anchor_index: int


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


class ProposalLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def generate_anchors(feat_h: int, feat_w: int, stride: int,
                     scales: Sequence[float], aspect: float = 1.0) -> list[Anchor]:
    """Square-rooted aspect anchors centered at (grid + 0.5) * stride,
    ordered row-major with anchor_index fastest."""
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    anchors = []
    for gy in range(feat_h):
        cy = (gy + 0.5) * stride
        for gx in range(feat_w):
            cx = (gx + 0.5) * stride
            for ai, s in enumerate(scales):
                w = s * np.sqrt(aspect)
                h = s / np.sqrt(aspect)
                anchors.append(Anchor(
                    Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2),
                    grid_y=gy, grid_x=gx, anchor_index=ai))
    return anchors


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(np.array([a.as_array()]), np.array([b.as_array()]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) against (M, 4) corner-form boxes."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_anchors(anchors: Sequence[Anchor], gt: Sequence[Box],
                  pos_thresh: float = 0.7, neg_thresh: float = 0.3
                  ) -> list[tuple[ProposalLabel, Optional[int]]]:
    """Label each anchor positive / negative / ignore against ground truth.

    Positive when max-IoU >= pos_thresh, or when the anchor is (within 1e-9
    of) the best anchor for some gt box, so every annotated object owns at
    least one positive. Negative when max-IoU < neg_thresh. With no gt,
    everything is negative.
    """
    if pos_thresh <= neg_thresh:
        raise GeometryError("pos_thresh must exceed neg_thresh")
    if not gt:
        return [(ProposalLabel.NEGATIVE, None) for _ in anchors]
    a = boxes_to_array([an.box for an in anchors])
    g = boxes_to_array(list(gt))
    m = iou_matrix(a, g)
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(len(anchors)), best_gt]
    labels = np.where(best_iou >= pos_thresh, 0,
                      np.where(best_iou < neg_thresh, 1, 2))  # 0 pos, 1 neg, 2 ignore
    # force the argmax anchor(s) of each gt positive
    gt_best = m.max(axis=0)
    for j in range(len(gt)):
        if gt_best[j] <= 0:
            continue
        forced = np.nonzero(m[:, j] >= gt_best[j] - 1e-9)[0]
        labels[forced] = 0
        best_gt[forced] = j
    out = []
    for i in range(len(anchors)):
        if labels[i] == 0:
            out.append((ProposalLabel.POSITIVE, int(best_gt[i])))
        elif labels[i] == 1:
            out.append((ProposalLabel.NEGATIVE, None))
        else:
            out.append((ProposalLabel.IGNORE, None))
    return out


def encode_delta(anchor: Box, gt: Box) -> BoxDelta:
    if gt.width <= 0 or gt.height <= 0:
        raise GeometryError(f"ground-truth box has non-positive extent: {gt}")
    if anchor.width <= 0 or anchor.height <= 0:
        raise GeometryError(f"anchor has non-positive extent: {anchor}")
    ax, ay = (anchor.x1 + anchor.x2) / 2, (anchor.y1 + anchor.y2) / 2
    gx, gy = (gt.x1 + gt.x2) / 2, (gt.y1 + gt.y2) / 2
    return BoxDelta(
        dx=(gx - ax) / anchor.width,
        dy=(gy - ay) / anchor.height,
        dw=float(np.log(gt.width / anchor.width)),
        dh=float(np.log(gt.height / anchor.height)),
    )


def decode_delta(anchor: Box, d: BoxDelta) -> Box:
    ax, ay = (anchor.x1 + anchor.x2) / 2, (anchor.y1 + anchor.y2) / 2
    cx = ax + d.dx * anchor.width
    cy = ay + d.dy * anchor.height
    w = anchor.width * float(np.exp(d.dw))
    h = anchor.height * float(np.exp(d.dh))
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def decode_deltas_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode: anchors (N, 4) corner form, deltas (N, 4)."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2
    ay = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)

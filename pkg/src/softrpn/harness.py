"""Training loop, proposal-AP evaluation, false-negative audit scoring,
and the attention-threshold ablation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import model as mdl
from .autograd import Tensor
from .data import ImageRecord
from .geometry import (Anchor, Box, ProposalLabel, boxes_to_array,
                       decode_deltas_array, encode_delta, generate_anchors,
                       iou_matrix)


class DivergenceError(Exception):
    def __init__(self, iteration: int):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    """Every tunable of a run; serializable, and sufficient (with the seeds)
    to reproduce a run exactly."""
    t: float = 0.8
    d_embed: int = 32
    n_anchors: int = 3
    mode: str = "soft_label"           # "baseline" | "soft_label"
    lr: float = 0.02 * 4 / 48          # reference LR scaled linearly to batch 4
    momentum: float = 0.9
    total_iters: int = 1000
    milestones: tuple[int, ...] = (500, 800)
    lr_decay: float = 0.1
    batch_images: int = 4
    minibatch_size: int = 64
    pos_fraction: float = 0.25
    drop_rate: float = 0.3
    image_size: int = 64
    n_images: int = 200
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_aspect: float = 1.0
    stride: int = 8
    pos_thresh: float = 0.7
    neg_thresh: float = 0.3
    nms_iou: float = 0.7
    top_k: int = 50
    seed_data: int = 0
    seed_init: int = 0
    seed_sample: int = 0

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"t must lie in (0, 1), got {self.t}")
        if self.mode not in ("baseline", "soft_label"):
            raise ValueError(f"unknown mode {self.mode!r}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or (ms and ms[-1] >= self.total_iters):
            raise ValueError("milestones must be strictly increasing and < total_iters")
        if len(self.anchor_scales) != self.n_anchors:
            raise ValueError("anchor_scales must have n_anchors entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["anchor_scales"] = list(self.anchor_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        if "anchor_scales" in d:
            d["anchor_scales"] = tuple(d["anchor_scales"])
        return cls(**d)


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    ap: float
    recall50: float
    fn_precision: Optional[float] = None
    fn_recall: Optional[float] = None
    fn_vacuous: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MatchedImage:
    """Static per-image matching state, computed once before training."""
    record: ImageRecord
    labels: np.ndarray          # 1 pos, 0 neg, -1 ignore
    delta_targets: np.ndarray   # (N, 4); rows valid only where labels == 1


def anchors_for(config: TrainConfig) -> list[Anchor]:
    fh = config.image_size // config.stride
    return generate_anchors(fh, fh, config.stride, config.anchor_scales,
                            config.anchor_aspect)


def match_dataset(records: Sequence[ImageRecord], anchors: Sequence[Anchor],
                  config: TrainConfig) -> list[MatchedImage]:
    from .geometry import match_anchors
    out = []
    for rec in records:
        matches = match_anchors(anchors, rec.kept, config.pos_thresh, config.neg_thresh)
        labels = np.full(len(anchors), 0, dtype=np.int64)
        targets = np.zeros((len(anchors), 4))
        for i, (lab, gi) in enumerate(matches):
            if lab is ProposalLabel.POSITIVE:
                labels[i] = 1
                targets[i] = encode_delta(anchors[i].box, rec.kept[gi]).as_array()
            elif lab is ProposalLabel.IGNORE:
                labels[i] = -1
        out.append(MatchedImage(record=rec, labels=labels, delta_targets=targets))
    return out


def _image_loss(params: dict[str, Tensor], mi: MatchedImage, config: TrainConfig,
                rng: np.random.Generator) -> mdl.RpnLosses:
    """Forward one image, sample a proposal minibatch, and build the loss."""
    batch = mdl.forward_rpn(Tensor(mi.record.image), params,
                            config.n_anchors, config.d_embed)
    pos_idx, neg_idx = mdl.sample_proposals(mi.labels, config.minibatch_size,
                                            config.pos_fraction, rng)
    pos_p = ag.gather_rows(batch.probs, pos_idx)
    neg_p = ag.gather_rows(batch.probs, neg_idx)
    pos_d = ag.gather_rows(batch.deltas, pos_idx)
    amap = None
    # A single positive makes every attention row max exactly 1 (softmax of
    # one logit), which would flag all negatives at any threshold below 1;
    # skip the attention path until at least two positives are sampled.
    if config.mode == "soft_label" and len(pos_idx) >= 2 and len(neg_idx):
        amap = mdl.attention_map(ag.gather_rows(batch.embeddings, neg_idx),
                                 ag.gather_rows(batch.embeddings, pos_idx))
    return mdl.soft_label_loss(pos_p, neg_p, pos_d,
                               mi.delta_targets[pos_idx], amap, config.t)


def train(config: TrainConfig, records: Sequence[ImageRecord]
          ) -> tuple[dict[str, Tensor], list[dict]]:
    """SGD with momentum over per-image sampled RPN losses. Returns the
    final parameters and a per-iteration metric log."""
    if not records:
        raise ValueError("dataset is empty")
    anchors = anchors_for(config)
    matched = match_dataset(records, anchors, config)
    params = mdl.init_params(config.d_embed, config.n_anchors,
                             np.random.default_rng(config.seed_init))
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    rng = np.random.default_rng(config.seed_sample)
    log: list[dict] = []
    lr = config.lr
    for it in range(config.total_iters):
        if it in config.milestones:
            lr *= config.lr_decay
        for p in params.values():
            p.zero_grad()
        picks = rng.integers(0, len(matched), size=config.batch_images)
        sums = {"l_pos": 0.0, "l_neg": 0.0, "l_reg": 0.0, "total": 0.0}
        n_flagged = 0
        for k in picks:
            losses = _image_loss(params, matched[k], config, rng)
            ag.scale(losses.total, 1.0 / config.batch_images).backward()
            sums["l_pos"] += losses.l_pos.item()
            sums["l_neg"] += losses.l_neg.item()
            sums["l_reg"] += losses.l_reg.item()
            sums["total"] += losses.total.item()
            n_flagged += len(losses.flagged)
        means = {k: v / config.batch_images for k, v in sums.items()}
        if not math.isfinite(means["total"]):
            raise DivergenceError(it)
        for k, p in params.items():
            if p.grad is not None:
                velocity[k] = config.momentum * velocity[k] + p.grad
                p.data -= lr * velocity[k]
        log.append({"iter": it, "lr": lr, "flagged": n_flagged, **means})
    return params, log


# -- inference / evaluation ----------------------------------------------------

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy suppression by descending score; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        ious = iou_matrix(boxes[i:i + 1], boxes)[0]
        suppressed |= ious > iou_thresh
    return np.array(keep, dtype=np.intp)


def predict(params: dict[str, Tensor], record: ImageRecord, config: TrainConfig
            ) -> tuple[np.ndarray, np.ndarray]:
    """Decoded, suppressed, top-k proposals: (boxes (M, 4), scores (M,))."""
    anchors = boxes_to_array([a.box for a in anchors_for(config)])
    with ag.no_grad():
        batch = mdl.forward_rpn(Tensor(record.image), params,
                                config.n_anchors, config.d_embed)
    boxes = decode_deltas_array(anchors, batch.deltas.data)
    size = float(config.image_size)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0.0, size)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0.0, size)
    scores = batch.probs.data
    keep = nms(boxes, scores, config.nms_iou)[:config.top_k]
    return boxes[keep], scores[keep]


def average_precision(detections: Sequence[tuple[int, float, np.ndarray]],
                      gt_boxes: dict[int, np.ndarray], iou_thresh: float) -> float:
    """Single-class AP: detections are (image_id, score, box corner-form),
    ranked globally by score, greedily matched (each gt at most once) at the
    given IoU threshold, integrated with all-points interpolation."""
    n_gt = sum(len(b) for b in gt_boxes.values())
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], detections[i][0], i))
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        gts = gt_boxes.get(img)
        if gts is None or not len(gts):
            continue
        ious = iou_matrix(box[None, :], gts)[0]
        ious[matched[img]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            matched[img][j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # precision envelope, then sum area over recall increments
    ap = 0.0
    best = 0.0
    prev_recall = recall[-1] if len(recall) else 0.0
    for k in range(len(order) - 1, -1, -1):
        best = max(best, precision[k])
        r_prev = recall[k - 1] if k > 0 else 0.0
        ap += (recall[k] - r_prev) * best
    return float(ap)


COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 1.00, 0.05), 2))


def evaluate(params: dict[str, Tensor], records: Sequence[ImageRecord],
             config: TrainConfig) -> EvalReport:
    """Score proposals single-class against the full (undropped) ground
    truth: COCO-convention AP plus proposal recall at IoU 0.5."""
    detections = []
    gt_boxes = {}
    for idx, rec in enumerate(records):
        boxes, scores = predict(params, rec, config)
        for b, s in zip(boxes, scores):
            detections.append((idx, float(s), b))
        gt_boxes[idx] = boxes_to_array(rec.full)
    aps = {thr: average_precision(detections, gt_boxes, thr)
           for thr in COCO_IOU_THRESHOLDS}
    n_gt = sum(len(b) for b in gt_boxes.values())
    n_hit = 0
    for idx, rec in enumerate(records):
        gts = gt_boxes[idx]
        if not len(gts):
            continue
        dets = np.array([d[2] for d in detections if d[0] == idx])
        if len(dets):
            n_hit += int((iou_matrix(gts, dets).max(axis=1) >= 0.5).sum())
    return EvalReport(
        ap50=aps[0.5], ap75=aps[0.75],
        ap=float(np.mean([aps[t] for t in COCO_IOU_THRESHOLDS])),
        recall50=(n_hit / n_gt) if n_gt else 0.0,
    )


# -- false-negative audit -------------------------------------------------------

@dataclass
class Flag:
    image_index: int
    anchor_index: int
    box: Box
    score: float


def audit_flags(params: dict[str, Tensor], records: Sequence[ImageRecord],
                config: TrainConfig, t: Optional[float] = None) -> list[Flag]:
    """Flag suspected false negatives per image with the same minibatch
    sampling protocol as training (the row-softmax scale depends on how many
    positives enter the attention map, so the audit must mirror training)."""
    t = config.t if t is None else t
    anchors = anchors_for(config)
    matched = match_dataset(records, anchors, config)
    flags: list[Flag] = []
    for idx, mi in enumerate(matched):
        rng = np.random.default_rng([config.seed_sample, idx, 0xA0D17])
        with ag.no_grad():
            batch = mdl.forward_rpn(Tensor(mi.record.image), params,
                                    config.n_anchors, config.d_embed)
            pos_idx, neg_idx = mdl.sample_proposals(
                mi.labels, config.minibatch_size, config.pos_fraction, rng)
            if len(pos_idx) < 2 or not len(neg_idx):
                continue
            amap = mdl.attention_map(ag.gather_rows(batch.embeddings, neg_idx),
                                     ag.gather_rows(batch.embeddings, pos_idx))
        for i in sorted(mdl.detect_false_negatives(amap, t)):
            ai = int(neg_idx[i])
            flags.append(Flag(image_index=idx, anchor_index=ai,
                              box=anchors[ai].box, score=float(amap.row_max[i])))
    flags.sort(key=lambda f: -f.score)
    return flags


@dataclass
class FnScore:
    precision: float
    recall: float
    vacuous: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def score_fn_detection(flags: Sequence[Flag], records: Sequence[ImageRecord]
                       ) -> FnScore:
    """Precision/recall of flagged anchors against withheld (dropped) boxes:
    a flag is a true positive when it has IoU >= 0.5 with some dropped box of
    its image. With no dropped boxes anywhere recall is vacuous, reported as
    1 with the vacuous marker; precision is then 0 if anything was flagged."""
    dropped = {i: boxes_to_array(rec.dropped) for i, rec in enumerate(records)}
    n_dropped = sum(len(b) for b in dropped.values())
    if n_dropped == 0:
        return FnScore(precision=0.0 if flags else 1.0, recall=1.0, vacuous=True)
    if not flags:
        return FnScore(precision=1.0, recall=0.0)
    tp = 0
    hit = {i: np.zeros(len(b), dtype=bool) for i, b in dropped.items()}
    for f in flags:
        boxes = dropped.get(f.image_index)
        if boxes is None or not len(boxes):
            continue
        ious = iou_matrix(np.array([f.box.as_array()]), boxes)[0]
        if ious.max() >= 0.5:
            tp += 1
            hit[f.image_index] |= ious >= 0.5
    return FnScore(precision=tp / len(flags),
                   recall=sum(int(h.sum()) for h in hit.values()) / n_dropped)


def expected_random_recall(flags: Sequence[Flag], records: Sequence[ImageRecord],
                           config: TrainConfig) -> float:
    """Expected dropped-box recall of a size-matched uniformly random anchor
    flag set, computed in closed form per image from the hypergeometric
    no-hit probability."""
    anchors = boxes_to_array([a.box for a in anchors_for(config)])
    n = len(anchors)
    counts: dict[int, int] = {}
    for f in flags:
        counts[f.image_index] = counts.get(f.image_index, 0) + 1
    total = 0
    expected = 0.0
    for idx, rec in enumerate(records):
        if not rec.dropped:
            continue
        m = min(counts.get(idx, 0), n)
        covers = (iou_matrix(boxes_to_array(rec.dropped), anchors) >= 0.5).sum(axis=1)
        for c in covers:
            total += 1
            if m == 0 or c == 0:
                continue
            if n - int(c) < m:
                expected += 1.0
            else:
                expected += 1.0 - math.comb(n - int(c), m) / math.comb(n, m)
    return expected / total if total else 0.0


# -- ablation -------------------------------------------------------------------

def ablate_threshold(config: TrainConfig, records: Sequence[ImageRecord],
                     thresholds: Sequence[float]) -> list[dict]:
    """Train + evaluate once per threshold with identical seeds; returns
    one table row per threshold."""
    rows = []
    for t in thresholds:
        cfg = TrainConfig.from_dict({**config.to_dict(), "t": t, "mode": "soft_label"})
        params, _ = train(cfg, records)
        report = evaluate(params, records, cfg)
        flags = audit_flags(params, records, cfg)
        fn = score_fn_detection(flags, records)
        report.fn_precision = fn.precision
        report.fn_recall = fn.recall
        report.fn_vacuous = fn.vacuous
        rows.append({"t": t, **report.to_dict()})
    return rows


def format_ablation_table(rows: Sequence[dict]) -> str:
    cols = ["t", "ap50", "ap75", "ap", "recall50", "fn_precision", "fn_recall"]
    header = "  ".join(f"{c:>12}" for c in cols)
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append("  ".join(
            f"{r[c]:>12.4f}" if isinstance(r[c], float) else f"{r[c]!s:>12}"
            for c in cols))
    return "\n".join(lines)


def write_metric_log(path, log: Sequence[dict]):
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")

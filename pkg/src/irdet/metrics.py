"""Detection quality metrics: matching, precision/recall/F1, and AP.

Matching is greedy: detections are visited by descending score and each
claims the unmatched same-class ground-truth box with the highest IoU at or
above the threshold.  AP integrates the all-point precision-recall curve
after enforcing a monotone (non-increasing) precision envelope.

Conventions for the degenerate cases: precision is 0 when there are no
detections, recall is 0 when there are no ground truths, and F1 is 0 when
precision + recall is 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .boxes import iou
from .errors import InvalidArgumentError

MATCH_IOU = 0.5


@dataclass
class MatchResult:
    """Outcome of matching one image set at a fixed threshold."""

    tp: int
    fp: int
    fn: int
    # (image_idx, det_idx, gt_idx, iou) per true positive, det indices refer
    # to the order detections were supplied in.
    pairs: list = field(default_factory=list)


def match_detections(detections, gts, iou_thresh=MATCH_IOU) -> MatchResult:
    """Match one image's detections against its ground truths.

    ``detections`` is a list of Detection; ``gts`` a list of (BBox, class).
    """
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].class_id, detections[i].box.cx, i),
    )
    taken = [False] * len(gts)
    pairs = []
    fp = 0
    for di in order:
        det = detections[di]
        best_j = -1
        best_iou = iou_thresh
        for j, (gbox, gcls) in enumerate(gts):
            if taken[j] or gcls != det.class_id:
                continue
            v = iou(det.box, gbox)
            if v > best_iou or (v == best_iou and v > 0 and best_j < 0):
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            pairs.append((0, di, best_j, best_iou))
        else:
            fp += 1
    tp = len(pairs)
    return MatchResult(tp=tp, fp=fp, fn=len(gts) - tp, pairs=pairs)


def precision_recall(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def average_precision(scored_flags, total_gt):
    """All-point AP from (score, is_tp) pairs against ``total_gt`` positives.

    Returns (ap, curve) where curve is the list of (recall, precision)
    points in score order before the envelope is applied.
    """
    if total_gt == 0:
        return 0.0, []
    ranked = sorted(scored_flags, key=lambda t: -t[0])
    curve = []
    tp = fp = 0
    for score, is_tp in ranked:
        if is_tp:
            tp += 1
        else:
            fp += 1
        curve.append((tp / total_gt, tp / (tp + fp)))
    # Monotone envelope: precision at recall r becomes the max precision at
    # any recall >= r; integrate the resulting step function.
    env = []
    best = 0.0
    for r, p in reversed(curve):
        best = max(best, p)
        env.append((r, best))
    env.reverse()
    ap = 0.0
    prev_r = 0.0
    for r, p in env:
        ap += (r - prev_r) * p
        prev_r = r
    return ap, curve


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    ap50: float
    tp: int
    fp: int
    fn: int
    pr_curve: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "precision": round(self.precision, 6),
                "recall": round(self.recall, 6),
                "f1": round(self.f1, 6),
                "ap50": round(self.ap50, 6),
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
            }
        )


def evaluate(per_image_dets, per_image_gts, iou_thresh=MATCH_IOU, conf_thresh=0.25) -> EvalReport:
    """Dataset evaluation.

    AP uses every supplied detection; the point metrics (precision, recall,
    F1) are computed on the subset scoring at least ``conf_thresh``, which
    corresponds to the deployment operating point.
    """
    if len(per_image_dets) != len(per_image_gts):
        raise InvalidArgumentError(
            f"got {len(per_image_dets)} detection lists for {len(per_image_gts)} images"
        )
    total_gt = sum(len(g) for g in per_image_gts)

    scored = []
    for dets, gts in zip(per_image_dets, per_image_gts):
        m = match_detections(dets, gts, iou_thresh)
        matched = {di for _, di, _, _ in m.pairs}
        for di, d in enumerate(dets):
            scored.append((d.score, di in matched))
    ap, curve = average_precision(scored, total_gt)

    tp = fp = fn = 0
    for dets, gts in zip(per_image_dets, per_image_gts):
        strong = [d for d in dets if d.score >= conf_thresh]
        m = match_detections(strong, gts, iou_thresh)
        tp += m.tp
        fp += m.fp
        fn += m.fn
    precision, recall = precision_recall(tp, fp, fn)
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        ap50=ap,
        tp=tp,
        fp=fp,
        fn=fn,
        pr_curve=curve,
    )

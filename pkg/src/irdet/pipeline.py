"""Target assignment, the composite training loss, decoding, and NMS.

Cell parameterization: a head at stride ``s`` divides the image into
``s``-pixel cells.  A cell (gx, gy) decodes its prediction as

    cx = (gx + 2 * sigmoid(tx) - 0.5) * s      w = s * exp(min(tw, 8))
    cy = (gy + 2 * sigmoid(ty) - 0.5) * s      h = s * exp(min(th, 8))

The (-0.5, 1.5) offset range lets a cell place the center up to half a
cell outside itself, so the neighbors of a target's center cell can
regress it too; the exp clamp bounds decoded extents.

Head selection: each target goes to the single coarsest head whose stride
``s`` satisfies max(w, h) / s >= 2 (the box spans at least two cells); if
no head qualifies the finest active head takes it.  Within that head the
target claims its center cell plus the horizontal and vertical neighbors
nearest the center's cell fraction.  When several targets claim one cell
the largest box wins; a target left with no cells is dropped for the
image (reported in the assignment).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import BBox, LossKind, box_loss_graph, iou
from .errors import InvalidArgumentError

EXP_CLAMP = 8.0
DEFAULT_CONF_THRESH = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 < self.score <= 1.0):
            raise InvalidArgumentError(f"detection score must be in (0, 1], got {self.score}")
        if self.class_id < 0:
            raise InvalidArgumentError(f"class_id must be non-negative, got {self.class_id}")


@dataclass
class LossConfig:
    kind: LossKind = field(default_factory=LossKind)
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 0.5

    def validate(self):
        for name in ("lambda_box", "lambda_obj", "lambda_cls"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.lambda_box == self.lambda_obj == self.lambda_cls == 0:
            raise InvalidArgumentError("at least one loss weight must be positive")
        return self


@dataclass
class Assignment:
    """Per-head mapping cell -> (box, class); one image."""

    cells: dict  # head -> {(gy, gx): (BBox, class_id)}
    dropped: list  # (BBox, class_id) entries that won no cell


def head_grid_map(head_strides, image_hw):
    """{head: (stride, grid_h, grid_w)} for an image size."""
    h, w = image_hw
    out = {}
    for head, s in head_strides.items():
        if h % s or w % s:
            raise InvalidArgumentError(f"image {h}x{w} not divisible by stride {s} of {head}")
        out[head] = (s, h // s, w // s)
    return out


def select_head(box: BBox, head_grids):
    """Coarsest head whose cells the box spans at least twice over."""
    best = None
    for head, (s, _, _) in head_grids.items():
        if max(box.w, box.h) / s >= 2.0:
            if best is None or s > head_grids[best][0]:
                best = head
    if best is None:
        best = min(head_grids, key=lambda h: head_grids[h][0])
    return best


def assign_targets(gt, head_grids) -> Assignment:
    """Place each (BBox, class_id) into cells of one head.

    A target claims its center cell and the two in-bounds neighbors
    nearest its cell fraction; the largest claimant wins each cell.
    """
    cells = {head: {} for head in head_grids}
    owners = {}  # (head, cell) -> index into gt, kept in step with cells
    for idx, (box, cls) in enumerate(gt):
        head = select_head(box, head_grids)
        s, gh, gw = head_grids[head]
        gx = int(box.cx // s)
        gy = int(box.cy // s)
        if not (0 <= gx < gw and 0 <= gy < gh):
            raise InvalidArgumentError(
                f"target center ({box.cx}, {box.cy}) outside the {head} grid {gw}x{gh}"
            )
        nx = gx - 1 if box.cx / s - gx < 0.5 else gx + 1
        ny = gy - 1 if box.cy / s - gy < 0.5 else gy + 1
        for key in ((gy, gx), (gy, nx), (ny, gx)):
            if not (0 <= key[1] < gw and 0 <= key[0] < gh):
                continue
            held = cells[head].get(key)
            if held is None or box.area > held[0].area:
                cells[head][key] = (box, cls)
                owners[(head, key)] = idx
    won = set(owners.values())
    dropped = [pair for i, pair in enumerate(gt) if i not in won]
    return Assignment(cells=cells, dropped=dropped)


def encode_box(box: BBox, stride):
    """Inverse of the decode transform at the box's center cell.

    The center cell sees fractions in [0, 1), which the offset transform
    maps to sigmoid values in [0.25, 0.75), so the logit is always finite
    and the round trip is exact to float precision.
    """
    gx = int(box.cx // stride)
    gy = int(box.cy // stride)
    sx = (box.cx / stride - gx + 0.5) / 2.0
    sy = (box.cy / stride - gy + 0.5) / 2.0
    tx = float(np.log(sx / (1.0 - sx)))
    ty = float(np.log(sy / (1.0 - sy)))
    if box.w <= 0 or box.h <= 0:
        raise InvalidArgumentError("encode_box requires positive extents")
    tw = float(np.log(box.w / stride))
    th = float(np.log(box.h / stride))
    return gx, gy, tx, ty, tw, th


def _bce_with_logits(z, target):
    """Numerically stable binary cross entropy: softplus(z) - z * t."""
    return ag.softplus(z) - z * target


def total_loss(head_outputs, assignments, cfg: LossConfig, head_grids):
    """Composite detection loss over a batch.

    Returns (scalar Tensor, breakdown dict).  The box term averages
    1 - similarity over all assigned cells, objectness is mean BCE over
    every cell of every head, and classification is mean BCE over the class
    logits of assigned cells only.
    """
    cfg.validate()
    batch = len(assignments)
    obj_terms = []
    total_cells = 0
    box_terms = []
    cls_terms = []
    n_box = 0
    n_cls = 0

    for head, out in head_outputs.items():
        n, ch, gh, gw = out.data.shape
        if n != batch:
            raise InvalidArgumentError(f"{head} batch {n} != assignments {batch}")
        s, egh, egw = head_grids[head]
        if (gh, gw) != (egh, egw):
            raise InvalidArgumentError(f"{head} grid {gh}x{gw} does not match expected {egh}x{egw}")
        nc = ch - 5

        ns, ys, xs, boxes, classes = [], [], [], [], []
        for i, asg in enumerate(assignments):
            for (gy, gx), (box, cls) in sorted(asg.cells.get(head, {}).items()):
                ns.append(i)
                ys.append(gy)
                xs.append(gx)
                boxes.append(box)
                classes.append(cls)

        obj_target = np.zeros((n, 1, gh, gw), dtype=np.float32)
        if ns:
            obj_target[ns, 0, ys, xs] = 1.0
        obj_logits = ag.narrow(out, 1, 4, 1)
        obj_terms.append(ag.tsum(_bce_with_logits(obj_logits, obj_target)))
        total_cells += n * gh * gw

        if ns:
            rows = ag.gather_cells(out, ns, ys, xs)  # [K, 5+nc]
            tx = ag.narrow(rows, 1, 0, 1)
            ty = ag.narrow(rows, 1, 1, 1)
            tw = ag.narrow(rows, 1, 2, 1)
            th = ag.narrow(rows, 1, 3, 1)
            gx_arr = np.array(xs, dtype=np.float32).reshape(-1, 1)
            gy_arr = np.array(ys, dtype=np.float32).reshape(-1, 1)
            pcx = (ag.sigmoid(tx) * 2.0 + (gx_arr - 0.5)) * float(s)
            pcy = (ag.sigmoid(ty) * 2.0 + (gy_arr - 0.5)) * float(s)
            pw = ag.exp(ag.clamp_max(tw, EXP_CLAMP)) * float(s)
            ph = ag.exp(ag.clamp_max(th, EXP_CLAMP)) * float(s)
            gt_cx = np.array([b.cx for b in boxes], dtype=np.float32).reshape(-1, 1)
            gt_cy = np.array([b.cy for b in boxes], dtype=np.float32).reshape(-1, 1)
            gt_w = np.array([b.w for b in boxes], dtype=np.float32).reshape(-1, 1)
            gt_h = np.array([b.h for b in boxes], dtype=np.float32).reshape(-1, 1)
            per_box = box_loss_graph(
                (pcx, pcy, pw, ph),
                (Tensor(gt_cx), Tensor(gt_cy), Tensor(gt_w), Tensor(gt_h)),
                cfg.kind,
            )
            box_terms.append(ag.tsum(per_box))
            n_box += len(ns)

            if nc > 0:
                cls_logits = ag.narrow(rows, 1, 5, nc)
                onehot = np.zeros((len(ns), nc), dtype=np.float32)
                onehot[np.arange(len(ns)), classes] = 1.0
                cls_terms.append(ag.tsum(_bce_with_logits(cls_logits, onehot)))
                n_cls += len(ns) * nc

    obj_loss = sum(obj_terms[1:], obj_terms[0]) * (1.0 / total_cells)
    loss = obj_loss * cfg.lambda_obj
    breakdown = {"obj": obj_loss.data.item()}
    if box_terms:
        box_loss = sum(box_terms[1:], box_terms[0]) * (1.0 / n_box)
        loss = loss + box_loss * cfg.lambda_box
        breakdown["box"] = box_loss.data.item()
    else:
        breakdown["box"] = 0.0
    if cls_terms:
        cls_loss = sum(cls_terms[1:], cls_terms[0]) * (1.0 / n_cls)
        loss = loss + cls_loss * cfg.lambda_cls
        breakdown["cls"] = cls_loss.data.item()
    else:
        breakdown["cls"] = 0.0
    breakdown["total"] = loss.data.item()
    return loss, breakdown


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode(head_outputs, conf_thresh, head_grids, max_det=None):
    """Raw maps -> per-image Detection lists (no NMS).

    Score is sigmoid(obj) * max class probability; cells scoring below
    ``conf_thresh`` are dropped.  With ``max_det`` set, only the top-scoring
    detections per image survive (ties broken by class then position for
    determinism).
    """
    per_image = None
    for head, out in head_outputs.items():
        arr = out.data if isinstance(out, Tensor) else np.asarray(out)
        n, ch, gh, gw = arr.shape
        s, _, _ = head_grids[head]
        if per_image is None:
            per_image = [[] for _ in range(n)]
        obj = _sigmoid_np(arr[:, 4])
        cls_prob = _sigmoid_np(arr[:, 5:])
        best_cls = cls_prob.argmax(axis=1)
        score = obj * np.take_along_axis(cls_prob, best_cls[:, None], axis=1)[:, 0]
        keep = score >= conf_thresh
        for i in range(n):
            ys, xs = np.nonzero(keep[i])
            if ys.size == 0:
                continue
            tx = _sigmoid_np(arr[i, 0, ys, xs])
            ty = _sigmoid_np(arr[i, 1, ys, xs])
            w = np.exp(np.minimum(arr[i, 2, ys, xs], EXP_CLAMP)) * s
            h = np.exp(np.minimum(arr[i, 3, ys, xs], EXP_CLAMP)) * s
            cx = (xs + 2.0 * tx - 0.5) * s
            cy = (ys + 2.0 * ty - 0.5) * s
            for j in range(ys.size):
                per_image[i].append(
                    Detection(
                        BBox(float(cx[j]), float(cy[j]), float(w[j]), float(h[j])),
                        int(best_cls[i, ys[j], xs[j]]),
                        float(score[i, ys[j], xs[j]]),
                    )
                )
    if per_image is None:
        return []
    for i, dets in enumerate(per_image):
        dets.sort(key=lambda d: (-d.score, d.class_id, d.box.cx, d.box.cy))
        if max_det is not None:
            per_image[i] = dets[:max_det]
    return per_image


def nms(detections, iou_thresh=DEFAULT_NMS_IOU):
    """Greedy per-class suppression.

    Candidates are visited by descending score (ties: lower class id, then
    lower cx) and each survivor suppresses same-class boxes overlapping it
    above ``iou_thresh``.
    """
    ordered = sorted(detections, key=lambda d: (-d.score, d.class_id, d.box.cx, d.box.cy))
    kept = []
    for det in ordered:
        if any(k.class_id == det.class_id and iou(k.box, det.box) > iou_thresh for k in kept):
            continue
        kept.append(det)
    return kept


DETECTIONS_HEADER = ("image_id", "class_id", "score", "cx", "cy", "w", "h")


def write_detections_csv(path, rows):
    """rows: iterable of (image_id, Detection)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DETECTIONS_HEADER)
        for image_id, det in rows:
            w.writerow(
                [
                    image_id,
                    det.class_id,
                    f"{det.score:.6f}",
                    f"{det.box.cx:.4f}",
                    f"{det.box.cy:.4f}",
                    f"{det.box.w:.4f}",
                    f"{det.box.h:.4f}",
                ]
            )


def read_detections_csv(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != DETECTIONS_HEADER:
            raise InvalidArgumentError(f"unexpected detections header in {path}")
        for row in reader:
            out.append(
                (
                    row["image_id"],
                    Detection(
                        BBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"])),
                        int(row["class_id"]),
                        float(row["score"]),
                    ),
                )
            )
    return out

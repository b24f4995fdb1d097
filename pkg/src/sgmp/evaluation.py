"""Triplet-recall evaluation for PredCls, SGCls and SGGen, plus box utilities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .errors import EvaluationError, GeometryError
from .graph import Box, SceneGraphSample, VocabMeta
from .model import ModelParams, Prediction, forward

TASKS = ("predcls", "sgcls", "sggen")
TOP_PREDICATES = 5


# -- boxes --------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return 0.0 if union <= 0 else inter / union


def iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N,4) and (M,4) corner-form arrays."""
    a = boxes[:, None, :]
    b = others[None, :, :]
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_thresh: float = 0.3, max_keep: int = 50) -> list[int]:
    """Greedy NMS; equal scores are visited in index order."""
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    if not boxes:
        return []
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    overlap = iou_matrix(arr, arr)
    order = sorted(range(len(boxes)), key=lambda k: (-scores[k], k))
    alive = np.ones(len(boxes), dtype=bool)
    keep: list[int] = []
    for k in order:
        if len(keep) >= max_keep:
            break
        if not alive[k]:
            continue
        keep.append(k)
        alive &= ~(overlap[k] > iou_thresh)
    return keep


def decode_offsets(proposal: Box, t, bounds: tuple[float, float] | None = None) -> Box:
    """Inverse of ``encode_offsets``; optionally clip to ``(width, height)``."""
    pw, ph = proposal.width, proposal.height
    if not (pw > 0 and ph > 0):
        raise GeometryError(f"degenerate proposal {proposal.as_tuple()}")
    dx, dy, dw, dh = (float(v) for v in np.asarray(t, dtype=np.float64).reshape(4))
    cx = proposal.x1 + 0.5 * pw + dx * pw
    cy = proposal.y1 + 0.5 * ph + dy * ph
    try:
        w, h = pw * math.exp(dw), ph * math.exp(dh)
    except OverflowError as exc:
        raise GeometryError("decoded box size overflows") from exc
    x1, y1, x2, y2 = cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise GeometryError("decoded box is not finite")
    if bounds is not None:
        W, H = bounds
        x1, x2 = min(max(x1, 0.0), W), min(max(x2, 0.0), W)
        y1, y2 = min(max(y1, 0.0), H), min(max(y2, 0.0), H)
    return Box(x1, y1, x2, y2)


# -- triplets -----------------------------------------------------------------

@dataclass(frozen=True)
class TripletPrediction:
    subj: int
    pred: int
    obj: int
    score: float
    subj_box: Box
    obj_box: Box
    subj_class: int
    obj_class: int


def _argmax_from(row: np.ndarray, start: int) -> int:
    # np.argmax returns the first maximum, so ties go to the lower index
    return start + int(np.argmax(row[start:]))


def extract_triplets(
    pred: Prediction,
    boxes: Sequence[Box],
    task: str,
    k_cap: int | None = None,
    gt_classes: Sequence[int] | None = None,
    keep: Sequence[int] | None = None,
) -> list[TripletPrediction]:
    """Rank one triplet per ordered pair whose best predicate is not "none".

    PredCls takes classes from ``gt_classes`` and scores by the predicate
    probability alone; SGCls/SGGen use the argmax non-background class and
    multiply in both class probabilities.  ``keep`` restricts candidate nodes
    (SGGen passes the NMS survivors).  Ties are broken by ``(subj, obj)``.
    """
    if task not in TASKS:
        raise EvaluationError(f"unknown task {task!r}")
    cls_p = pred.class_probs.data
    rel_p = pred.pred_probs.data
    if task == "predcls":
        if gt_classes is None:
            raise EvaluationError("predcls needs ground-truth classes")
        classes = [int(c) for c in gt_classes]
    else:
        classes = [_argmax_from(row, 1) for row in cls_p]
    allowed = None if keep is None else set(keep)
    out = []
    for k, (i, j) in enumerate(pred.edges):
        if allowed is not None and (i not in allowed or j not in allowed):
            continue
        if task == "predcls" and (classes[i] < 1 or classes[j] < 1):
            continue
        p = int(np.argmax(rel_p[k]))
        if p == 0:
            continue
        score = float(rel_p[k, p])
        if task != "predcls":
            score = float(cls_p[i, classes[i]]) * score * float(cls_p[j, classes[j]])
        out.append(TripletPrediction(i, p, j, score, boxes[i], boxes[j], classes[i], classes[j]))
    out.sort(key=lambda t: (-t.score, t.subj, t.obj))
    return out if k_cap is None else out[:k_cap]


def gt_boxes(s: SceneGraphSample) -> list[Box | None]:
    """Ground-truth boxes recovered from proposals and regression targets."""
    return [decode_offsets(p, s.gt_offsets[k]) if s.gt_classes[k] > 0 else None
            for k, p in enumerate(s.proposals)]


def _matches(t: TripletPrediction, gt: tuple[int, int, int], s: SceneGraphSample, task: str,
             gtb: list[Box | None] | None) -> bool:
    i, p, j = gt
    if t.pred != p:
        return False
    if task == "sggen":
        if t.subj_class != s.gt_classes[i] or t.obj_class != s.gt_classes[j]:
            return False
        return iou(t.subj_box, gtb[i]) >= 0.5 and iou(t.obj_box, gtb[j]) >= 0.5
    if (t.subj, t.obj) != (i, j):
        return False
    if task == "sgcls":
        return t.subj_class == s.gt_classes[i] and t.obj_class == s.gt_classes[j]
    return True


def recall_at_k(triplets: Sequence[TripletPrediction], s: SceneGraphSample, k: int, task: str) -> float | None:
    """Fraction of ground-truth triplets hit by the top ``k``; ``None`` if there are none.

    Predictions are visited in rank order and each consumes at most one
    ground-truth triplet (the lowest-ordered unmatched one it satisfies).
    """
    gts = s.gt_triplets()
    if not gts:
        return None
    top = list(triplets[:k])
    if task in ("predcls", "sgcls"):
        index = {(i, j): n for n, (i, _, j) in enumerate(gts)}
        hit = set()
        for t in top:
            n = index.get((t.subj, t.obj))
            if n is not None and n not in hit and _matches(t, gts[n], s, task, None):
                hit.add(n)
        return len(hit) / len(gts)
    if task != "sggen":
        raise EvaluationError(f"unknown task {task!r}")
    gtb = gt_boxes(s)
    matched = np.zeros(len(gts), dtype=bool)
    for t in top:
        for n, gt in enumerate(gts):
            if not matched[n] and _matches(t, gt, s, task, gtb):
                matched[n] = True
                break
    return float(matched.sum()) / len(gts)


def per_predicate_recall5(pred: Prediction, s: SceneGraphSample) -> dict[int, tuple[int, int]]:
    """Per predicate: (hits, total) over labelled edges, hit = true predicate in top 5.

    Ranking is over the non-"none" predicates, ties broken by lower index.
    """
    rows = pred.edge_row()
    rel_p = pred.pred_probs.data
    out: dict[int, tuple[int, int]] = {}
    for pair, p in sorted(s.gt_predicates.items()):
        if p < 1:
            continue
        k = rows.get(pair)
        if k is None:
            raise EvaluationError(f"{s.image_id}: no prediction for labelled pair {pair}")
        row = rel_p[k]
        rank = int(np.sum(row[1:] > row[p])) + int(np.sum(row[1:p] == row[p]))
        hits, total = out.get(p, (0, 0))
        out[p] = (hits + (rank < TOP_PREDICATES), total + 1)
    return out


# -- dataset-level evaluation -------------------------------------------------

@dataclass
class EvalConfig:
    T: int = 2
    pooling_mode: str = "weighted"
    tasks: tuple[str, ...] = ("predcls",)
    ks: tuple[int, ...] = (50, 100)
    nms_iou: float = 0.3
    nms_max_keep: int = 50


@dataclass
class EvalReport:
    task: str
    r_at_50: float
    r_at_100: float
    per_predicate_recall5: dict[int, float] = field(default_factory=dict)
    per_predicate_counts: dict[int, int] = field(default_factory=dict)
    images_evaluated: int = 0
    images_skipped: int = 0

    def recall(self, k: int) -> float:
        return {50: self.r_at_50, 100: self.r_at_100}[k]


def image_triplets(pred: Prediction, s: SceneGraphSample, task: str, cfg: EvalConfig) -> list[TripletPrediction]:
    """Task pipeline for one image, ranked but not truncated."""
    if task == "predcls":
        return extract_triplets(pred, s.proposals, task, gt_classes=s.gt_classes)
    if task == "sgcls":
        return extract_triplets(pred, s.proposals, task)
    cls_p = pred.class_probs.data
    offs = pred.bbox_offsets.data
    classes = [_argmax_from(row, 1) for row in cls_p]
    bounds = (s.width, s.height)
    boxes = [decode_offsets(p, offs[k, classes[k]], bounds) for k, p in enumerate(s.proposals)]
    scores = [float(cls_p[k, classes[k]]) for k in range(len(classes))]
    keep = nms(boxes, scores, cfg.nms_iou, cfg.nms_max_keep)
    return extract_triplets(pred, boxes, task, keep=keep)


def evaluate(samples: Sequence[SceneGraphSample], params: ModelParams, cfg: EvalConfig) -> dict[str, EvalReport]:
    if not samples:
        raise EvaluationError("no images to evaluate")
    for task in cfg.tasks:
        if task not in TASKS:
            raise EvaluationError(f"unknown task {task!r}")
    sums = {task: {k: 0.0 for k in (50, 100)} for task in cfg.tasks}
    counted = 0
    skipped = 0
    pp_hits: dict[int, int] = {}
    pp_total: dict[int, int] = {}
    for s in sorted(samples, key=lambda x: x.image_id):
        try:
            with no_grad():
                pred = forward(s, params, cfg.T, cfg.pooling_mode)
            if not s.gt_triplets():
                skipped += 1
                continue
            counted += 1
            for task in cfg.tasks:
                ranked = image_triplets(pred, s, task, cfg)
                for k in (50, 100):
                    sums[task][k] += recall_at_k(ranked, s, k, task)
            if "predcls" in cfg.tasks:
                for p, (h, t) in per_predicate_recall5(pred, s).items():
                    pp_hits[p] = pp_hits.get(p, 0) + h
                    pp_total[p] = pp_total.get(p, 0) + t
        except (GeometryError, EvaluationError) as exc:
            raise EvaluationError(f"image {s.image_id}: {exc}") from exc
    reports = {}
    for task in cfg.tasks:
        r50 = sums[task][50] / counted if counted else 0.0
        r100 = sums[task][100] / counted if counted else 0.0
        rep = EvalReport(task, r50, r100, images_evaluated=counted, images_skipped=skipped)
        if task == "predcls":
            rep.per_predicate_recall5 = {p: pp_hits[p] / pp_total[p] for p in sorted(pp_total)}
            rep.per_predicate_counts = dict(sorted(pp_total.items()))
        reports[task] = rep
    return reports


def format_report(reports: dict[str, EvalReport], vocab: VocabMeta | None = None) -> str:
    """Fixed-order key/value text; per-predicate rows sorted by frequency."""
    lines = []
    for task in TASKS:
        rep = reports.get(task)
        if rep is None:
            continue
        lines += [
            f"[{task}]",
            f"task = {task}",
            f"r_at_50 = {rep.r_at_50:.6f}",
            f"r_at_100 = {rep.r_at_100:.6f}",
            f"images_evaluated = {rep.images_evaluated}",
            f"images_skipped = {rep.images_skipped}",
        ]
        order = sorted(rep.per_predicate_recall5, key=lambda p: (-rep.per_predicate_counts.get(p, 0), p))
        for p in order:
            name = vocab.predicate_names[p] if vocab is not None else str(p)
            lines.append(f"recall5.{name} = {rep.per_predicate_recall5[p]:.6f} "
                         f"(n={rep.per_predicate_counts.get(p, 0)})")
        lines.append("")
    return "\n".join(lines)

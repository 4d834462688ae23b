"""Detection evaluation: greedy matching, N-point interpolated AP and heading-weighted APH.

Difficulty follows the two-tier points-per-box convention: LEVEL 1 holds labels
with more than five points, LEVEL 2 every label with at least one point (so it
contains LEVEL 1). Labels with no points belong to neither.

Per (class, level) cell, detections are matched greedily against *all* labels
of the class in their scene. A detection matched to a label outside the level
is ignored (neither TP nor FP), which keeps a perfect detector at AP = 1 on
both levels.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import boxes_to_array, bev_iou_matrix, heading_error, iou3d_matrix
from .scene import CLASS_NAMES, count_points_in_box

LEVELS = (1, 2)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.7, 0.5, 0.5)
    iou_kind: str = "3d"
    recall_positions: int = 40
    level1_min_points: int = 6
    level2_min_points: int = 1

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        if any(not 0.0 < t < 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1)")
        if self.iou_kind not in ("3d", "bev"):
            raise ValueError("iou_kind must be '3d' or 'bev'")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")
        if not 1 <= self.level2_min_points <= self.level1_min_points:
            raise ValueError("need 1 <= level2_min_points <= level1_min_points")


def assign_difficulty(num_points, cfg: EvalConfig | None = None) -> list[int]:
    """Tightest level per label: 1, 2, or 0 (no points, in neither level).

    ``num_points`` is a list of counts, a list of labels with
    ``num_points_inside`` set, or a Scene.
    """
    cfg = cfg or EvalConfig()
    if hasattr(num_points, "labels") and hasattr(num_points, "cloud"):
        scene = num_points
        num_points = [
            lb.num_points_inside if lb.num_points_inside is not None else count_points_in_box(scene.cloud, lb.box)
            for lb in scene.labels
        ]
    levels = []
    for n in num_points:
        if not isinstance(n, (int, np.integer)):
            n = n.num_points_inside
            if n is None:
                raise ValueError("label has no point count; fill it before evaluation")
        if n >= cfg.level1_min_points:
            levels.append(1)
        elif n >= cfg.level2_min_points:
            levels.append(2)
        else:
            levels.append(0)
    return levels


def in_level(tightest: int, level: int) -> bool:
    return tightest != 0 and tightest <= level


@dataclass(frozen=True)
class Match:
    is_tp: bool
    matched_gt: int  # -1 when unmatched
    heading_weight: float


def match_detections(dets, gts, iou_threshold: float, iou_kind: str = "3d", scores=None) -> list[Match]:
    """Greedy matching of single-class detections to ground truth.

    Detections are visited by descending score (ties by index); each takes the
    highest-IoU still-unmatched GT with IoU >= threshold. Results are in the
    input order of ``dets``.
    """
    det_boxes = boxes_to_array([getattr(d, "box", d) for d in dets])
    gt_boxes = boxes_to_array([getattr(g, "box", g) for g in gts])
    if scores is None:
        scores = [d.score for d in dets]
    scores = np.asarray(scores, dtype=np.float64)
    n, m = det_boxes.shape[0], gt_boxes.shape[0]
    out = [Match(False, -1, 0.0)] * n
    if n == 0:
        return out
    if m == 0:
        return out
    ious = iou3d_matrix(det_boxes, gt_boxes) if iou_kind == "3d" else bev_iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(m, dtype=bool)
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            w = 1.0 - float(heading_error(det_boxes[i, 6], gt_boxes[j, 6])) / math.pi
            out[i] = Match(True, j, w)
    return out


def average_precision(tp, num_gt: int, recall_positions: int = 40, weights=None):
    """Interpolated AP over recall points ``1/R, 2/R, ..., 1``.

    ``tp`` are TP flags in descending-score order. With ``weights`` the TP mass
    in both precision and recall numerators becomes the weight sum (APH).
    Returns None when ``num_gt == 0``.
    """
    if num_gt <= 0:
        return None
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    mass = tp.astype(np.float64) if weights is None else np.where(tp, np.asarray(weights, dtype=np.float64), 0.0)
    cum = np.cumsum(mass)
    precision = cum / np.arange(1, tp.size + 1)
    recall = cum / num_gt
    # precision envelope: max precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for j in range(1, recall_positions + 1):
        r = j / recall_positions
        idx = np.searchsorted(recall, r, side="left")
        if idx < recall.size:
            total += envelope[idx]
    return float(total / recall_positions)


@dataclass
class CellResult:
    ap: float | None
    aph: float | None
    num_gt: int
    num_dets: int


@dataclass
class EvalResult:
    cells: dict = field(default_factory=dict)  # (class_id, level) -> CellResult

    def mean(self, level: int, metric: str = "aph"):
        vals = [getattr(c, metric) for (cid, lv), c in sorted(self.cells.items()) if lv == level]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "level", "AP", "APH"])
        fmt = lambda v: "" if v is None else f"{v:.6f}"
        for (cid, lv), c in sorted(self.cells.items()):
            writer.writerow([CLASS_NAMES[cid] if cid < len(CLASS_NAMES) else str(cid), f"LEVEL_{lv}", fmt(c.ap), fmt(c.aph)])
        for lv in LEVELS:
            writer.writerow(["mean", f"LEVEL_{lv}", fmt(self.mean(lv, "ap")), fmt(self.mean(lv, "aph"))])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'class':<12}{'level':<9}{'AP':>9}{'APH':>9}{'#gt':>7}{'#det':>7}"]
        fmt = lambda v: "    n/a" if v is None else f"{100 * v:7.2f}"
        for (cid, lv), c in sorted(self.cells.items()):
            name = CLASS_NAMES[cid] if cid < len(CLASS_NAMES) else str(cid)
            lines.append(f"{name:<12}LEVEL_{lv:<3}{fmt(c.ap):>9}{fmt(c.aph):>9}{c.num_gt:>7}{c.num_dets:>7}")
        for lv in LEVELS:
            lines.append(f"{'mean':<12}LEVEL_{lv:<3}{fmt(self.mean(lv, 'ap')):>9}{fmt(self.mean(lv, 'aph')):>9}")
        return "\n".join(lines)


def evaluate(scenes, cfg: EvalConfig | None = None, num_classes: int = 3) -> EvalResult:
    """Pool matches over scenes per (class, level) and compute AP / APH.

    ``scenes`` is a sequence of ``(detections, labels)`` pairs; labels need
    ``num_points_inside`` filled.
    """
    cfg = cfg or EvalConfig()
    result = EvalResult()
    for cid in range(num_classes):
        thr = cfg.iou_thresholds[cid]
        pooled = []  # (score, scene, det index, matched label level or None, weight)
        gt_levels = []
        for si, (dets, labels) in enumerate(scenes):
            cdets = [(i, d) for i, d in enumerate(dets) if d.class_id == cid]
            clabels = [lb for lb in labels if lb.class_id == cid]
            levels = assign_difficulty(clabels, cfg)
            gt_levels.extend(levels)
            matches = match_detections([d for _, d in cdets], clabels, thr, cfg.iou_kind)
            for (i, d), mt in zip(cdets, matches):
                lvl = levels[mt.matched_gt] if mt.is_tp else None
                pooled.append((d.score, si, i, lvl, mt.heading_weight))
        pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
        for level in LEVELS:
            flags, weights = [], []
            for _, _, _, lvl, w in pooled:
                if lvl is None:
                    flags.append(False)
                    weights.append(0.0)
                elif in_level(lvl, level):
                    flags.append(True)
                    weights.append(w)
                # else: matched a label outside this level -> ignored
            num_gt = sum(in_level(lv, level) for lv in gt_levels)
            ap = average_precision(flags, num_gt, cfg.recall_positions)
            aph = average_precision(flags, num_gt, cfg.recall_positions, weights)
            result.cells[(cid, level)] = CellResult(ap, aph, num_gt, len(flags))
    return result

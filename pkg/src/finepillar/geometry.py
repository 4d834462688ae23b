"""Rotated-box geometry: corners, BEV / 3D IoU, heading error and rotated NMS.

Boxes are gravity aligned. Array-form boxes are ``(N, 7)`` float64 arrays laid
out as ``(cx, cy, cz, length, width, height, yaw)``; ``length`` runs along the
heading direction, yaw is counter-clockwise from +x.

The clipping kernels are compiled with numba; everything else is numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "Box7",
    "Detection",
    "wrap_angle",
    "bev_corners",
    "rotated_bev_iou",
    "iou_3d",
    "bev_iou_matrix",
    "iou3d_matrix",
    "heading_error",
    "nms_rotated",
    "nms_rotated_arrays",
]

# slivers below this area are treated as empty
MIN_AREA = 1e-12
# collinearity tolerance for the clipping half-plane test, relative to box scale
CLIP_REL_TOL = 1e-9


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to ``[-pi, pi)``."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    # np.mod can round up to exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Box7:
    """A gravity-aligned 3D box. Yaw is normalized to ``[-pi, pi)`` on construction."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"Box7 fields must be finite, got {vals}")
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"Box7 sizes must be positive, got ({self.length}, {self.width}, {self.height})"
            )
        for name in ("cx", "cy", "cz", "length", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "Box7":
        a = [float(v) for v in np.asarray(arr, dtype=np.float64).reshape(7)]
        return cls(*a)

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height


@dataclass(frozen=True)
class Detection:
    box: Box7
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise ValueError(f"class_id must be a non-negative integer, got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))


def boxes_to_array(boxes) -> np.ndarray:
    """Stack ``Box7`` objects (or pass through an array) into an ``(N, 7)`` array."""
    if isinstance(boxes, np.ndarray):
        return np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7)
    if len(boxes) == 0:
        return np.zeros((0, 7), dtype=np.float64)
    return np.stack([b.to_array() for b in boxes])


def bev_corners(box) -> np.ndarray:
    """Four BEV corners of a box, counter-clockwise, shape ``(4, 2)``.

    Accepts a ``Box7`` or a length-7 array.
    """
    arr = box.to_array() if isinstance(box, Box7) else np.asarray(box, dtype=np.float64)
    return _corners(arr)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _corners(box):
    cx, cy, l, w, yaw = box[0], box[1], box[3], box[4], box[6]
    c = math.cos(yaw)
    s = math.sin(yaw)
    hl = 0.5 * l
    hw = 0.5 * w
    local = np.empty((4, 2))
    local[0, 0], local[0, 1] = hl, -hw
    local[1, 0], local[1, 1] = hl, hw
    local[2, 0], local[2, 1] = -hl, hw
    local[3, 0], local[3, 1] = -hl, -hw
    out = np.empty((4, 2))
    for i in range(4):
        out[i, 0] = c * local[i, 0] - s * local[i, 1] + cx
        out[i, 1] = s * local[i, 0] + c * local[i, 1] + cy
    return out


@numba.njit(cache=True)
def _polygon_area(poly, n):
    acc = 0.0
    for i in range(n):
        j = (i + 1) % n
        acc += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return 0.5 * abs(acc)


@numba.njit(cache=True)
def _clip_convex(subject, n_subject, clip, tol):
    """Sutherland-Hodgman: clip ``subject`` by the CCW convex polygon ``clip`` (4 vertices)."""
    cur = np.empty((16, 2))
    nxt = np.empty((16, 2))
    for i in range(n_subject):
        cur[i, 0] = subject[i, 0]
        cur[i, 1] = subject[i, 1]
    n = n_subject
    for e in range(4):
        if n == 0:
            break
        ax, ay = clip[e, 0], clip[e, 1]
        bx, by = clip[(e + 1) % 4, 0], clip[(e + 1) % 4, 1]
        ex, ey = bx - ax, by - ay
        elen = math.sqrt(ex * ex + ey * ey)
        m = 0
        for i in range(n):
            px, py = cur[i, 0], cur[i, 1]
            qx, qy = cur[(i + 1) % n, 0], cur[(i + 1) % n, 1]
            # signed distance to the edge line, positive inside
            dp = (ex * (py - ay) - ey * (px - ax)) / elen
            dq = (ex * (qy - ay) - ey * (qx - ax)) / elen
            p_in = dp >= -tol
            q_in = dq >= -tol
            if p_in:
                nxt[m, 0] = px
                nxt[m, 1] = py
                m += 1
                if not q_in:
                    t = dp / (dp - dq)
                    nxt[m, 0] = px + t * (qx - px)
                    nxt[m, 1] = py + t * (qy - py)
                    m += 1
            elif q_in:
                t = dp / (dp - dq)
                nxt[m, 0] = px + t * (qx - px)
                nxt[m, 1] = py + t * (qy - py)
                m += 1
        for i in range(m):
            cur[i, 0] = nxt[i, 0]
            cur[i, 1] = nxt[i, 1]
        n = m
    return cur, n


@numba.njit(cache=True)
def _swap_first(a, b):
    # canonical argument order so that f(a, b) and f(b, a) run identical arithmetic
    for k in range(7):
        if a[k] < b[k]:
            return False
        if a[k] > b[k]:
            return True
    return False


@numba.njit(cache=True)
def _bev_intersection(a, b):
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    ra = 0.5 * math.sqrt(a[3] * a[3] + a[4] * a[4])
    rb = 0.5 * math.sqrt(b[3] * b[3] + b[4] * b[4])
    if dx * dx + dy * dy >= (ra + rb) * (ra + rb):
        return 0.0
    scale = max(max(a[3], a[4]), max(b[3], b[4]))
    ca = _corners(a)
    cb = _corners(b)
    poly, n = _clip_convex(ca, 4, cb, CLIP_REL_TOL * scale)
    if n < 3:
        return 0.0
    area = _polygon_area(poly, n)
    if area < MIN_AREA:
        return 0.0
    return area


@numba.njit(cache=True)
def _bev_iou_pair(a, b):
    if _swap_first(a, b):
        a, b = b, a
    inter = _bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)


@numba.njit(cache=True)
def _iou3d_pair(a, b):
    if _swap_first(a, b):
        a, b = b, a
    za0 = a[2] - 0.5 * a[5]
    za1 = a[2] + 0.5 * a[5]
    zb0 = b[2] - 0.5 * b[5]
    zb1 = b[2] + 0.5 * b[5]
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter_area = _bev_intersection(a, b)
    if inter_area <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)


@numba.njit(cache=True)
def _pairwise(boxes_a, boxes_b, kind):
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i in range(boxes_a.shape[0]):
        for j in range(boxes_b.shape[0]):
            if kind == 0:
                out[i, j] = _bev_iou_pair(boxes_a[i], boxes_b[j])
            else:
                out[i, j] = _iou3d_pair(boxes_a[i], boxes_b[j])
    return out


@numba.njit(cache=True)
def _nms_sorted(boxes, classes, order, thr, per_class):
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for ii in range(n):
        if suppressed[ii]:
            continue
        i = order[ii]
        keep[nk] = i
        nk += 1
        for jj in range(ii + 1, n):
            if suppressed[jj]:
                continue
            j = order[jj]
            if per_class and classes[i] != classes[j]:
                continue
            if _bev_iou_pair(boxes[i], boxes[j]) > thr:
                suppressed[jj] = True
    return keep[:nk]


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_box_array(box) -> np.ndarray:
    if isinstance(box, Box7):
        return box.to_array()
    return np.ascontiguousarray(box, dtype=np.float64).reshape(7)


def rotated_bev_iou(a, b) -> float:
    """BEV IoU of two boxes (``Box7`` or length-7 arrays) via convex polygon clipping."""
    return float(_bev_iou_pair(_as_box_array(a), _as_box_array(b)))


def iou_3d(a, b) -> float:
    """3D IoU of two gravity-aligned boxes: BEV intersection times vertical overlap."""
    return float(_iou3d_pair(_as_box_array(a), _as_box_array(b)))


def bev_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    return _pairwise(boxes_to_array(boxes_a), boxes_to_array(boxes_b), 0)


def iou3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    return _pairwise(boxes_to_array(boxes_a), boxes_to_array(boxes_b), 1)


def heading_error(yaw_a, yaw_b):
    """Absolute wrapped heading difference in ``[0, pi]``."""
    return np.abs(wrap_angle(np.asarray(yaw_a, dtype=np.float64) - yaw_b))


def nms_rotated_arrays(boxes, scores, classes, iou_threshold: float, per_class: bool = True) -> np.ndarray:
    """Greedy rotated NMS on arrays; returns kept indices in descending-score order.

    Equal scores are ordered by input index.
    """
    boxes = boxes_to_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return _nms_sorted(boxes, classes, order, float(iou_threshold), bool(per_class))


def nms_rotated(dets, iou_threshold: float, per_class: bool = True) -> list[int]:
    """Greedy rotated NMS over ``Detection`` objects; returns kept indices."""
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = [d.score for d in dets]
    classes = [d.class_id for d in dets]
    return nms_rotated_arrays(boxes, scores, classes, iou_threshold, per_class).tolist()

"""Independent reference implementations used as test oracles.

Everything here is written with plain loops or sampling and shares no code
with the package beyond its data classes.
"""
from __future__ import annotations

import math

import numba
import numpy as np


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


_LCG_MUL = np.uint64(6364136223846793005)
_LCG_INC = np.uint64(1442695040888963407)


@numba.njit(cache=True, inline="always")
def _lcg_next(state):
    """One 64-bit LCG step; returns (new state, uniform in [0, 1) from the top 53 bits)."""
    state = state * _LCG_MUL + _LCG_INC
    return state, (state >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _mc_inside_count(a, b, n, with_height, seed):
    """Count stratified jittered samples of box ``a`` that fall inside box ``b``.

    The footprint is split into n x n strata with one jittered sample each. With
    ``with_height`` every sample also gets a jittered height in stratum
    ``(7919 j + i) mod n``, a Latin square, so each row and column covers all
    n height strata.
    """
    state = np.uint64(seed) * _LCG_MUL + _LCG_INC
    ca, sa = math.cos(a[6]), math.sin(a[6])
    cb, sb = math.cos(b[6]), math.sin(b[6])
    # sample (u, v) in a's frame -> b's frame: p = off + M (u, v)
    m11, m12 = cb * ca + sb * sa, -cb * sa + sb * ca
    m21, m22 = -sb * ca + cb * sa, sb * sa + cb * ca
    ox, oy = a[0] - b[0], a[1] - b[1]
    off1, off2 = cb * ox + sb * oy, -sb * ox + cb * oy
    hl, hw, hh = 0.5 * b[3], 0.5 * b[4], 0.5 * b[5]
    du, dv, dz = a[3] / n, a[4] / n, a[5] / n
    step = 7919 % n
    hits = 0
    for i in range(n):
        u0 = i * du - 0.5 * a[3]
        k = i % n
        for j in range(n):
            state, r1 = _lcg_next(state)
            state, r2 = _lcg_next(state)
            u = u0 + r1 * du
            v = (j + r2) * dv - 0.5 * a[4]
            inside = abs(off1 + m11 * u + m12 * v) <= hl and abs(off2 + m21 * u + m22 * v) <= hw
            if with_height:
                state, r3 = _lcg_next(state)
                z = a[2] + (k + r3) * dz - 0.5 * a[5]
                inside = inside and abs(z - b[2]) <= hh
                k += step
                if k >= n:
                    k -= n
            hits += inside
    return hits


def mc_bev_iou(a, b, rng, n=1000):
    """Monte Carlo BEV IoU with n*n stratified samples inside box ``a``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    frac = _mc_inside_count(a, b, n, False, int(rng.integers(2**31))) / (n * n)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    inter = area_a * frac
    return inter / (area_a + area_b - inter)


def mc_iou_3d(a, b, rng, n=1000):
    """Monte Carlo 3D IoU with n*n stratified samples inside box ``a``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    frac = _mc_inside_count(a, b, n, True, int(rng.integers(2**31))) / (n * n)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    inter = vol_a * frac
    return inter / (vol_a + vol_b - inter)


def greedy_nms(scores, classes, iou, thr, per_class=True):
    """O(n^2) greedy NMS; ``iou`` is a matrix or a callable ``iou(i, k)``."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    pair = iou if callable(iou) else (lambda i, k: iou[i][k])
    kept = []
    for i in order:
        ok = True
        for k in kept:
            if per_class and classes[i] != classes[k]:
                continue
            if pair(i, k) > thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# nn ops
# ---------------------------------------------------------------------------


def naive_linear(x, W, b):
    n, ci = x.shape
    co = W.shape[1]
    out = np.zeros((n, co))
    for i in range(n):
        for o in range(co):
            acc = 0.0 if b is None else float(b[o])
            for k in range(ci):
                acc += float(x[i, k]) * float(W[k, o])
            out[i, o] = acc
    return out


def naive_conv2d(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for bi in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                yy = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[bi, c, yy, xx]) * float(w[o, c, di, dj])
                    out[bi, o, i, j] = acc
    return out


def naive_channel_pool(x, kind):
    n, c, h, w = x.shape
    out = np.zeros((n, 1, h, w))
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                vals = [float(x[bi, k, i, j]) for k in range(c)]
                out[bi, 0, i, j] = max(vals) if kind == "max" else sum(vals) / c
    return out


def naive_resize(x, oh, ow, mode):
    """Half-pixel-center resize, edge-clamped."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for bi in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    sy = (i + 0.5) * h / oh - 0.5
                    sx = (j + 0.5) * w / ow - 0.5
                    if mode == "nearest":
                        yy = min(h - 1, int(math.floor((i + 0.5) * h / oh)))
                        xx = min(w - 1, int(math.floor((j + 0.5) * w / ow)))
                        out[bi, ch, i, j] = x[bi, ch, yy, xx]
                        continue
                    sy = min(max(sy, 0.0), h - 1.0)
                    sx = min(max(sx, 0.0), w - 1.0)
                    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
                    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    fy, fx = sy - y0, sx - x0
                    out[bi, ch, i, j] = (
                        (1 - fy) * (1 - fx) * x[bi, ch, y0, x0]
                        + (1 - fy) * fx * x[bi, ch, y0, x1]
                        + fy * (1 - fx) * x[bi, ch, y1, x0]
                        + fy * fx * x[bi, ch, y1, x1]
                    )
    return out


# ---------------------------------------------------------------------------
# plain pillars
# ---------------------------------------------------------------------------


def plain_pillar_pseudo_image(points, x_range, y_range, z_range, size, max_pts, max_cells, weights):
    """Single-layer pillar encoder written point by point (float64).

    Returns ``(1, C, ny, nx)``. VFE recipe: dense(10 -> half) + affine + relu,
    cell max concatenated back, dense + affine + relu, cell max.
    """
    nx = int(round((x_range[1] - x_range[0]) / size))
    ny = int(round((y_range[1] - y_range[0]) / size))
    cells = {}
    order = []
    for p in np.asarray(points, dtype=np.float64):
        x, y, z, r = p
        if not (x_range[0] <= x < x_range[1] and y_range[0] <= y < y_range[1] and z_range[0] <= z <= z_range[1]):
            continue
        ix = min(nx - 1, int(math.floor((x - x_range[0]) / size)))
        iy = min(ny - 1, int(math.floor((y - y_range[0]) / size)))
        key = (ix, iy)
        if key not in cells:
            if len(order) >= max_cells:
                continue
            cells[key] = []
            order.append(key)
        if len(cells[key]) < max_pts:
            cells[key].append((x, y, z, r))

    W1 = weights["pfe.vfe1.linear.weight"].astype(np.float64)
    s1 = weights["pfe.vfe1.norm.scale"].astype(np.float64)
    b1 = weights["pfe.vfe1.norm.shift"].astype(np.float64)
    W2 = weights["pfe.vfe2.linear.weight"].astype(np.float64)
    s2 = weights["pfe.vfe2.norm.scale"].astype(np.float64)
    b2 = weights["pfe.vfe2.norm.shift"].astype(np.float64)
    zc = 0.5 * (z_range[0] + z_range[1])
    out = np.zeros((1, W2.shape[1], ny, nx))
    for (ix, iy), pts in cells.items():
        P = np.array(pts)
        mean = P[:, :3].mean(axis=0)
        center = np.array([x_range[0] + (ix + 0.5) * size, y_range[0] + (iy + 0.5) * size, zc])
        feats = np.concatenate([P, P[:, :3] - mean, P[:, :3] - center], axis=1)
        h1 = np.maximum(feats @ W1 * s1 + b1, 0.0)
        h1 = np.concatenate([h1, np.repeat(h1.max(axis=0, keepdims=True), len(P), axis=0)], axis=1)
        h2 = np.maximum(h1 @ W2 * s2 + b2, 0.0)
        out[0, :, iy, ix] = h2.max(axis=0)
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def scripted_ap(flags_weights, num_gt, R=40):
    """Interpolated AP from ``[(is_tp, weight)]`` in descending-score order.

    Precision at each prefix k is tp_mass(k) / k; for every recall position
    r = j/R take the max precision over prefixes whose recall reaches r.
    """
    if num_gt == 0:
        return None
    pts = []
    mass = 0.0
    for k, (tp, w) in enumerate(flags_weights, start=1):
        if tp:
            mass += w
        pts.append((mass / num_gt, mass / k))
    total = 0.0
    for j in range(1, R + 1):
        r = j / R
        best = 0.0
        for rec, prec in pts:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / R


def shapely_bev_iou_matrix(boxes, classes=None):
    """Pairwise BEV IoU via shapely polygons; circle-disjoint pairs are exactly 0.

    With ``classes`` only same-class pairs are computed; the rest stay 0.
    """
    import shapely

    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    u = np.array([0.5, 0.5, -0.5, -0.5, 0.5])[None, :] * boxes[:, 3:4]
    v = np.array([-0.5, 0.5, 0.5, -0.5, -0.5])[None, :] * boxes[:, 4:5]
    c, s = np.cos(boxes[:, 6:7]), np.sin(boxes[:, 6:7])
    ring = np.stack([boxes[:, 0:1] + c * u - s * v, boxes[:, 1:2] + s * u + c * v], axis=-1)
    polys = shapely.polygons(ring)
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    dist = np.hypot(boxes[:, None, 0] - boxes[None, :, 0], boxes[:, None, 1] - boxes[None, :, 1])
    near = dist <= radius[:, None] + radius[None, :] + 1e-9
    if classes is not None:
        classes = np.asarray(classes)
        near &= classes[:, None] == classes[None, :]
    i, j = np.nonzero(np.triu(near, k=1))
    out = np.zeros((n, n))
    if i.size:
        inter = shapely.area(shapely.intersection(polys[i], polys[j]))
        area = boxes[:, 3] * boxes[:, 4]
        vals = inter / (area[i] + area[j] - inter)
        out[i, j] = vals
        out[j, i] = vals
    return out


def shapely_greedy_nms(boxes, scores, classes, thr, per_class=True):
    """Greedy NMS with shapely IoU, evaluated only for the pairs the scan queries.

    Visits boxes by (score desc, index asc); a box is dropped if any kept box
    (of its class when ``per_class``) has BEV IoU above ``thr``. Pairs whose
    circumcircles are disjoint cannot overlap and are skipped, as are pairs
    whose IoU is provably at most ``thr`` because the axis-aligned hulls of
    the two boxes intersect in too small an area.
    """
    import shapely

    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    u = np.array([0.5, 0.5, -0.5, -0.5, 0.5])[None, :] * boxes[:, 3:4]
    v = np.array([-0.5, 0.5, 0.5, -0.5, -0.5])[None, :] * boxes[:, 4:5]
    c, s = np.cos(boxes[:, 6:7]), np.sin(boxes[:, 6:7])
    ring = np.stack([boxes[:, 0:1] + c * u - s * v, boxes[:, 1:2] + s * u + c * v], axis=-1)
    polys = shapely.polygons(ring)
    lo, hi = ring.min(axis=1), ring.max(axis=1)
    area = boxes[:, 3] * boxes[:, 4]
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    classes = np.asarray(classes)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = np.zeros(n, dtype=bool)
    out = []
    for i in order:
        cand = kept & (np.hypot(boxes[:, 0] - boxes[i, 0], boxes[:, 1] - boxes[i, 1]) <= radius + radius[i] + 1e-9)
        if per_class:
            cand &= classes == classes[i]
        k = np.flatnonzero(cand)
        if k.size:
            ext = np.clip(np.minimum(hi[k], hi[i]) - np.maximum(lo[k], lo[i]), 0.0, None)
            bound = np.minimum(ext[:, 0] * ext[:, 1], np.minimum(area[i], area[k]))
            k = k[bound / (area[i] + area[k] - bound) > thr]
        if k.size:
            inter = shapely.area(shapely.intersection(polys[i], polys[k]))
            if np.any(inter / (area[i] + area[k] - inter) > thr):
                continue
        kept[i] = True
        out.append(i)
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def shapely_iou_3d(a, b):
    """3D IoU of two Box7-like arrays: polygon intersection times vertical overlap."""
    from shapely.geometry import Polygon

    def poly(bx):
        cx, cy, _, l, w, _, yaw = bx
        c, s = math.cos(yaw), math.sin(yaw)
        return Polygon([(cx + c * u - s * v, cy + s * u + c * v) for u, v in ((l / 2, -w / 2), (l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2))])

    inter_bev = poly(a).intersection(poly(b)).area
    dz = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    inter = inter_bev * max(0.0, dz)
    va, vb = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    return inter / (va + vb - inter)


def scripted_evaluate(scenes, thresholds=(0.7, 0.5, 0.5), R=40, l1_min=6, l2_min=1):
    """From-scratch AP / APH per (class, level) with greedy per-scene matching.

    ``scenes`` holds ``(detections, labels)`` pairs. A detection matched to a
    label outside the level is dropped from that level's ranking.
    """
    out = {}
    for cid in range(3):
        ranked = []  # (score, scene, det index, tp label points or None, heading weight)
        gt_points = []
        for si, (dets, labels) in enumerate(scenes):
            gts = [lb for lb in labels if lb.class_id == cid]
            gt_points += [lb.num_points_inside for lb in gts]
            mine = [(i, d) for i, d in enumerate(dets) if d.class_id == cid]
            order = sorted(range(len(mine)), key=lambda k: (-mine[k][1].score, k))
            used = set()
            for k in order:
                i, d = mine[k]
                a = d.box.to_array()
                best, best_j = -1.0, -1
                for j, g in enumerate(gts):
                    if j in used:
                        continue
                    v = shapely_iou_3d(a, g.box.to_array())
                    if v > best:
                        best, best_j = v, j
                if best_j >= 0 and best >= thresholds[cid]:
                    used.add(best_j)
                    diff = abs((a[6] - gts[best_j].box.yaw + math.pi) % (2 * math.pi) - math.pi)
                    ranked.append((d.score, si, i, gts[best_j].num_points_inside, 1.0 - diff / math.pi))
                else:
                    ranked.append((d.score, si, i, None, 0.0))
        ranked.sort(key=lambda t: (-t[0], t[1], t[2]))
        for level, lo in ((1, l1_min), (2, l2_min)):
            rows = []
            for _, _, _, pts, w in ranked:
                if pts is None:
                    rows.append((False, 0.0))
                elif pts >= lo:
                    rows.append((True, w))
            num_gt = sum(1 for n in gt_points if n >= lo)
            out[(cid, level)] = (
                scripted_ap([(tp, 1.0) for tp, _ in rows], num_gt, R),
                scripted_ap(rows, num_gt, R),
            )
    return out


def crafted_eval_fixture():
    """Five hand-built scenes exercising ties, duplicates, ignored matches and heading errors."""
    from finepillar.geometry import Box7, Detection
    from finepillar.scene import LabeledBox

    car, ped, cyc = (4.5, 2.0, 1.6), (0.8, 0.8, 1.7), (1.8, 0.8, 1.7)

    def lab(x, y, size, cls, pts, yaw=0.0):
        return LabeledBox(Box7(x, y, size[2] / 2, *size, yaw), cls, pts)

    def det(x, y, size, cls, score, yaw=0.0):
        return Detection(Box7(x, y, size[2] / 2, *size, yaw), cls, score)

    s0 = (
        [det(0, 0, car, 0, 0.9), det(10.2, 0, car, 0, 0.8), det(20, 0, car, 0, 0.7), det(30, 0, car, 0, 0.85), det(0.1, 0, car, 0, 0.6)],
        [lab(0, 0, car, 0, 50), lab(10, 0, car, 0, 3), lab(20, 0, car, 0, 0)],
    )
    s1 = (
        [det(0, 5, car, 0, 0.9, math.pi), det(3.1, 3, ped, 1, 0.5), det(9, 9, ped, 1, 0.95)],
        [lab(0, 5, car, 0, 10), lab(3, 3, ped, 1, 8)],
    )
    s2 = ([det(-10, -10, car, 0, 0.75), det(5, 5, cyc, 2, 0.3)], [])
    s3 = (
        [det(-5, 2, cyc, 2, 0.65, 0.3), det(-5, 8, cyc, 2, 0.65, 0.0)],
        [lab(-5, 2, cyc, 2, 2), lab(-5, 8, cyc, 2, 20, 0.2), lab(12, 12, cyc, 2, 40)],
    )
    s4 = (
        [det(0.3, 0, car, 0, 0.55, 0.1), det(5.0, 0, car, 0, 0.55), det(-20, 0, ped, 1, 0.2)],
        [lab(0, 0, car, 0, 100), lab(4.9, 0, car, 0, 7), lab(-20, 0.05, ped, 1, 1), lab(-22, 0, ped, 1, 30)],
    )
    return [s0, s1, s2, s3, s4]

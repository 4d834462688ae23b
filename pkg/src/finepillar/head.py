"""Center-heatmap detection head: forward maps, targets, forward-only losses and decoding.

Regression layout at a center cell (8 channels): ``offset_x, offset_y`` (cells),
``h_g`` (box center z, meters), ``log l, log w, log h``, ``sin yaw, cos yaw``.
The IoU head is a separate raw channel mapped to ``[0, 1]`` at decode time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import Box7, Detection, nms_rotated_arrays, wrap_angle
from .pillarize import GridConfig

HEAD_CHANNELS = {"heatmap": None, "offset": 2, "h_g": 1, "size": 3, "yaw": 2, "iou": 1}
REG_ORDER = ("offset", "h_g", "size", "yaw")
NUM_REG = 8
HEATMAP_PRIOR_BIAS = -2.19  # sigmoid ~= 0.1
LOGIT_CLIP = 50.0
# exp() guard on regressed log-sizes
LOG_SIZE_RANGE = (math.log(1e-3), math.log(1e3))


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 3
    hidden_channels: int = 32

    def __post_init__(self):
        if self.num_classes < 1 or self.hidden_channels < 1:
            raise ValueError("head channel counts must be >= 1")

    def channels(self, name: str) -> int:
        c = HEAD_CHANNELS[name]
        return self.num_classes if c is None else c


@dataclass
class HeadOutputs:
    heatmap: np.ndarray  # (1, K, H, W) logits
    offset: np.ndarray  # (1, 2, H, W)
    h_g: np.ndarray  # (1, 1, H, W)
    size: np.ndarray  # (1, 3, H, W)
    yaw: np.ndarray  # (1, 2, H, W)
    iou: np.ndarray  # (1, 1, H, W)

    def __post_init__(self):
        shp = self.heatmap.shape[2:]
        for name in HEAD_CHANNELS:
            arr = getattr(self, name)
            if arr.ndim != 4 or arr.shape[2:] != shp:
                raise ValueError(f"head output {name} has shape {arr.shape}, expected (1, c, {shp[0]}, {shp[1]})")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"head output {name} is not finite")

    def regression(self) -> np.ndarray:
        """The 8 regression channels stacked as ``(8, H, W)``."""
        return np.concatenate([getattr(self, n)[0] for n in REG_ORDER], axis=0)


@dataclass(frozen=True)
class DecodeConfig:
    top_k: int = 100
    score_threshold: float = 0.1
    nms_threshold: float = 0.5
    beta: tuple = (0.5, 0.5, 0.5)
    output_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        for name in ("score_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if any(not 0.0 <= b <= 1.0 for b in self.beta):
            raise ValueError("rectification exponents must lie in [0, 1]")
        if self.output_stride < 1:
            raise ValueError("output_stride must be >= 1")


def head_weight_shapes(cfg: HeadConfig, cin: int, prefix: str = "head") -> dict:
    shapes = {}
    for name in HEAD_CHANNELS:
        shapes.update(nn.conv_block_shapes(f"{prefix}.{name}.block", cin, cfg.hidden_channels))
        shapes[f"{prefix}.{name}.out.weight"] = (cfg.channels(name), cfg.hidden_channels, 1, 1)
        shapes[f"{prefix}.{name}.out.bias"] = (cfg.channels(name),)
    return shapes


def head_init_overrides(prefix: str = "head") -> dict:
    return {f"{prefix}.heatmap.out.bias": HEATMAP_PRIOR_BIAS}


def head_forward(features: np.ndarray, weights, prefix: str = "head") -> HeadOutputs:
    """Each head: 3x3 conv block, then a 1x1 conv with bias. Heads share only the input."""
    outs = {}
    for name in HEAD_CHANNELS:
        y = nn.conv_block(features, weights, f"{prefix}.{name}.block", stride=1)
        outs[name] = nn.conv2d(y, nn._w(weights, f"{prefix}.{name}.out.weight"), nn._w(weights, f"{prefix}.{name}.out.bias"))
    return HeadOutputs(**outs)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift (cells) keeping IoU >= ``min_overlap`` (CenterNet)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


MIN_RADIUS = 2


def draw_gaussian(canvas: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Max-merge a Gaussian splat (sigma = diameter / 6, peak 1 at the center) into ``canvas``."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    ys, xs = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[g < np.finfo(np.float64).eps * g.max()] = 0
    h, w = canvas.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = canvas[cy - top : cy + bottom, cx - left : cx + right]
    patch = g[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(region, patch, out=region)


@dataclass
class HeadTargets:
    heatmap: np.ndarray  # (K, H, W)
    regression: np.ndarray  # (8, H, W)
    mask: np.ndarray  # (H, W) bool
    centers: list = field(default_factory=list)  # (class_id, iy, ix) per rendered label
    n_skipped: int = 0


def head_grid_shape(grid: GridConfig, stride: int) -> tuple[int, int]:
    return grid.ny // stride, grid.nx // stride


def render_targets(labels, grid: GridConfig, stride: int, num_classes: int = 3) -> HeadTargets:
    """Gaussian heatmaps per class and regression targets at each label's center cell.

    ``labels`` is an iterable of objects with ``box`` and ``class_id`` (or a Scene).
    Labels whose center falls outside the grid are skipped and counted.
    """
    labels = getattr(labels, "labels", labels)
    H, W = head_grid_shape(grid, stride)
    cell = grid.grid_size * stride
    heat = np.zeros((num_classes, H, W))
    reg = np.zeros((NUM_REG, H, W))
    mask = np.zeros((H, W), dtype=bool)
    centers = []
    skipped = 0
    for lb in labels:
        b = lb.box
        fx = (b.cx - grid.x_range[0]) / cell
        fy = (b.cy - grid.y_range[0]) / cell
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= ix < W and 0 <= iy < H) or lb.class_id >= num_classes:
            skipped += 1
            continue
        radius = max(MIN_RADIUS, int(gaussian_radius(b.length / cell, b.width / cell)))
        draw_gaussian(heat[lb.class_id], ix, iy, radius)
        reg[:, iy, ix] = [
            fx - ix - 0.5,
            fy - iy - 0.5,
            b.cz,
            math.log(b.length),
            math.log(b.width),
            math.log(b.height),
            math.sin(b.yaw),
            math.cos(b.yaw),
        ]
        mask[iy, ix] = True
        centers.append((lb.class_id, iy, ix))
    return HeadTargets(heat, reg, mask, centers, skipped)


def inverse_head_outputs(targets: HeadTargets) -> HeadOutputs:
    """Head outputs that decode exactly to the rendered labels (logits of the targets)."""
    t = np.clip(targets.heatmap, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        logits = np.log(t) - np.log1p(-t)
    logits = np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
    reg = targets.regression
    return HeadOutputs(
        heatmap=logits[None],
        offset=reg[None, 0:2],
        h_g=reg[None, 2:3],
        size=reg[None, 3:6],
        yaw=reg[None, 6:8],
        iou=np.ones((1, 1) + reg.shape[1:]),
    )


# ---------------------------------------------------------------------------
# losses (forward only)
# ---------------------------------------------------------------------------


def focal_loss(pred_logits: np.ndarray, targets: np.ndarray, eps: float = 1e-7) -> float:
    """Penalty-reduced pixelwise focal loss, normalized by the number of positives.

    ``p = sigmoid(pred)`` is clamped to ``[eps, 1 - eps]``.
    """
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if pred_logits.shape != t.shape:
        raise ValueError(f"prediction {pred_logits.shape} and target {t.shape} shapes differ")
    p = np.clip(nn.sigmoid(pred_logits), eps, 1.0 - eps)
    pos = t == 1.0
    pos_loss = -((1.0 - p[pos]) ** 2) * np.log(p[pos])
    neg = ~pos
    neg_loss = -((1.0 - t[neg]) ** 4) * p[neg] ** 2 * np.log(1.0 - p[neg])
    return float((pos_loss.sum() + neg_loss.sum()) / max(1, int(pos.sum())))


def l1_reg_loss(pred: HeadOutputs, target_regression: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over masked cells and all 8 regression channels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    diff = np.abs(pred.regression() - target_regression)[:, mask]
    return float(diff.mean())


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def local_maxima(p: np.ndarray) -> np.ndarray:
    """Cells equal to the max of their 3x3 neighbourhood (ties all kept). ``p``: (K, H, W)."""
    K, H, W = p.shape
    padded = np.full((K, H + 2, W + 2), -np.inf, dtype=p.dtype)
    padded[:, 1:-1, 1:-1] = p
    m = p.copy()
    for dy in range(3):
        for dx in range(3):
            np.maximum(m, padded[:, dy : dy + H, dx : dx + W], out=m)
    return p == m


def rectify(p, u, beta):
    """IoU-aware rectified confidence ``p**(1 - beta) * u**beta``."""
    return np.power(p, 1.0 - beta) * np.power(u, beta)


def decode(outputs: HeadOutputs, grid: GridConfig, cfg: DecodeConfig) -> list[Detection]:
    """Peaks -> global top-k -> boxes -> rectified scores -> threshold -> per-class rotated NMS."""
    heat = outputs.heatmap[0].astype(np.float64)
    K, H, W = heat.shape
    if len(cfg.beta) < K:
        raise ValueError(f"need a rectification exponent per class ({K}), got {len(cfg.beta)}")
    p = nn.sigmoid(heat)
    cand = np.where(local_maxima(p), p, -1.0).reshape(-1)
    order = np.argsort(-cand, kind="stable")[: cfg.top_k]
    order = order[cand[order] >= 0.0]
    if order.size == 0:
        return []
    cls = order // (H * W)
    iy = (order % (H * W)) // W
    ix = order % W

    def at(arr, c):
        return arr[0, c, iy, ix].astype(np.float64)

    cell = grid.grid_size * cfg.output_stride
    boxes = np.empty((order.size, 7))
    boxes[:, 0] = (ix + 0.5 + at(outputs.offset, 0)) * cell + grid.x_range[0]
    boxes[:, 1] = (iy + 0.5 + at(outputs.offset, 1)) * cell + grid.y_range[0]
    boxes[:, 2] = at(outputs.h_g, 0)
    for k in range(3):
        boxes[:, 3 + k] = np.exp(np.clip(at(outputs.size, k), *LOG_SIZE_RANGE))
    boxes[:, 6] = wrap_angle(np.arctan2(at(outputs.yaw, 0), at(outputs.yaw, 1)))
    u = np.clip((at(outputs.iou, 0) + 1.0) / 2.0, 0.0, 1.0)
    beta = np.asarray(cfg.beta, dtype=np.float64)[cls]
    scores = rectify(cand[order], u, beta)

    keep = scores >= cfg.score_threshold
    boxes, scores, cls = boxes[keep], scores[keep], cls[keep]
    kept = nms_rotated_arrays(boxes, scores, cls, cfg.nms_threshold, per_class=True)
    return [Detection(Box7.from_array(boxes[i]), int(cls[i]), float(scores[i])) for i in kept]

"""Point-cloud / label I/O, synthetic scene generation and corpus statistics.

Binary point files are headerless little-endian float32 ``x, y, z, intensity``
records (16 bytes per point). Label files are JSON::

    {"format_version": 1, "scene_id": "000000",
     "boxes": [{"cx": ..., "cy": ..., "cz": ..., "length": ..., "width": ...,
                "height": ..., "yaw": ..., "class_id": 0}, ...]}

Detection files use the same schema with an extra ``score`` per box.

Randomness comes from numpy's ``PCG64`` bit generator seeded with the config
seed; the draw order is fixed (ground, then objects class by class, then a
final shuffle), so a seed fully determines the scene.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box7, Detection, wrap_angle

FORMAT_VERSION = 1
CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")
BOX_FIELDS = ("cx", "cy", "cz", "length", "width", "height", "yaw")


class PointCloudFormatError(ValueError):
    """Malformed point file; the message carries the byte offset or line number."""


class LabelSchemaError(ValueError):
    """Label / detection JSON that violates the schema; message names the field path."""


def make_rng(seed: int) -> np.random.Generator:
    """The single RNG used for all seeded draws (numpy PCG64)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4) float32: x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        inten = pts[:, 3]
        if inten.size and (inten.min() < 0.0 or inten.max() > 1.0):
            raise ValueError("point intensity must lie in [0, 1]")
        self.points = np.ascontiguousarray(pts)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=np.float32))


@dataclass
class LabeledBox:
    box: Box7
    class_id: int
    num_points_inside: int | None = None

    def __post_init__(self):
        if self.class_id not in (0, 1, 2):
            raise ValueError(f"class_id must be 0, 1 or 2, got {self.class_id!r}")


@dataclass
class Scene:
    cloud: PointCloud
    labels: list[LabeledBox]
    id: str = "scene"


@dataclass
class SynthConfig:
    """Synthetic scene parameters. Sizes in meters; per-class tuples are indexed by class id."""

    ground_z_mean: float = 0.0
    ground_z_std: float = 0.05
    ground_points: int = 20000
    object_counts: tuple = (6, 4, 3)
    size_priors: tuple = ((4.5, 2.0, 1.6), (0.8, 0.8, 1.7), (1.8, 0.8, 1.7))
    size_jitter: float = 0.1
    points_per_object: tuple = ((30, 400), (3, 80), (3, 120))
    x_extent: tuple = (-25.6, 25.6)
    y_extent: tuple = (-25.6, 25.6)
    surface_jitter: float = 0.02
    vertical_face_weight: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if not self.ground_z_std > 0:
            raise ValueError("ground_z_std must be > 0")
        if not self.surface_jitter > 0:
            raise ValueError("surface_jitter must be > 0")
        if self.ground_points < 0 or any(c < 0 for c in self.object_counts):
            raise ValueError("point and object counts must be >= 0")
        if len(self.object_counts) != 3 or len(self.size_priors) != 3 or len(self.points_per_object) != 3:
            raise ValueError("per-class settings need exactly 3 entries")
        for lo, hi in (self.x_extent, self.y_extent):
            if not hi > lo:
                raise ValueError("scene extent must be positive")
        for lo, hi in self.points_per_object:
            if lo < 0 or hi < lo:
                raise ValueError("points_per_object ranges must satisfy 0 <= lo <= hi")
        if not 0 <= self.size_jitter < 1:
            raise ValueError("size_jitter must lie in [0, 1)")


# ---------------------------------------------------------------------------
# point files
# ---------------------------------------------------------------------------


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "bin"


def read_point_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read ``bin`` (float32 LE xyzi, no header) or ``csv`` (``x,y,z,intensity`` header)."""
    fmt = _infer_format(path, fmt)
    if fmt == "bin":
        raw = Path(path).read_bytes()
        if len(raw) % 16:
            whole = len(raw) - len(raw) % 16
            raise PointCloudFormatError(
                f"{path}: size {len(raw)} bytes is not a multiple of 16; trailing partial record at byte {whole}"
            )
        pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
        try:
            return PointCloud(pts)
        except ValueError as exc:
            bad = np.flatnonzero(~np.isfinite(pts).all(axis=1) | (pts[:, 3] < 0) | (pts[:, 3] > 1))
            pos = int(bad[0]) * 16 if bad.size else 0
            raise PointCloudFormatError(f"{path}: {exc} (record at byte {pos})") from None
    if fmt == "csv":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["x", "y", "z", "intensity"]:
                raise PointCloudFormatError(f"{path}: line 1: expected header 'x,y,z,intensity'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise PointCloudFormatError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    raise PointCloudFormatError(f"{path}: line {lineno}: non-numeric field in {row!r}") from None
        pts = np.asarray(rows, dtype=np.float32).reshape(-1, 4)
        try:
            return PointCloud(pts)
        except ValueError as exc:
            raise PointCloudFormatError(f"{path}: {exc}") from None
    raise ValueError(f"unknown point format {fmt!r}")


def write_point_cloud(path, cloud: PointCloud, fmt: str | None = None) -> None:
    fmt = _infer_format(path, fmt)
    if fmt == "bin":
        Path(path).write_bytes(cloud.points.astype("<f4").tobytes())
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z", "intensity"])
            for row in cloud.points.tolist():
                writer.writerow([repr(float(np.float32(v))) for v in row])
    else:
        raise ValueError(f"unknown point format {fmt!r}")


# ---------------------------------------------------------------------------
# label / detection files
# ---------------------------------------------------------------------------


def _box_record(box: Box7, class_id: int) -> dict:
    rec = {name: getattr(box, name) for name in BOX_FIELDS}
    rec["class_id"] = int(class_id)
    return rec


def _parse_record(rec, where: str, need_score: bool):
    if not isinstance(rec, dict):
        raise LabelSchemaError(f"{where}: expected an object")
    allowed = set(BOX_FIELDS) | {"class_id", "num_points"} | ({"score"} if need_score else set())
    extra = sorted(set(rec) - allowed)
    if extra:
        raise LabelSchemaError(f"{where}.{extra[0]}: unknown field")
    vals = []
    for name in BOX_FIELDS:
        if name not in rec:
            raise LabelSchemaError(f"{where}.{name}: missing")
        v = rec[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise LabelSchemaError(f"{where}.{name}: expected a number, got {v!r}")
        vals.append(float(v))
    cid = rec.get("class_id")
    if isinstance(cid, bool) or not isinstance(cid, int) or cid not in (0, 1, 2):
        raise LabelSchemaError(f"{where}.class_id: expected 0, 1 or 2, got {cid!r}")
    try:
        box = Box7(*vals)
    except ValueError as exc:
        raise LabelSchemaError(f"{where}: {exc}") from None
    npts = rec.get("num_points")
    if npts is not None and (isinstance(npts, bool) or not isinstance(npts, int) or npts < 0):
        raise LabelSchemaError(f"{where}.num_points: expected a non-negative integer, got {npts!r}")
    if need_score:
        s = rec.get("score")
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not 0.0 <= s <= 1.0:
            raise LabelSchemaError(f"{where}.score: expected a number in [0, 1], got {s!r}")
        return Detection(box, cid, float(s))
    return LabeledBox(box, cid, npts)


def _load_doc(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise LabelSchemaError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(doc, dict):
        raise LabelSchemaError(f"{path}: top level must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise LabelSchemaError(f"{path}: format_version must be {FORMAT_VERSION}, got {doc.get('format_version')!r}")
    boxes = doc.get("boxes")
    if not isinstance(boxes, list):
        raise LabelSchemaError(f"{path}: boxes: expected a list")
    return doc, boxes


def read_labels(path) -> list[LabeledBox]:
    _, boxes = _load_doc(path)
    return [_parse_record(rec, f"boxes[{i}]", need_score=False) for i, rec in enumerate(boxes)]


def write_labels(path, labels, scene_id: str | None = None) -> None:
    recs = []
    for lb in labels:
        rec = _box_record(lb.box, lb.class_id)
        if lb.num_points_inside is not None:
            rec["num_points"] = int(lb.num_points_inside)
        recs.append(rec)
    doc = {"format_version": FORMAT_VERSION, "scene_id": scene_id, "boxes": recs}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_detections(path) -> list[Detection]:
    _, boxes = _load_doc(path)
    return [_parse_record(rec, f"boxes[{i}]", need_score=True) for i, rec in enumerate(boxes)]


def write_detections(path, dets, scene_id: str | None = None) -> None:
    recs = []
    for d in dets:
        rec = _box_record(d.box, d.class_id)
        rec["score"] = d.score
        recs.append(rec)
    doc = {"format_version": FORMAT_VERSION, "scene_id": scene_id, "boxes": recs}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def save_scene(directory, scene: Scene) -> tuple[Path, Path]:
    """Write ``<id>.bin`` and ``<id>.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path = directory / f"{scene.id}.bin"
    json_path = directory / f"{scene.id}.json"
    write_point_cloud(bin_path, scene.cloud, "bin")
    write_labels(json_path, scene.labels, scene_id=scene.id)
    return bin_path, json_path


def load_scene(bin_path, labels_path=None) -> Scene:
    bin_path = Path(bin_path)
    cloud = read_point_cloud(bin_path)
    if labels_path is None:
        cand = bin_path.with_suffix(".json")
        labels_path = cand if cand.exists() else None
    labels = read_labels(labels_path) if labels_path is not None else []
    return Scene(cloud, labels, bin_path.stem)


# ---------------------------------------------------------------------------
# geometry on clouds
# ---------------------------------------------------------------------------


def points_in_box_mask(xyz: np.ndarray, box: Box7) -> np.ndarray:
    """Closed-interval containment test in the box frame."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    dz = xyz[:, 2] - box.cz
    return (
        (np.abs(u) <= 0.5 * box.length)
        & (np.abs(v) <= 0.5 * box.width)
        & (np.abs(dz) <= 0.5 * box.height)
    )


def count_points_in_box(cloud: PointCloud, box: Box7) -> int:
    return int(np.count_nonzero(points_in_box_mask(cloud.xyz, box)))


def fill_point_counts(scene: Scene) -> Scene:
    for lb in scene.labels:
        lb.num_points_inside = count_points_in_box(scene.cloud, lb.box)
    return scene


def height_histogram(cloud_or_z, bin_width: float, z_range: tuple[float, float]) -> list[tuple[float, int]]:
    """Counts of point heights in half-open bins ``[lo + k*w, lo + (k+1)*w)``."""
    lo, hi = float(z_range[0]), float(z_range[1])
    if not bin_width > 0 or not lo < hi:
        raise ValueError("need bin_width > 0 and z_lo < z_hi")
    if isinstance(cloud_or_z, PointCloud):
        z = cloud_or_z.points[:, 2].astype(np.float64)
    else:
        z = np.asarray(cloud_or_z, dtype=np.float64).reshape(-1)
    n_bins = int(math.ceil((hi - lo) / bin_width - 1e-9))
    idx = np.floor((z - lo) / bin_width).astype(np.int64)
    ok = (z >= lo) & (z < hi) & (idx >= 0) & (idx < n_bins)
    counts = np.bincount(idx[ok], minlength=n_bins)
    centers = lo + (np.arange(n_bins) + 0.5) * bin_width
    return [(float(c), int(k)) for c, k in zip(centers, counts)]


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _sample_object_points(rng, box: Box7, n: int, cfg: SynthConfig) -> np.ndarray:
    l, w, h = box.length, box.width, box.height
    vw = cfg.vertical_face_weight
    # faces: +u, -u (area w*h), +v, -v (area l*h), top (l*w)
    weights = np.array([vw * w * h, vw * w * h, vw * l * h, vw * l * h, l * w])
    face = rng.choice(5, size=n, p=weights / weights.sum())
    a = rng.uniform(-0.5, 0.5, size=n)
    b = rng.uniform(-0.5, 0.5, size=n)
    one = np.ones(n)
    u = np.choose(face, [0.5 * l * one, -0.5 * l * one, a * l, a * l, a * l])
    v = np.choose(face, [a * w, a * w, 0.5 * w * one, -0.5 * w * one, b * w])
    z = np.choose(face, [b * h, b * h, b * h, b * h, 0.5 * h * one])
    local = np.stack([u, v, z], axis=1)
    local += rng.normal(0.0, cfg.surface_jitter, size=(n, 3))
    half = 0.999 * 0.5 * np.array([l, w, h])
    local = np.clip(local, -half, half)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    pts = np.empty((n, 4))
    pts[:, 0] = box.cx + c * local[:, 0] - s * local[:, 1]
    pts[:, 1] = box.cy + s * local[:, 0] + c * local[:, 1]
    pts[:, 2] = box.cz + local[:, 2]
    pts[:, 3] = rng.uniform(0.2, 1.0, size=n)
    return pts


def synth_scene(cfg: SynthConfig, scene_id: str | None = None) -> Scene:
    """Ground plane plus non-overlapping class-prior boxes with surface-sampled points."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    (x0, x1), (y0, y1) = cfg.x_extent, cfg.y_extent

    ground = np.empty((cfg.ground_points, 4))
    ground[:, 0] = rng.uniform(x0, x1, size=cfg.ground_points)
    ground[:, 1] = rng.uniform(y0, y1, size=cfg.ground_points)
    ground[:, 2] = rng.normal(cfg.ground_z_mean, cfg.ground_z_std, size=cfg.ground_points)
    ground[:, 3] = rng.uniform(0.0, 0.3, size=cfg.ground_points)

    placed: list[tuple[float, float, float]] = []  # (x, y, radius)
    labels: list[LabeledBox] = []
    chunks = [ground]
    for class_id, count in enumerate(cfg.object_counts):
        prior = np.asarray(cfg.size_priors[class_id], dtype=np.float64)
        lo_pts, hi_pts = cfg.points_per_object[class_id]
        for _ in range(count):
            size = prior * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter, size=3)
            yaw = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
            radius = 0.5 * math.hypot(size[0], size[1])
            for _attempt in range(1000):
                cx = rng.uniform(x0 + radius, x1 - radius)
                cy = rng.uniform(y0 + radius, y1 - radius)
                if all(math.hypot(cx - px, cy - py) > radius + pr + 0.3 for px, py, pr in placed):
                    break
            else:
                raise ValueError("could not place all objects without overlap; reduce object_counts")
            placed.append((cx, cy, radius))
            box = Box7(cx, cy, cfg.ground_z_mean + 0.5 * size[2], size[0], size[1], size[2], yaw)
            n = int(rng.integers(lo_pts, hi_pts + 1))
            chunks.append(_sample_object_points(rng, box, n, cfg))
            labels.append(LabeledBox(box, class_id))

    pts = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 4))
    pts = pts[rng.permutation(pts.shape[0])]
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    cloud = PointCloud(pts.astype(np.float32))
    scene = Scene(cloud, labels, scene_id if scene_id is not None else f"synth_{cfg.seed:06d}")
    return fill_point_counts(scene)


def scene_files(directory) -> list[Path]:
    """Sorted ``*.bin`` files of a scene directory."""
    return sorted(Path(directory).glob("*.bin"), key=lambda p: p.name)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

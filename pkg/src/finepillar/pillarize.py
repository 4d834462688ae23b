"""Sub-pillar voxelization, height-aware position encoding and occupancy statistics.

A pillar over BEV cell ``(ix, iy)`` is cut into ``n_sub`` equal vertical slices
covering ``z_range``; every in-range point lands in exactly one ``(ix, iy, h)``
sub-pillar. Only occupied sub-pillars are stored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import PointCloud

# point feature channel layout produced by assign_pillars
POINT_CHANNELS = ("x", "y", "z", "intensity", "x_c", "y_c", "z_c", "x_p", "y_p", "z_p")


def _cell_count(lo: float, hi: float, size: float, name: str) -> int:
    n = (hi - lo) / size
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-6:
        raise ValueError(f"{name}: extent {hi - lo} is not an integer multiple of cell size {size}")
    return k


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-2.0, 4.0)
    grid_size: float = 0.16
    n_sub: int = 6
    max_points_per_subpillar: int = 32
    max_occupied_subpillars: int = 60000

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: need lo < hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not self.grid_size > 0:
            raise ValueError("grid_size must be > 0")
        if int(self.n_sub) != self.n_sub or self.n_sub < 1:
            raise ValueError("n_sub must be a positive integer")
        if self.max_points_per_subpillar < 1 or self.max_occupied_subpillars < 1:
            raise ValueError("truncation limits must be positive")
        _cell_count(*self.x_range, self.grid_size, "x_range")
        _cell_count(*self.y_range, self.grid_size, "y_range")

    @property
    def nx(self) -> int:
        return _cell_count(*self.x_range, self.grid_size, "x_range")

    @property
    def ny(self) -> int:
        return _cell_count(*self.y_range, self.grid_size, "y_range")

    @property
    def dz(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.n_sub

    def replace(self, **kw) -> "GridConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return GridConfig(**d)


@dataclass(frozen=True)
class HPEConfig:
    L: int = 4
    z_scale: float = 6.0
    enabled: bool = True

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ValueError("HPE L must be a positive integer")
        if not self.z_scale > 0:
            raise ValueError("HPE z_scale must be > 0")

    @property
    def channels(self) -> int:
        return 4 * self.L if self.enabled else 0


@dataclass
class SubPillarBatch:
    """Occupied sub-pillars in first-seen order.

    ``point_features`` holds the retained points of all cells back to back, cell
    ``k`` owning rows ``offsets[k]:offsets[k+1]``; channels follow
    ``POINT_CHANNELS``.
    """

    coords: np.ndarray  # (M, 3) int64: ix, iy, h
    counts: np.ndarray  # (M,) int64
    offsets: np.ndarray  # (M + 1,) int64
    point_features: np.ndarray  # (P, 10) float64
    z_mean: np.ndarray  # (M,)
    z_center: np.ndarray  # (M,)
    grid: GridConfig
    n_dropped_range: int = 0
    n_truncated: int = 0

    @property
    def num_cells(self) -> int:
        return int(self.coords.shape[0])

    @property
    def num_points(self) -> int:
        return int(self.point_features.shape[0])

    def cell_points(self, k: int) -> np.ndarray:
        return self.point_features[self.offsets[k] : self.offsets[k + 1]]

    @property
    def cell_index(self) -> np.ndarray:
        """Cell id of every retained point row."""
        return np.repeat(np.arange(self.num_cells), self.counts)


def _cell_indices(xyz: np.ndarray, grid: GridConfig):
    (x0, x1), (y0, y1), (z0, z1) = grid.x_range, grid.y_range, grid.z_range
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z <= z1)
    ix = np.clip(np.floor((x - x0) / grid.grid_size), 0, grid.nx - 1).astype(np.int64)
    iy = np.clip(np.floor((y - y0) / grid.grid_size), 0, grid.ny - 1).astype(np.int64)
    # z == z_hi goes to the top slice
    h = np.clip(np.floor((z - z0) / grid.dz), 0, grid.n_sub - 1).astype(np.int64)
    return inside, ix, iy, h


def assign_pillars(cloud: PointCloud, grid: GridConfig) -> SubPillarBatch:
    """Bucket points into sub-pillars and compute the 10 augmented point channels.

    Truncation keeps the first ``max_points_per_subpillar`` points of a cell and
    the first ``max_occupied_subpillars`` cells, both in input order.
    """
    xyz = cloud.points[:, :3].astype(np.float64)
    inten = cloud.points[:, 3].astype(np.float64)
    inside, ix, iy, h = _cell_indices(xyz, grid)
    n_dropped = int(cloud.count - np.count_nonzero(inside))

    src = np.flatnonzero(inside)
    key = (iy[src] * grid.nx + ix[src]) * grid.n_sub + h[src]
    if src.size == 0:
        return _empty_batch(grid, n_dropped)

    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    # rank cells by first appearance in the input
    cell_rank = np.empty(uniq.size, dtype=np.int64)
    cell_rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
    cell_of_point = cell_rank[inverse.reshape(-1)]

    order = np.argsort(cell_of_point, kind="stable")
    sorted_cell = cell_of_point[order]
    starts = np.searchsorted(sorted_cell, np.arange(uniq.size), side="left")
    rank_in_cell = np.arange(order.size) - starts[sorted_cell]
    keep = (rank_in_cell < grid.max_points_per_subpillar) & (sorted_cell < grid.max_occupied_subpillars)
    n_truncated = int(order.size - np.count_nonzero(keep))

    kept_src = src[order[keep]]
    kept_cell = sorted_cell[keep]
    n_cells = int(min(uniq.size, grid.max_occupied_subpillars))
    counts = np.bincount(kept_cell, minlength=n_cells).astype(np.int64)
    offsets = np.zeros(n_cells + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    cell_keys = np.empty(uniq.size, dtype=np.int64)
    cell_keys[cell_rank] = uniq
    cell_keys = cell_keys[:n_cells]
    ch = cell_keys % grid.n_sub
    cxy = cell_keys // grid.n_sub
    cix = cxy % grid.nx
    ciy = cxy // grid.nx
    coords = np.stack([cix, ciy, ch], axis=1)

    pts = xyz[kept_src]
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, kept_cell, pts)
    means = sums / counts[:, None]
    centers = np.stack(
        [
            grid.x_range[0] + (cix + 0.5) * grid.grid_size,
            grid.y_range[0] + (ciy + 0.5) * grid.grid_size,
            grid.z_range[0] + (ch + 0.5) * grid.dz,
        ],
        axis=1,
    )
    feats = np.empty((kept_src.size, len(POINT_CHANNELS)))
    feats[:, 0:3] = pts
    feats[:, 3] = inten[kept_src]
    feats[:, 4:7] = pts - means[kept_cell]
    feats[:, 7:10] = pts - centers[kept_cell]
    return SubPillarBatch(
        coords=coords,
        counts=counts,
        offsets=offsets,
        point_features=feats,
        z_mean=means[:, 2].copy(),
        z_center=centers[:, 2].copy(),
        grid=grid,
        n_dropped_range=n_dropped,
        n_truncated=n_truncated,
    )


def _empty_batch(grid: GridConfig, n_dropped: int) -> SubPillarBatch:
    return SubPillarBatch(
        coords=np.zeros((0, 3), dtype=np.int64),
        counts=np.zeros(0, dtype=np.int64),
        offsets=np.zeros(1, dtype=np.int64),
        point_features=np.zeros((0, len(POINT_CHANNELS))),
        z_mean=np.zeros(0),
        z_center=np.zeros(0),
        grid=grid,
        n_dropped_range=n_dropped,
        n_truncated=0,
    )


def height_position_encoding(z_m, z_p_center, cfg: HPEConfig) -> np.ndarray:
    """Sinusoidal height code of a sub-pillar.

    For ``z`` in ``(z_m / z_scale, z_p_center / z_scale)`` emits
    ``sin(2**i * pi * z), cos(2**i * pi * z)`` for ``i = 0 .. L-1``; all
    frequencies of ``z_m`` come first. Vectorized over leading dimensions, the
    result has a trailing axis of length ``4 * L``.
    """
    zs = np.stack(
        [np.asarray(z_m, dtype=np.float64), np.asarray(z_p_center, dtype=np.float64)], axis=-1
    ) / cfg.z_scale
    freqs = np.pi * np.exp2(np.arange(cfg.L, dtype=np.float64))
    ang = zs[..., :, None] * freqs  # (..., 2, L)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 2, L, 2)
    return out.reshape(*zs.shape[:-1], 4 * cfg.L)


@dataclass(frozen=True)
class SparsityRow:
    n_sub: int
    grid_size: float
    total_cells: int
    occupied_cells: int

    @property
    def occupancy_ratio(self) -> float:
        return self.occupied_cells / self.total_cells


def occupied_count(cloud: PointCloud, grid: GridConfig) -> int:
    """Number of occupied sub-pillars with truncation disabled."""
    inside, ix, iy, h = _cell_indices(cloud.points[:, :3].astype(np.float64), grid)
    key = (iy[inside] * grid.nx + ix[inside]) * grid.n_sub + h[inside]
    return int(np.unique(key).size)


def sparsity_stats(cloud: PointCloud, n_sub_values, grid_sizes, base: GridConfig | None = None) -> list[SparsityRow]:
    """Total vs occupied sub-pillar counts over a sweep of ``n_sub`` and ``grid_size``."""
    base = base or GridConfig()
    rows = []
    for gs in grid_sizes:
        for nh in n_sub_values:
            g = base.replace(grid_size=float(gs), n_sub=int(nh))
            total = g.nx * g.ny * g.n_sub
            rows.append(SparsityRow(int(nh), float(gs), total, occupied_count(cloud, g)))
    return rows

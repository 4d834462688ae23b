"""Pillar feature extractor: two VFE layers per sub-pillar, height code, scatter to BEV."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .pillarize import POINT_CHANNELS, GridConfig, HPEConfig, SubPillarBatch, height_position_encoding


@dataclass(frozen=True)
class PFEConfig:
    in_channels: int = len(POINT_CHANNELS)
    vfe1_out: int = 32
    vfe2_out: int = 64
    hpe: HPEConfig = field(default_factory=HPEConfig)

    def __post_init__(self):
        if min(self.in_channels, self.vfe1_out, self.vfe2_out) < 1:
            raise ValueError("PFE channel counts must be >= 1")
        if self.vfe1_out % 2:
            raise ValueError("vfe1_out must be even (half point-wise, half pooled)")

    @property
    def cell_channels(self) -> int:
        """Channels per sub-pillar after the height code is attached."""
        return self.vfe2_out + self.hpe.channels


def pfe_weight_shapes(cfg: PFEConfig, prefix: str = "pfe") -> dict:
    half = cfg.vfe1_out // 2
    return {
        f"{prefix}.vfe1.linear.weight": (cfg.in_channels, half),
        f"{prefix}.vfe1.norm.scale": (half,),
        f"{prefix}.vfe1.norm.shift": (half,),
        f"{prefix}.vfe2.linear.weight": (cfg.vfe1_out, cfg.vfe2_out),
        f"{prefix}.vfe2.norm.scale": (cfg.vfe2_out,),
        f"{prefix}.vfe2.norm.shift": (cfg.vfe2_out,),
    }


def _dense(x, weights, prefix):
    y = nn.linear(x, nn._w(weights, f"{prefix}.linear.weight"))
    y = nn.norm_affine(y, nn._w(weights, f"{prefix}.norm.scale"), nn._w(weights, f"{prefix}.norm.shift"))
    return nn.relu(y)


def vfe_forward(batch: SubPillarBatch, weights, prefix: str = "pfe", dtype=np.float32) -> np.ndarray:
    """VoxelNet-style VFE x2; returns ``(num_cells, vfe2_out)`` cell features.

    Layer 1 is point-wise dense, cell-wise max, and the max concatenated back on
    each point; layer 2 is point-wise dense followed by the cell-wise max.
    """
    w2 = nn._w(weights, f"{prefix}.vfe2.linear.weight")
    if batch.num_cells == 0:
        return np.zeros((0, w2.shape[1]), dtype=dtype)
    starts = batch.offsets[:-1]
    cell = batch.cell_index
    h1 = _dense(batch.point_features.astype(dtype), weights, f"{prefix}.vfe1")
    pooled = np.maximum.reduceat(h1, starts, axis=0)
    h1 = np.concatenate([h1, pooled[cell]], axis=1)
    h2 = _dense(h1, weights, f"{prefix}.vfe2")
    return np.maximum.reduceat(h2, starts, axis=0)


def attach_hpe(cell_features: np.ndarray, batch: SubPillarBatch, hpe: HPEConfig) -> np.ndarray:
    if not hpe.enabled:
        return cell_features
    code = height_position_encoding(batch.z_mean, batch.z_center, hpe).astype(cell_features.dtype)
    return np.concatenate([cell_features, code], axis=1)


class ScatterIndexError(RuntimeError):
    """A batch cell lies outside the grid (broken batch invariant)."""


def scatter_to_pseudo_image(batch: SubPillarBatch, cell_features: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Dense ``(1, n_sub * C, ny, nx)`` image; sub-pillar ``h`` owns channels ``[h*C, (h+1)*C)``."""
    m, c = cell_features.shape if cell_features.ndim == 2 else (0, 0)
    if m != batch.num_cells:
        raise ValueError(f"{m} feature rows for {batch.num_cells} cells")
    canvas = np.zeros((grid.n_sub, c, grid.ny, grid.nx), dtype=cell_features.dtype)
    if m:
        ix, iy, h = batch.coords[:, 0], batch.coords[:, 1], batch.coords[:, 2]
        if (
            ix.min() < 0 or ix.max() >= grid.nx or iy.min() < 0 or iy.max() >= grid.ny
            or h.min() < 0 or h.max() >= grid.n_sub
        ):
            raise ScatterIndexError("sub-pillar index outside the grid")
        canvas[h, :, iy, ix] = cell_features
    return canvas.reshape(1, grid.n_sub * c, grid.ny, grid.nx)


def build_pseudo_image(batch: SubPillarBatch, weights, cfg: PFEConfig, dtype=np.float32) -> np.ndarray:
    feats = vfe_forward(batch, weights, dtype=dtype)
    feats = attach_hpe(feats, batch, cfg.hpe)
    if batch.num_cells == 0:
        feats = np.zeros((0, cfg.cell_channels), dtype=dtype)
    return scatter_to_pseudo_image(batch, feats, batch.grid)

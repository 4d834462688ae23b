"""End-to-end inference: points -> sub-pillars -> pseudo-image -> SCB -> head -> detections."""
from __future__ import annotations

import time
from collections import OrderedDict

import numpy as np

from . import nn
from .backbone import scb_forward, scb_weight_shapes
from .config import PipelineConfig
from .head import decode, head_forward, head_init_overrides, head_weight_shapes
from .pfe import build_pseudo_image, pfe_weight_shapes
from .pillarize import assign_pillars

STAGES = ("pillarize", "pfe", "backbone", "head", "decode")


def weight_shapes(cfg: PipelineConfig) -> dict:
    shapes = {}
    shapes.update(pfe_weight_shapes(cfg.pfe))
    pseudo_channels = cfg.grid.n_sub * cfg.pfe.cell_channels
    shapes.update(scb_weight_shapes(cfg.scb, pseudo_channels))
    shapes.update(head_weight_shapes(cfg.head, cfg.scb.out_channels))
    return shapes


def init_pipeline_weights(cfg: PipelineConfig, seed: int | None = None) -> nn.WeightStore:
    return nn.init_weights(weight_shapes(cfg), cfg.seed if seed is None else seed, head_init_overrides())


def check_weights(cfg: PipelineConfig, weights) -> None:
    for name, shape in weight_shapes(cfg).items():
        if name not in weights:
            raise nn.MissingWeightError(f"missing weight {name!r}")
        if tuple(weights[name].shape) != tuple(shape):
            raise ValueError(f"weight {name!r} has shape {tuple(weights[name].shape)}, expected {tuple(shape)}")


class Detector:
    """Immutable after construction; ``run`` may be called from several threads."""

    def __init__(self, cfg: PipelineConfig, weights):
        check_weights(cfg, weights)
        self.cfg = cfg
        dt = cfg.np_dtype
        self.weights = nn.WeightStore({k: np.asarray(v, dtype=dt) for k, v in weights.items()})

    def pseudo_image(self, cloud) -> np.ndarray:
        batch = assign_pillars(cloud, self.cfg.grid)
        return build_pseudo_image(batch, self.weights, self.cfg.pfe, dtype=self.cfg.np_dtype)

    def run(self, cloud):
        """Returns ``(detections, timings)``; timings are seconds per stage.

        A cloud with no point inside the grid yields no detections.
        """
        t = OrderedDict()
        t0 = time.perf_counter()
        batch = assign_pillars(cloud, self.cfg.grid)
        t1 = time.perf_counter()
        if batch.num_cells == 0:
            # nothing occupied: a bias-only map has no peaks worth reporting
            t["pillarize"] = t1 - t0
            t.update((name, 0.0) for name in STAGES[1:])
            t["total"] = t1 - t0
            return [], t
        pseudo = build_pseudo_image(batch, self.weights, self.cfg.pfe, dtype=self.cfg.np_dtype)
        t2 = time.perf_counter()
        feats = scb_forward(pseudo, self.cfg.scb, self.weights)
        t3 = time.perf_counter()
        outs = head_forward(feats, self.weights)
        t4 = time.perf_counter()
        dets = decode(outs, self.cfg.grid, self.cfg.decode)
        t5 = time.perf_counter()
        for name, a, b in zip(STAGES, (t0, t1, t2, t3, t4), (t1, t2, t3, t4, t5)):
            t[name] = b - a
        t["total"] = t5 - t0
        return dets, t

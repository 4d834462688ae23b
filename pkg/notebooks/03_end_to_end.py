# %% [markdown]
# # End to end: points in, boxes and scores out
#
# The weights here are random, so the detections are not meaningful. What
# this script shows is the plumbing: stage timings on a full-size scene, and
# an encode/decode round trip that turns ground-truth labels into head
# outputs and back, which the evaluator should score as perfect. The last
# part degrades those outputs to see how AP and APH react.
#
# Run with `python3 notebooks/03_end_to_end.py` (about 15 s on one core).

# %%
import math

import numpy as np

from finepillar.config import PipelineConfig
from finepillar.geometry import Box7, Detection
from finepillar.head import decode, inverse_head_outputs, render_targets
from finepillar.metrics import evaluate
from finepillar.pipeline import Detector, init_pipeline_weights
from finepillar.scene import SynthConfig, fill_point_counts, synth_scene

cfg = PipelineConfig()
print(f"grid {cfg.grid.nx} x {cfg.grid.ny} cells of {cfg.grid.grid_size} m, {cfg.grid.n_sub} height slices")
print(f"backbone preset {cfg.scb_preset}, output stride {cfg.scb.output_stride}")

# %% [markdown]
# ## Timed inference with random weights

# %%
detector = Detector(cfg, init_pipeline_weights(cfg, 0))
scene = synth_scene(SynthConfig(seed=7))
dets, timings = detector.run(scene.cloud)
print(f"{len(scene.cloud.points)} points -> {len(dets)} detections")
for stage, sec in timings.items():
    print(f"  {stage:<10} {sec:7.3f} s")

# %% [markdown]
# ## Round trip through the head encoding
#
# Rendering labels into heatmap and regression targets and reading them back
# as logits recovers every box that lands on its own head cell.

# %%
scenes = [fill_point_counts(synth_scene(SynthConfig(seed=s))) for s in range(10)]
pairs = []
for sc in scenes:
    targets = render_targets(sc.labels, cfg.grid, cfg.decode.output_stride)
    pairs.append((decode(inverse_head_outputs(targets), cfg.grid, cfg.decode), sc.labels))
res = evaluate(pairs)
print(res.summary())

# %% [markdown]
# ## Degrading the decoded boxes
#
# Position noise hurts AP through the IoU threshold. Heading noise also costs
# AP, since a turned box overlaps its label less, and it pulls APH down
# further because each match is weighted by its heading error. Vehicles use
# the stricter 0.7 threshold.

# %%
rng = np.random.default_rng(0)


def perturb(d, xy_std, yaw_std):
    b = d.box
    box = Box7(b.cx + rng.normal(0, xy_std), b.cy + rng.normal(0, xy_std), b.cz, b.length, b.width, b.height, b.yaw + rng.normal(0, yaw_std))
    return Detection(box, d.class_id, d.score)


print(f"{'xy std':>7} {'yaw std':>8} {'L1 mAP':>8} {'L1 mAPH':>8}")
for xy_std, yaw_std in ((0.0, 0.0), (0.1, 0.0), (0.3, 0.0), (0.0, 0.5), (0.0, math.pi / 2)):
    noisy = [([perturb(d, xy_std, yaw_std) for d in dets], labels) for dets, labels in pairs]
    r = evaluate(noisy)
    print(f"{xy_std:>7.2f} {yaw_std:>8.2f} {100 * r.mean(1, 'ap'):>8.2f} {100 * r.mean(1, 'aph'):>8.2f}")

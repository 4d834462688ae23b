import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finepillar import nn
from finepillar.geometry import Box7, heading_error
from finepillar.head import (
    MIN_RADIUS,
    NUM_REG,
    DecodeConfig,
    HeadConfig,
    HeadOutputs,
    decode,
    focal_loss,
    gaussian_radius,
    head_forward,
    head_init_overrides,
    head_weight_shapes,
    inverse_head_outputs,
    l1_reg_loss,
    local_maxima,
    rectify,
    render_targets,
)
from finepillar.pillarize import GridConfig
from finepillar.scene import LabeledBox, SynthConfig, synth_scene
from oracles import naive_conv2d

GRID = GridConfig((-6.4, 6.4), (-6.4, 6.4), (-2.0, 4.0), 0.16, 6)
STRIDE = 2


def outputs_from(heat, reg=None, iou=None):
    K, H, W = heat.shape
    reg = np.zeros((NUM_REG, H, W)) if reg is None else reg
    iou = np.ones((1, 1, H, W)) if iou is None else iou
    return HeadOutputs(heat[None], reg[None, 0:2], reg[None, 2:3], reg[None, 3:6], reg[None, 6:8], iou)


def label(cx, cy, cls=0, yaw=0.3, size=(4.0, 1.8, 1.5)):
    return LabeledBox(Box7(cx, cy, 0.75, *size, yaw), cls)


# ---- forward ----------------------------------------------------------------


def test_weight_shapes():
    shapes = head_weight_shapes(HeadConfig(num_classes=3, hidden_channels=8), 12)
    assert shapes["head.heatmap.out.weight"] == (3, 8, 1, 1)
    assert shapes["head.offset.out.weight"] == (2, 8, 1, 1)
    assert shapes["head.size.out.bias"] == (3,)
    assert shapes["head.iou.block.conv.weight"][1] == 12
    assert head_init_overrides() == {"head.heatmap.out.bias": pytest.approx(-2.19)}


def test_forward_shapes(rng):
    cfg = HeadConfig(hidden_channels=8)
    w = nn.init_weights(head_weight_shapes(cfg, 6), 0)
    out = head_forward(rng.normal(size=(1, 6, 10, 7)).astype(np.float32), w)
    for name, c in [("heatmap", 3), ("offset", 2), ("h_g", 1), ("size", 3), ("yaw", 2), ("iou", 1)]:
        assert getattr(out, name).shape == (1, c, 10, 7)


def test_zero_weights_give_biases(rng):
    cfg = HeadConfig(hidden_channels=4)
    w = {k: np.zeros(s, dtype=np.float32) for k, s in head_weight_shapes(cfg, 5).items()}
    w["head.size.out.bias"] = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    out = head_forward(rng.normal(size=(1, 5, 6, 6)).astype(np.float32), w)
    assert np.all(out.size[0, :, 2, 3] == [1.0, 2.0, 3.0])
    assert not out.heatmap.any()


def test_forward_vs_op_composition(rng):
    cfg = HeadConfig(num_classes=2, hidden_channels=4)
    w = nn.init_weights(head_weight_shapes(cfg, 3), 7)
    for k in w:
        if k.endswith(".scale") or k.endswith(".shift"):
            w[k] = rng.uniform(0.5, 1.5, w[k].shape).astype(np.float32)
    x = rng.normal(size=(1, 3, 5, 6))
    out = head_forward(x, {k: v.astype(np.float64) for k, v in w.items()})
    for name in ("heatmap", "yaw"):
        p = f"head.{name}"
        y = naive_conv2d(x, w[f"{p}.block.conv.weight"].astype(float), None, 1, 1)
        y = y * w[f"{p}.block.norm.scale"].reshape(-1, 1, 1) + w[f"{p}.block.norm.shift"].reshape(-1, 1, 1)
        y = np.maximum(y, 0.0)
        ref = naive_conv2d(y, w[f"{p}.out.weight"].astype(float), w[f"{p}.out.bias"].astype(float), 1, 0)
        assert np.allclose(getattr(out, name), ref, rtol=1e-5, atol=1e-6)


def test_outputs_validation():
    with pytest.raises(ValueError, match="shape"):
        HeadOutputs(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 4, 5)), np.zeros((1, 1, 4, 4)),
                    np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 4, 4)), np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError, match="finite"):
        outputs_from(np.full((1, 4, 4), np.nan))


def test_missing_weight(rng):
    w = nn.init_weights(head_weight_shapes(HeadConfig(hidden_channels=4), 3), 0)
    del w["head.yaw.out.bias"]
    with pytest.raises(nn.MissingWeightError, match="head.yaw.out.bias"):
        head_forward(rng.normal(size=(1, 3, 4, 4)), w)


# ---- targets ------------------------------------------------------------------


def test_gaussian_radius_vs_root_solver():
    # the de facto CenterNet radius: min over a * (larger root) of a x^2 - b x + c for three quadratics
    o = 0.7
    for h, w in [(10.0, 4.0), (3.0, 3.0), (25.0, 12.0), (2.5, 5.0)]:
        quads = [
            (1.0, -(h + w), w * h * (1 - o) / (1 + o)),
            (4.0, -2 * (h + w), (1 - o) * w * h),
            (4 * o, 2 * o * (h + w), (o - 1) * w * h),
        ]
        ref = min(np.roots(q).real.max() * q[0] for q in quads)
        assert gaussian_radius(h, w) == pytest.approx(ref, rel=1e-12)


def test_render_peak_at_cell_center():
    cell = GRID.grid_size * STRIDE
    cx = GRID.x_range[0] + 12.5 * cell
    cy = GRID.y_range[0] + 20.5 * cell
    t = render_targets([label(cx, cy, cls=1)], GRID, STRIDE)
    assert t.heatmap[1, 20, 12] == 1.0
    assert t.heatmap[1].max() == 1.0 and not t.heatmap[[0, 2]].any()
    assert t.mask.sum() == 1 and t.mask[20, 12]
    assert t.regression[0:2, 20, 12] == pytest.approx([0.0, 0.0], abs=1e-12)
    assert t.regression[3:6, 20, 12] == pytest.approx(np.log([4.0, 1.8, 1.5]))
    assert t.centers == [(1, 20, 12)]


def test_render_empty():
    t = render_targets([], GRID, STRIDE)
    assert t.heatmap.shape == (3, 40, 40) and not t.heatmap.any()
    assert not t.regression.any() and not t.mask.any() and t.n_skipped == 0


def test_render_two_distant_disjoint():
    t = render_targets([label(-4.0, -4.0), label(4.0, 4.0)], GRID, STRIDE)
    assert t.mask.sum() == 2
    cell = GRID.grid_size * STRIDE
    r = max(MIN_RADIUS, int(gaussian_radius(4.0 / cell, 1.8 / cell)))
    assert 8.0 / cell > 2 * r + 1  # centers farther apart than two radii
    nz = np.argwhere(t.heatmap[0] > 0)
    near_a = np.abs(nz - t.centers[0][1:]).max(axis=1) <= r
    near_b = np.abs(nz - t.centers[1][1:]).max(axis=1) <= r
    assert np.all(near_a ^ near_b)


def test_render_overlap_takes_max():
    one = render_targets([label(0.0, 0.0)], GRID, STRIDE).heatmap
    two = render_targets([label(0.0, 0.0), label(0.9, 0.0)], GRID, STRIDE).heatmap
    other = render_targets([label(0.9, 0.0)], GRID, STRIDE).heatmap
    assert np.array_equal(two, np.maximum(one, other))


def test_render_skips_out_of_grid():
    t = render_targets([label(100.0, 0.0), label(0.0, 0.0)], GRID, STRIDE)
    assert t.n_skipped == 1 and t.mask.sum() == 1


# ---- losses -------------------------------------------------------------------


def test_focal_single_positive_half():
    assert focal_loss(np.zeros((1, 1, 1)), np.ones((1, 1, 1))) == pytest.approx(-(0.5**2) * math.log(0.5), abs=1e-12)
    assert focal_loss(np.zeros((1, 1, 1)), np.ones((1, 1, 1))) == pytest.approx(0.1733, abs=5e-5)


def test_focal_perfect_limit():
    t = np.zeros((2, 6, 6))
    t[0, 2, 3] = t[1, 4, 1] = 1.0
    pred = np.where(t == 1.0, 60.0, -60.0)
    loss = focal_loss(pred, t)
    assert 0.0 < loss < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_focal_nonnegative_and_permutation(seed):
    r = np.random.default_rng(seed)
    t = r.uniform(0, 1, (2, 5, 5)) ** 3
    t[r.integers(0, 2), r.integers(0, 5), r.integers(0, 5)] = 1.0
    pred = r.normal(0, 3, t.shape)
    loss = focal_loss(pred, t)
    assert loss >= 0.0
    perm = r.permutation(t.size)
    assert focal_loss(pred.reshape(-1)[perm], t.reshape(-1)[perm]) == pytest.approx(loss, rel=1e-12)


def test_focal_shape_mismatch():
    with pytest.raises(ValueError):
        focal_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_l1_examples(rng):
    reg = rng.normal(size=(NUM_REG, 4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    out = outputs_from(np.zeros((3, 4, 4)), reg.copy())
    assert l1_reg_loss(out, reg, mask) == 0.0
    mask[1, 2] = True
    assert l1_reg_loss(out, reg, mask) == 0.0
    off = reg.copy()
    off[4, 1, 2] += 0.5
    assert l1_reg_loss(outputs_from(np.zeros((3, 4, 4)), off), reg, mask) == pytest.approx(0.5 / 8)


# ---- decoding -------------------------------------------------------------------


def test_local_maxima_ties_kept():
    p = np.zeros((1, 3, 4))
    p[0, 1, 1] = p[0, 1, 2] = 0.7
    m = local_maxima(p)
    assert m[0, 1, 1] and m[0, 1, 2]
    assert not m[0, 0, 0]


def test_beta_zero_score_is_p():
    heat = np.full((3, 40, 40), -10.0)
    heat[0, 10, 10] = 1.3
    iou = np.full((1, 1, 40, 40), -0.4)
    dets = decode(outputs_from(heat, iou=iou), GRID, DecodeConfig(beta=(0.0, 0.0, 0.0)))
    assert len(dets) == 1
    assert dets[0].score == 1.0 / (1.0 + math.exp(-1.3))


def test_beta_half_rectifies():
    heat = np.full((3, 40, 40), -10.0)
    heat[0, 10, 10] = 1.3
    iou = np.full((1, 1, 40, 40), 0.2)
    dets = decode(outputs_from(heat, iou=iou), GRID, DecodeConfig())
    p = 1.0 / (1.0 + math.exp(-1.3))
    assert dets[0].score == pytest.approx(math.sqrt(p * 0.6), rel=1e-12)


def test_adjacent_peaks_collapse_by_nms():
    heat = np.full((3, 40, 40), -10.0)
    heat[0, 10, 10] = math.log(0.9 / 0.1)
    heat[0, 10, 12] = math.log(0.8 / 0.2)
    reg = np.zeros((NUM_REG, 40, 40))
    reg[3:6] = np.log([[[4.0]], [[1.8]], [[1.5]]])
    reg[7] = 1.0
    reg[0, 10, 12] = -2.0  # decodes onto the same center as (10, 10)
    dets = decode(outputs_from(heat, reg), GRID, DecodeConfig(beta=(0.0, 0.0, 0.0)))
    assert len(dets) == 1 and dets[0].score == pytest.approx(0.9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20))
def test_decode_top_k_and_valid_boxes(seed, k):
    r = np.random.default_rng(seed)
    reg = r.normal(0, 3, (NUM_REG, 20, 20))
    out = outputs_from(r.normal(0, 2, (3, 20, 20)), reg, r.normal(0, 1, (1, 1, 20, 20)))
    dets = decode(out, GridConfig((-3.2, 3.2), (-3.2, 3.2), (-2.0, 4.0), 0.16, 2), DecodeConfig(top_k=k))
    assert len(dets) <= k
    for d in dets:
        assert d.box.length > 0 and d.box.width > 0 and d.box.height > 0
        assert 0.0 <= d.score <= 1.0


def test_decode_empty_below_threshold():
    assert decode(outputs_from(np.full((3, 8, 8), -10.0)), GRID, DecodeConfig()) == []


def test_decode_config_validation():
    for kw in [{"top_k": 0}, {"score_threshold": 1.0}, {"nms_threshold": 0.0}, {"beta": (0.5, 1.5, 0.5)}]:
        with pytest.raises(ValueError):
            DecodeConfig(**kw)


@given(
    st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(0.0, 1.0)
)
def test_rectify_monotone(p1, p2, u1, u2, beta):
    (pa, pb), (ua, ub) = sorted((p1, p2)), sorted((u1, u2))
    assert rectify(pa, ua, beta) <= rectify(pb, ua, beta)
    assert rectify(pa, ua, beta) <= rectify(pa, ub, beta)


def round_trip_errors(scene, grid):
    t = render_targets(scene, grid, STRIDE)
    dets = decode(inverse_head_outputs(t), grid, DecodeConfig(beta=(0.0, 0.0, 0.0), output_stride=STRIDE))
    rendered = [lb for lb in scene.labels if grid.x_range[0] <= lb.box.cx < grid.x_range[1] and grid.y_range[0] <= lb.box.cy < grid.y_range[1]]
    assert len(dets) == len(rendered)
    worst_m = worst_rad = 0.0
    for lb in rendered:
        g = lb.box.to_array()
        cands = [d for d in dets if d.class_id == lb.class_id]
        d = min(cands, key=lambda d: np.abs(d.box.to_array()[:6] - g[:6]).max())
        b = d.box.to_array()
        worst_m = max(worst_m, np.abs(b[:6] - g[:6]).max())
        worst_rad = max(worst_rad, float(heading_error(b[6], g[6])))
        assert abs(d.score - 1.0) < 1e-12
    return worst_m, worst_rad


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(seed):
    scene = synth_scene(SynthConfig(seed=seed, ground_points=0))
    m, rad = round_trip_errors(scene, GridConfig())
    assert m <= 1e-5 and rad <= 1e-5

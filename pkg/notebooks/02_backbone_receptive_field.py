# %% [markdown]
# # DFSA backbone: receptive field and attention
#
# Each module has a large branch, a spatial attention gate and a few dense
# branches that work at coarser scales. This script prints the theoretical
# receptive field of every preset, checks how it reacts to extra blocks,
# and runs one module on a small sparse map to show the attention map.
#
# Run with `python3 notebooks/02_backbone_receptive_field.py`.

# %%
import dataclasses

import numpy as np

from finepillar import nn
from finepillar.backbone import PRESETS, SCBConfig, branch_receptive_fields, dfsa_parts, dfsa_weight_shapes, preset, receptive_field

# %% [markdown]
# ## Receptive field per preset

# %%
print(f"{'preset':<10} {'branch RFs':<14} {'module RF':>9} {'SCB RF':>7}")
for name in PRESETS:
    m = preset(name)
    print(f"{name:<10} {str(branch_receptive_fields(m)):<14} {receptive_field(m):>9} {receptive_field(SCBConfig.from_preset(name)):>7}")

# %% [markdown]
# ## One more block per branch
#
# The module field is set by its deepest path. A block added to the coarsest
# branch widens it; a block added to a shallower branch often does not,
# because that branch stays narrower than the deepest one.

# %%
for name in PRESETS:
    m = preset(name)
    base = receptive_field(SCBConfig(modules=(m, m)))
    for i in range(len(m.blocks)):
        blocks = list(m.blocks)
        blocks[i] += 1
        if any(a > b for a, b in zip(blocks, blocks[1:])):
            print(f"{name}: bumping N_{i + 1} breaks the nondecreasing block order, skipped")
            continue
        bumped = dataclasses.replace(m, blocks=tuple(blocks))
        rf = receptive_field(SCBConfig(modules=(bumped, bumped)))
        print(f"{name}: N_{i + 1} {m.blocks[i]} -> {blocks[i]}: RF {base} -> {rf}")

# %% [markdown]
# ## Attention on a sparse input
#
# With random weights the gate is just a smooth function of the channel
# pooled map. Where the input is zero the gate sits at a constant level.

# %%
rng = np.random.default_rng(0)
m = preset("s24_n35", branch_channels=(8, 8), large_channels=8, fused_channels=16)
cin = 4
weights = nn.init_weights(dfsa_weight_shapes(m, cin, "demo"), 0)
x = np.zeros((1, cin, 32, 32), dtype=np.float32)
x[0, :, 8:12, 20:26] = rng.normal(size=(cin, 4, 6))
parts = dfsa_parts(x, m, weights, "demo")
att = parts.attention[0, 0]
print("attention shape", att.shape)
print(f"range over the map: {att.min():.3f} .. {att.max():.3f}")
print(f"spread over empty cells far from the patch: {np.ptp(att[:4, :4]):.2e}")

"""Sparsity-based CNN backbone: stacked Dense Feature / Sparse Attention (DFSA) modules.

One DFSA module maps an ``(n, c, h, w)`` map to ``h/stride x w/stride``:

* large branch: a single strided conv block on the input;
* attention: ``sigmoid(conv7x7([max_c(x), mean_c(x)]))`` on the input,
  nearest-resized to the output scale (one channel, broadcast);
* dense branches: input downsampled ``S_i`` times by a chain of stride-2 conv
  blocks, ``N_i`` more conv blocks, bilinear upsampling to the output scale,
  then multiplied by the attention map;
* all branches concatenated and fused with a 1x1 conv block.

Weights live under ``scb.module<k>.``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


@dataclass(frozen=True)
class DFSAConfig:
    stride: int = 2
    scales: tuple = (2, 4)
    blocks: tuple = (3, 5)
    branch_channels: tuple = (64, 64)
    large_channels: int = 64
    fused_channels: int = 128

    def __post_init__(self):
        for name in ("scales", "blocks", "branch_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.scales)
        if n < 1:
            raise ValueError("DFSA needs at least one dense branch")
        if len(self.blocks) != n or len(self.branch_channels) != n:
            raise ValueError("scales, blocks and branch_channels must have equal length")
        if not _is_pow2(self.stride) or self.stride < 1:
            raise ValueError("module stride must be a power of two")
        for s in self.scales:
            if s < self.stride or s % self.stride or not _is_pow2(s):
                raise ValueError(f"branch scale {s} must be a power of two, >= stride {self.stride} and divisible by it")
        order = sorted(range(n), key=lambda i: self.scales[i])
        ns = [self.blocks[i] for i in order]
        if any(b < 0 for b in ns) or any(a > b for a, b in zip(ns, ns[1:])):
            raise ValueError("block counts must be non-negative and nondecreasing with scale")
        if min(self.branch_channels + (self.large_channels, self.fused_channels)) < 1:
            raise ValueError("channel widths must be >= 1")

    @property
    def max_scale(self) -> int:
        return max(self.scales)


# named presets: branch scales x dense block counts
PRESETS = {
    "s48_n24": ((4, 8), (2, 4)),
    "s48_n35": ((4, 8), (3, 5)),
    "s24_n24": ((2, 4), (2, 4)),
    "s24_n35": ((2, 4), (3, 5)),
}
DEFAULT_PRESET = "s24_n35"


def preset(name: str, **kw) -> DFSAConfig:
    try:
        scales, blocks = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown DFSA preset {name!r}; choose from {sorted(PRESETS)}") from None
    return DFSAConfig(scales=scales, blocks=blocks, **kw)


@dataclass(frozen=True)
class SCBConfig:
    modules: tuple = field(default_factory=lambda: (preset(DEFAULT_PRESET), preset(DEFAULT_PRESET)))
    target_stride: int | None = None  # output scale relative to the SCB input; None = first module's

    def __post_init__(self):
        object.__setattr__(self, "modules", tuple(self.modules))
        if not self.modules:
            raise ValueError("SCB needs at least one DFSA module")
        if self.target_stride is not None and self.target_stride < 1:
            raise ValueError("target_stride must be >= 1")

    @classmethod
    def from_preset(cls, name: str = DEFAULT_PRESET, n_modules: int = 2, **kw) -> "SCBConfig":
        return cls(modules=tuple(preset(name) for _ in range(n_modules)), **kw)

    @property
    def output_stride(self) -> int:
        return self.target_stride if self.target_stride is not None else self.modules[0].stride

    @property
    def out_channels(self) -> int:
        return sum(m.fused_channels for m in self.modules)

    @property
    def input_divisor(self) -> int:
        """Input sizes must be multiples of this for every module's divisibility check."""
        div, acc = 1, 1
        for m in self.modules:
            div = max(div, acc * m.max_scale)
            acc *= m.stride
        return div


def _log2(v: int) -> int:
    return v.bit_length() - 1


def dfsa_weight_shapes(cfg: DFSAConfig, cin: int, prefix: str) -> dict:
    shapes = {}
    shapes.update(nn.conv_block_shapes(f"{prefix}.large", cin, cfg.large_channels))
    shapes[f"{prefix}.attn.weight"] = (1, 2, 7, 7)
    shapes[f"{prefix}.attn.bias"] = (1,)
    for i, (s, nb, c) in enumerate(zip(cfg.scales, cfg.blocks, cfg.branch_channels)):
        ch = cin
        for j in range(_log2(s)):
            shapes.update(nn.conv_block_shapes(f"{prefix}.branch{i}.down{j}", ch, c))
            ch = c
        for j in range(nb):
            shapes.update(nn.conv_block_shapes(f"{prefix}.branch{i}.block{j}", ch, c))
            ch = c
    total = cfg.large_channels + sum(cfg.branch_channels)
    shapes.update(nn.conv_block_shapes(f"{prefix}.fuse", total, cfg.fused_channels, kernel=1))
    return shapes


def scb_weight_shapes(cfg: SCBConfig, cin: int, prefix: str = "scb") -> dict:
    shapes = {}
    for k, m in enumerate(cfg.modules):
        shapes.update(dfsa_weight_shapes(m, cin, f"{prefix}.module{k}"))
        cin = m.fused_channels
    return shapes


def sparse_attention(x: np.ndarray, weights, prefix: str) -> np.ndarray:
    """Single-channel spatial gate in (0, 1) at the input resolution."""
    pooled = nn.concat_channels([nn.channel_max_pool(x), nn.channel_avg_pool(x)])
    logits = nn.conv2d(pooled, nn._w(weights, f"{prefix}.attn.weight"), nn._w(weights, f"{prefix}.attn.bias"), stride=1, padding=3)
    return nn.sigmoid(logits)


@dataclass
class DFSAParts:
    large: np.ndarray
    attention: np.ndarray  # resized to the output scale
    branches: list  # ungated dense branches at the output scale


def dfsa_parts(x: np.ndarray, cfg: DFSAConfig, weights, prefix: str) -> DFSAParts:
    n, _, h, w = x.shape
    if h % cfg.max_scale or w % cfg.max_scale:
        raise ValueError(f"{prefix}: input {h}x{w} not divisible by branch scale {cfg.max_scale}")
    ho, wo = h // cfg.stride, w // cfg.stride
    large = nn.conv_block(x, weights, f"{prefix}.large", stride=cfg.stride)
    att = nn.resize(sparse_attention(x, weights, prefix), ho, wo, mode="nearest")
    branches = []
    for i, (s, nb) in enumerate(zip(cfg.scales, cfg.blocks)):
        y = x
        for j in range(_log2(s)):
            y = nn.conv_block(y, weights, f"{prefix}.branch{i}.down{j}", stride=2)
        for j in range(nb):
            y = nn.conv_block(y, weights, f"{prefix}.branch{i}.block{j}", stride=1)
        branches.append(nn.upsample(y, s // cfg.stride, mode="bilinear"))
    return DFSAParts(large, att, branches)


def dfsa_fuse(parts: DFSAParts, weights, prefix: str) -> np.ndarray:
    gated = [b * parts.attention for b in parts.branches]
    cat = nn.concat_channels([parts.large, *gated])
    return nn.conv_block(cat, weights, f"{prefix}.fuse", stride=1)


def dfsa_forward(x: np.ndarray, cfg: DFSAConfig, weights, prefix: str = "scb.module0") -> np.ndarray:
    return dfsa_fuse(dfsa_parts(x, cfg, weights, prefix), weights, prefix)


def scb_forward(x: np.ndarray, cfg: SCBConfig, weights, prefix: str = "scb") -> np.ndarray:
    """Run the modules in sequence and concatenate their outputs at the target scale."""
    _, _, h, w = x.shape
    th, tw = h // cfg.output_stride, w // cfg.output_stride
    outs = []
    y = x
    for k, m in enumerate(cfg.modules):
        y = dfsa_forward(y, m, weights, f"{prefix}.module{k}")
        outs.append(nn.resize(y, th, tw, mode="bilinear"))
    return nn.concat_channels(outs)


def chain_receptive_field(layers, r: int = 1, jump: int = 1) -> tuple[int, int]:
    """Receptive field through ``(kernel, stride)`` layers; returns ``(r, jump)``."""
    for k, s in layers:
        r += (k - 1) * jump
        jump *= s
    return r, jump


def _module_paths(m: DFSAConfig):
    yield [(3, m.stride)]  # large branch
    yield [(7, 1)]  # attention gate
    for s, nb in zip(m.scales, m.blocks):
        yield [(3, 2)] * _log2(s) + [(3, 1)] * nb


def receptive_field(cfg) -> int:
    """Theoretical receptive field (input cells) of the deepest path through the backbone.

    Per module the path with the widest field is taken (the output sees the union
    of branch fields); upsampling and the 1x1 fusion add nothing; the next module
    starts at the current module's output spacing.
    """
    modules = cfg.modules if isinstance(cfg, SCBConfig) else (cfg,)
    r, jump = 1, 1
    for m in modules:
        best = max(chain_receptive_field(p, r, jump)[0] for p in _module_paths(m))
        r = best
        jump *= m.stride
    return r


def branch_receptive_fields(cfg: DFSAConfig) -> list[int]:
    """Receptive field of each dense branch of a single module."""
    return [chain_receptive_field([(3, 2)] * _log2(s) + [(3, 1)] * nb)[0] for s, nb in zip(cfg.scales, cfg.blocks)]

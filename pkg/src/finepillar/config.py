"""Pipeline configuration: one JSON document, unknown keys rejected.

Top-level keys (all optional, defaults in parentheses)::

    seed (0)            int, drives weight init and synthesis
    dtype ("float32")   "float32" | "float64" inference precision
    weights (null)      path to a PKW1 weight file
    grid                GridConfig fields: x_range, y_range, z_range, grid_size,
                        n_sub, max_points_per_subpillar, max_occupied_subpillars
    hpe                 L, z_scale, enabled
    pfe                 vfe1_out, vfe2_out
    scb                 either {"preset": name, "n_modules": k} or
                        {"modules": [DFSAConfig fields, ...]}; plus target_stride
    dfsa_preset         shorthand for scb.preset (s48_n24, s48_n35, s24_n24, s24_n35)
    head                num_classes, hidden_channels
    decode              top_k, score_threshold, nms_threshold, beta
    eval                iou_thresholds, iou_kind, recall_positions,
                        level1_min_points, level2_min_points
    synth               SynthConfig fields (seed defaults to the top-level seed)
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DEFAULT_PRESET, PRESETS, DFSAConfig, SCBConfig
from .head import DecodeConfig, HeadConfig
from .metrics import EvalConfig
from .pfe import PFEConfig
from .pillarize import GridConfig, HPEConfig
from .scene import SynthConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _build(cls, data, where: str, drop=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(drop)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    try:
        return cls(**{k: _tupleize(v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    hpe: HPEConfig = field(default_factory=HPEConfig)
    pfe: PFEConfig = field(default_factory=PFEConfig)
    scb: SCBConfig = field(default_factory=SCBConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    weights: str | None = None
    seed: int = 0
    dtype: str = "float32"
    scb_preset: str | None = DEFAULT_PRESET

    def __post_init__(self):
        if self.pfe.hpe != self.hpe:
            object.__setattr__(self, "pfe", dataclasses.replace(self.pfe, hpe=self.hpe))
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype: must be 'float32' or 'float64'")
        div = self.scb.input_divisor
        if self.grid.nx % div or self.grid.ny % div:
            raise ConfigError(
                f"grid: {self.grid.nx}x{self.grid.ny} cells not divisible by {div} required by the backbone scales"
            )
        if self.decode.output_stride != self.scb.output_stride:
            raise ConfigError(
                f"decode.output_stride ({self.decode.output_stride}) must equal the backbone output stride ({self.scb.output_stride})"
            )
        if len(self.decode.beta) < self.head.num_classes:
            raise ConfigError("decode.beta: need one exponent per class")
        if len(self.eval.iou_thresholds) < self.head.num_classes:
            raise ConfigError("eval.iou_thresholds: need one threshold per class")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        return dataclasses.replace(self.synth, seed=self.synth.seed if seed is None else seed)


TOP_KEYS = {"dfsa_preset", "grid", "hpe", "pfe", "scb", "head", "decode", "eval", "synth", "weights", "seed", "dtype"}


def _build_scb(data, where="scb") -> tuple[SCBConfig, str | None]:
    data = dict(data or {})
    unknown = sorted(set(data) - {"preset", "n_modules", "modules", "target_stride"})
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    if "modules" in data and ("preset" in data or "n_modules" in data):
        raise ConfigError(f"{where}: give either 'modules' or 'preset'/'n_modules', not both")
    target = data.get("target_stride")
    if "modules" in data:
        mods = data["modules"]
        if not isinstance(mods, list) or not mods:
            raise ConfigError(f"{where}.modules: expected a non-empty list")
        built = tuple(_build(DFSAConfig, m, f"{where}.modules[{i}]") for i, m in enumerate(mods))
        name = None
    else:
        name = data.get("preset", DEFAULT_PRESET)
        if name not in PRESETS:
            raise ConfigError(f"{where}.preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
        n = data.get("n_modules", 2)
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"{where}.n_modules: expected a positive integer")
        return SCBConfig.from_preset(name, n, target_stride=target), name
    try:
        return SCBConfig(modules=built, target_stride=target), name
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: expected a non-negative integer")
    grid = _build(GridConfig, doc.get("grid"), "grid")
    hpe_doc = dict(doc.get("hpe") or {})
    hpe_doc.setdefault("z_scale", grid.z_range[1] - grid.z_range[0])
    hpe = _build(HPEConfig, hpe_doc, "hpe")
    pfe = _build(PFEConfig, doc.get("pfe"), "pfe", drop=("hpe", "in_channels"))
    scb_doc = dict(doc.get("scb") or {})
    if "dfsa_preset" in doc:
        if "preset" in scb_doc or "modules" in scb_doc:
            raise ConfigError("dfsa_preset: conflicts with scb.preset / scb.modules")
        scb_doc["preset"] = doc["dfsa_preset"]
    scb, preset_name = _build_scb(scb_doc)
    head = _build(HeadConfig, doc.get("head"), "head")
    dec_doc = dict(doc.get("decode") or {})
    if "output_stride" in dec_doc:
        raise ConfigError("decode.output_stride: derived from the backbone, do not set")
    dec_doc["output_stride"] = scb.output_stride
    decode = _build(DecodeConfig, dec_doc, "decode")
    ev = _build(EvalConfig, doc.get("eval"), "eval")
    synth_doc = dict(doc.get("synth") or {})
    synth_doc.setdefault("seed", seed)
    synth = _build(SynthConfig, synth_doc, "synth")
    try:
        synth.validate()
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from None
    weights = doc.get("weights")
    if weights is not None and not isinstance(weights, str):
        raise ConfigError("weights: expected a path string or null")
    try:
        return PipelineConfig(
            grid=grid, hpe=hpe, pfe=pfe, scb=scb, head=head, decode=decode, eval=ev, synth=synth,
            weights=weights, seed=seed, dtype=doc.get("dtype", "float32"), scb_preset=preset_name,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> PipelineConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    cfg = config_from_dict(doc)
    if cfg.weights is not None and not Path(cfg.weights).is_absolute():
        cfg = dataclasses.replace(cfg, weights=str(Path(path).parent / cfg.weights))
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Inverse of ``config_from_dict`` (explicit module list for the backbone)."""
    def plain(dc, drop=()):
        out = {}
        for f in dataclasses.fields(dc):
            if f.name in drop:
                continue
            v = getattr(dc, f.name)
            out[f.name] = json.loads(json.dumps(v))
        return out

    return {
        "seed": cfg.seed,
        "dtype": cfg.dtype,
        "weights": cfg.weights,
        "grid": plain(cfg.grid),
        "hpe": plain(cfg.hpe),
        "pfe": plain(cfg.pfe, drop=("hpe", "in_channels")),
        "scb": {"modules": [plain(m) for m in cfg.scb.modules], "target_stride": cfg.scb.target_stride},
        "head": plain(cfg.head),
        "decode": plain(cfg.decode, drop=("output_stride",)),
        "eval": plain(cfg.eval),
        "synth": plain(cfg.synth),
    }

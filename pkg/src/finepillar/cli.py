"""Command-line entry point.

Subcommands: synth, stats {height,sparsity}, init-weights, infer, eval, bench.
Exit codes: 0 success, 1 input error (bad config, paths, file contents),
2 internal defect. Diagnostics go to stderr prefixed with the failing stage.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .config import ConfigError, PipelineConfig, load_config
from .metrics import evaluate
from .pillarize import sparsity_stats
from .scene import (
    CLASS_NAMES,
    LabelSchemaError,
    PointCloudFormatError,
    Scene,
    height_histogram,
    points_in_box_mask,
    read_detections,
    read_labels,
    read_point_cloud,
    save_scene,
    synth_scene,
    write_detections,
)

INPUT_ERRORS = (
    ConfigError,
    PointCloudFormatError,
    LabelSchemaError,
    nn.WeightFileError,
    nn.MissingWeightError,
    OSError,
    ValueError,
)


class InputError(Exception):
    pass


class Defect(Exception):
    pass


@contextmanager
def stage(name: str, input_phase: bool = False):
    """Tag failures with a stage name; in input phases, bad-input exceptions exit 1."""
    try:
        yield
    except (InputError, Defect):
        raise
    except INPUT_ERRORS as exc:
        if input_phase:
            raise InputError(f"[{name}] {exc}") from exc
        raise Defect(f"[{name}] {type(exc).__name__}: {exc}") from exc
    except Exception as exc:  # noqa: BLE001 - every other failure is a defect
        raise Defect(f"[{name}] {type(exc).__name__}: {exc}") from exc


def _config(args) -> PipelineConfig:
    with stage("config", input_phase=True):
        return load_config(args.config) if args.config else PipelineConfig()


def _collect_inputs(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(list(p.glob("*.bin")) + list(p.glob("*.csv")), key=lambda q: q.name)
            out.extend(found)
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return out


def _load_weights(args, cfg: PipelineConfig):
    from .pipeline import check_weights, init_pipeline_weights

    path = getattr(args, "weights", None) or cfg.weights
    if path is None:
        print(f"note: no weights given; using seeded init (seed {cfg.seed})", file=sys.stderr)
        return init_pipeline_weights(cfg)
    store = nn.load_weights(path)
    check_weights(cfg, store)
    return store


def _labels_for(point_path: Path):
    cand = point_path.with_suffix(".json")
    return read_labels(cand) if cand.exists() else []


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    with stage("synth-args", input_phase=True):
        if args.count < 0:
            raise ValueError("--count must be >= 0")
    base_seed = cfg.synth.seed if args.seed is None else args.seed
    with stage("synth"):
        scenes = [synth_scene(cfg.synth_config(base_seed + i), scene_id=f"{i:06d}") for i in range(args.count)]
    with stage("write", input_phase=True):
        for sc in scenes:
            save_scene(args.out, sc)
    print(f"wrote {len(scenes)} scenes to {args.out}", file=sys.stderr)
    return 0


def cmd_stats(args) -> int:
    cfg = _config(args)
    with stage("inputs", input_phase=True):
        inputs = _collect_inputs(args.inputs)
        clouds = [(p.stem, read_point_cloud(p), _labels_for(p)) for p in inputs]
        if args.kind == "height":
            lo, hi = args.z_range
            if not args.bin_width > 0 or not lo < hi:
                raise ValueError("need --bin-width > 0 and z_lo < z_hi")
        else:
            # build each grid once here so a size that does not divide the range is an input error
            for g in args.grid_sizes:
                for n in args.n_sub:
                    cfg.grid.replace(grid_size=g, n_sub=n)
    rows = []
    with stage(f"stats-{args.kind}"):
        if args.kind == "height":
            header = ["bin_center", "all", *CLASS_NAMES]
            total = None
            for _, cloud, labels in clouds:
                cols = [np.array([c for _, c in height_histogram(cloud, args.bin_width, args.z_range)])]
                for cid in range(len(CLASS_NAMES)):
                    mask = np.zeros(cloud.count, dtype=bool)
                    for lb in labels:
                        if lb.class_id == cid:
                            mask |= points_in_box_mask(cloud.xyz, lb.box)
                    hist = height_histogram(cloud.points[mask, 2], args.bin_width, args.z_range)
                    cols.append(np.array([c for _, c in hist]))
                mat = np.stack(cols, axis=1)
                total = mat if total is None else total + mat
            centers = [c for c, _ in height_histogram(np.zeros(0), args.bin_width, args.z_range)]
            if total is None:
                total = np.zeros((len(centers), 1 + len(CLASS_NAMES)), dtype=np.int64)
            for c, counts in zip(centers, total.tolist()):
                rows.append([f"{c:.6f}", *[str(int(v)) for v in counts]])
        else:
            header = ["scene", "n_sub", "grid_size", "total_cells", "occupied_cells", "occupancy_ratio"]
            for sid, cloud, _ in clouds:
                for r in sparsity_stats(cloud, args.n_sub, args.grid_sizes, base=cfg.grid):
                    rows.append([sid, r.n_sub, f"{r.grid_size:g}", r.total_cells, r.occupied_cells, f"{r.occupancy_ratio:.8f}"])
    with stage("write", input_phase=True):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return 0


def cmd_init_weights(args) -> int:
    from .pipeline import init_pipeline_weights

    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    with stage("init-weights"):
        store = init_pipeline_weights(cfg, seed)
    with stage("write", input_phase=True):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        nn.save_weights(store, args.out)
    print(f"wrote {len(store)} tensors to {args.out}", file=sys.stderr)
    return 0


def _fmt_timings(t) -> str:
    return " ".join(f"{k}={v * 1000:.1f}ms" for k, v in t.items())


def cmd_infer(args) -> int:
    from .pipeline import Detector

    cfg = _config(args)
    with stage("weights", input_phase=True):
        weights = _load_weights(args, cfg)
    with stage("inputs", input_phase=True):
        inputs = _collect_inputs(args.inputs)
        clouds = [(p.stem, read_point_cloud(p)) for p in inputs]
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
    with stage("build"):
        det = Detector(cfg, weights)

    def one(item):
        sid, cloud = item
        dets, t = det.run(cloud)
        return sid, dets, t

    with stage("infer"), threadpool_limits(limits=args.threads):
        if args.threads == 1:
            results = [one(it) for it in clouds]
        else:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                results = list(pool.map(one, clouds))
    with stage("write", input_phase=True):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for sid, dets, t in results:
            write_detections(out / f"{sid}.json", dets, scene_id=sid)
            print(f"{sid}: {len(dets)} detections  {_fmt_timings(t)}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .scene import count_points_in_box

    cfg = _config(args)
    with stage("inputs", input_phase=True):
        det_dir, lab_dir = Path(args.detections), Path(args.labels)
        if not det_dir.is_dir() or not lab_dir.is_dir():
            raise FileNotFoundError("--detections and --labels must be directories")
        pairs = []
        for lab_path in sorted(lab_dir.glob("*.json"), key=lambda p: p.name):
            labels = read_labels(lab_path)
            if any(lb.num_points_inside is None for lb in labels):
                bin_path = lab_path.with_suffix(".bin")
                if not bin_path.exists():
                    raise FileNotFoundError(f"{lab_path}: labels lack num_points and {bin_path.name} is missing")
                cloud = read_point_cloud(bin_path)
                for lb in labels:
                    if lb.num_points_inside is None:
                        lb.num_points_inside = count_points_in_box(cloud, lb.box)
            det_path = det_dir / lab_path.name
            dets = read_detections(det_path) if det_path.exists() else []
            pairs.append((dets, labels))
    with stage("evaluate"):
        res = evaluate(pairs, cfg.eval, cfg.head.num_classes)
    with stage("write", input_phase=True):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(res.to_csv())
    print(res.summary())
    return 0


def cmd_bench(args) -> int:
    from .pipeline import STAGES, Detector

    cfg = _config(args)
    with stage("weights", input_phase=True):
        weights = _load_weights(args, cfg)
    with stage("inputs", input_phase=True):
        cloud = read_point_cloud(args.scene)
        if args.repetitions < 1:
            raise ValueError("--repetitions must be >= 1")
    with stage("bench"), threadpool_limits(limits=args.threads):
        det = Detector(cfg, weights)
        det.run(cloud)  # warm-up (JIT, caches)
        runs = [det.run(cloud)[1] for _ in range(args.repetitions)]
    report = {"scene": str(args.scene), "points": cloud.count, "repetitions": args.repetitions, "stages": {}}
    for name in (*STAGES, "total"):
        v = np.array([r[name] for r in runs])
        report["stages"][name] = {
            "min_s": float(v.min()),
            "median_s": float(np.median(v)),
            "p95_s": float(np.percentile(v, 95)),
        }
    text = json.dumps(report, indent=1)
    if args.out:
        with stage("write", input_phase=True):
            Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="finepillar", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON (defaults built in)")
        return p

    p = common(sub.add_parser("synth", help="write synthetic scenes (.bin + .json)"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="first scene seed (default: synth.seed); scene i uses seed + i")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("stats", help="height histograms or sub-pillar occupancy tables"))
    p.add_argument("kind", choices=["height", "sparsity"])
    p.add_argument("--inputs", nargs="+", required=True, help="point files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=0.2)
    p.add_argument("--z-range", type=float, nargs=2, default=(-2.0, 4.0))
    p.add_argument("--n-sub", type=int, nargs="+", default=[1, 2, 4, 6, 8])
    p.add_argument("--grid-sizes", type=float, nargs="+", default=[0.32, 0.16])
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("init-weights", help="write a seeded PKW1 weight file"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)

    p = common(sub.add_parser("infer", help="run the detector on point files"))
    p.add_argument("--weights")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output directory for detection JSON files")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("eval", help="compute AP / APH per class and level"))
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="CSV output")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("bench", help="per-stage latency statistics"))
    p.add_argument("--weights")
    p.add_argument("--scene", required=True)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except Defect as exc:
        print(f"internal error {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands:
    run     process a sequence (on-disk or synthetic) into uncertainty maps
    eval    score a run directory against ground truth
    synth   write a synthetic dataset in the standard directory layout
    oracle  emit the disagreement case-harness CSV
    bench   per-stage timing and mixture memory estimate

Configuration comes from flags plus an optional flat key=value file; flags
override the file. `run --print-config` prints every effective value.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    FrameObservation,
    load_sequence,
    perturb_poses,
    read_f32,
    skip_frames,
    write_depth_png,
    write_f32,
    write_sequence,
)
from .engine import Engine, EngineConfig
from .errors import DepthMVDError
from .metrics import evaluate
from .oracles import CASE_LABELS, run_case_grid
from .segmentation import SegmentationConfig
from .synthetic import BUILTIN_SCENES, parse_scene_file, render_synthetic

MIXTURE_RECORD_BYTES = 15 * 8  # mean[3] cov[9] weight m created_frame, float64


@dataclass
class RunConfig:
    """Everything a run needs; mirrored by the key=value config file."""

    input: str = ""
    scene: str = ""
    output: str = ""
    mode: str = "alternate"
    d_max: float = 20.0
    # engine
    eta: float = 0.3
    occlusion_overlap: float = 0.6
    alpha: float = 0.3
    mu0: float = 0.0
    pi0: float = 1.0
    sigma0: float = 1.0
    gmr_stride: int = 1
    overlap_weighting: bool = True
    # segmentation
    tau0: float = 0.02
    tau1: float = 0.005
    min_support: int = 12
    max_components: int = 4096
    merge_angle: float = 30.0
    thickness_floor: float = 1e-6
    # ablations
    rot_sigma: float = 0.0
    trans_sigma: float = 0.0
    skip_interval: int = 0
    noise_seed: int = 0
    # outputs
    emit_maps: bool = True
    emit_mixture: bool = False
    emit_labels: bool = False

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            eta=self.eta,
            occlusion_overlap=self.occlusion_overlap,
            alpha=self.alpha,
            mu0=self.mu0,
            pi0=self.pi0,
            sigma0=self.sigma0,
            gmr_stride=self.gmr_stride,
            overlap_weighting=self.overlap_weighting,
            segmentation=SegmentationConfig(
                tau0=self.tau0,
                tau1=self.tau1,
                min_support=self.min_support,
                max_components=self.max_components,
                merge_angle=self.merge_angle,
                thickness_floor=self.thickness_floor,
            ),
        )


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    return target_type(value)


def load_config_file(path) -> dict:
    out = {}
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {"input": str, "scene": str, "output": str, "mode": str}
    for f in fields(RunConfig):
        types[f.name] = type(f.default)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DepthMVDError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise DepthMVDError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(val, types[key])
    return out


def _build_run_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return RunConfig(**values)


def _observation_stream(cfg: RunConfig):
    """(intrinsics, iterator of FrameObservation) from disk or a scene."""
    if bool(cfg.input) == bool(cfg.scene):
        raise DepthMVDError("exactly one of input/scene must be given")
    if cfg.input:
        from .data_io import read_intrinsics

        intrinsics = read_intrinsics(Path(cfg.input) / "intrinsics.txt")
        stream = load_sequence(cfg.input, mode=cfg.mode, d_max=cfg.d_max)
    else:
        scene = _load_scene(cfg.scene, cfg.noise_seed)
        intrinsics = scene.intrinsics
        stream = render_synthetic(scene)
    if cfg.skip_interval:
        stream = skip_frames(stream, cfg.skip_interval)
    if cfg.rot_sigma or cfg.trans_sigma:
        stream = perturb_poses(stream, cfg.rot_sigma, cfg.trans_sigma, seed=cfg.noise_seed)
    return intrinsics, stream


def _load_scene(name_or_path: str, seed: int):
    if name_or_path in BUILTIN_SCENES:
        return BUILTIN_SCENES[name_or_path](seed=seed)
    return parse_scene_file(name_or_path)


def cmd_run(args) -> int:
    cfg = _build_run_config(args)
    if args.print_config:
        for key, val in asdict(cfg).items():
            print(f"{key} = {val}")
        return 0
    if not cfg.output:
        raise DepthMVDError("run requires --output")
    out_dir = Path(cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    intrinsics, stream = _observation_stream(cfg)
    engine = Engine(intrinsics, cfg.engine_config())

    produced = []
    maps_dir = out_dir / "maps"
    labels_dir = out_dir / "labels"
    per_frame = []
    for obs in stream:
        result = engine.process_frame(obs)
        stem = f"{obs.frame_index:06d}"
        if cfg.emit_maps:
            maps_dir.mkdir(exist_ok=True)
            for prefix, arr in (
                ("pred", obs.depth),
                ("mvd", result.uncertainty.mvd),
                ("total", result.uncertainty.total),
            ):
                path = maps_dir / f"{prefix}_{stem}.f32"
                write_f32(path, arr)
                produced.append(str(path.relative_to(out_dir)))
        if cfg.emit_labels:
            labels_dir.mkdir(exist_ok=True)
            from PIL import Image

            path = labels_dir / f"labels_{stem}.png"
            Image.fromarray(result.frame_mixture.labels).save(path)
            produced.append(str(path.relative_to(out_dir)))
        per_frame.append(
            {
                "frame": obs.frame_index,
                "model_id": obs.model_id,
                "components": len(result.frame_mixture.components),
                "matched_pairs": result.fusion.matched_pairs,
                "appended": result.fusion.appended,
                "skipped_pairs": result.fusion.skipped_pairs,
                "timings": result.timings,
            }
        )
    if engine.frames_processed == 0:
        raise DepthMVDError("input stream produced no frames")

    if cfg.emit_mixture:
        snap = out_dir / "mixture_final.txt"
        snap.write_text(engine.mixture.to_text())
        produced.append(snap.name)

    summary = {
        "frames": engine.frames_processed,
        "mixture_components": engine.mixture.count,
        "mixture_mass": engine.mixture.total_mass,
        "mixture_memory_bytes": engine.mixture.count * MIXTURE_RECORD_BYTES,
        "stage_seconds": engine.stage_seconds,
        "per_frame": per_frame,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    produced.append("summary.json")
    manifest = {
        "version": __version__,
        "config": asdict(cfg),
        "files": sorted(produced),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(
        f"processed {engine.frames_processed} frames -> {out_dir} "
        f"(K={engine.mixture.count}, mass={engine.mixture.total_mass:.0f})"
    )
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    maps_dir = run_dir / "maps"
    preds = sorted(maps_dir.glob("pred_*.f32"))
    totals = sorted(maps_dir.glob("total_*.f32"))
    if not preds or len(preds) != len(totals):
        raise DepthMVDError(f"{maps_dir}: incomplete pred/total map pairs")
    gt_dir = Path(args.gt)
    if (gt_dir / "gt").is_dir():
        gt_dir = gt_dir / "gt"
    pred_list, var_list, gt_list = [], [], []
    for pred_path, total_path in zip(preds, totals):
        stem = pred_path.stem.split("_", 1)[1]
        gt_path = gt_dir / f"{stem}.f32"
        if not gt_path.is_file():
            raise DepthMVDError(f"missing ground truth for frame {stem} in {gt_dir}")
        pred_list.append(read_f32(pred_path))
        var_list.append(read_f32(total_path))
        gt_list.append(read_f32(gt_path))
    report = evaluate(
        np.concatenate([a.ravel() for a in pred_list]),
        np.concatenate([a.ravel() for a in var_list]),
        np.concatenate([a.ravel() for a in gt_list]),
    )
    out_dir = Path(args.output) if args.output else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "quantile_curve.csv").write_text(report.curve_csv("quantile"))
    (out_dir / "delta_curve.csv").write_text(report.curve_csv("delta"))
    print(
        f"delta1={report.delta1:.4f} nll={report.nll:.4f} "
        f"ece_delta={report.ece_delta:.4f} ece_q={report.ece_q:.4f} "
        f"pixels={report.pixel_count}"
    )
    return 0


def cmd_synth(args) -> int:
    scene = _load_scene(args.scene, args.seed)
    if args.frames is not None and args.scene in BUILTIN_SCENES:
        scene = BUILTIN_SCENES[args.scene](n_frames=args.frames, seed=args.seed)
    if args.iid_sigma is not None:
        scene.noise.iid_sigma = args.iid_sigma
    if args.frame_bias_sigma is not None:
        scene.noise.frame_bias_sigma = args.frame_bias_sigma
    for spec in args.bias or []:
        pid, val = spec.split("=", 1)
        scene.noise.region_bias[pid] = float(val)
    observations = list(render_synthetic(scene))
    write_sequence(args.output, observations, scene.intrinsics, encoding=args.encoding)
    print(f"wrote {len(observations)} frames to {args.output}")
    return 0


def cmd_oracle(args) -> int:
    labels = tuple(args.cases)
    for lab in labels:
        if lab not in CASE_LABELS:
            raise DepthMVDError(f"unknown case {lab!r}; valid: {''.join(CASE_LABELS)}")
    rows = run_case_grid(labels=labels, seeds=range(args.seeds))
    lines = ["case,seed,error,m_p,m_g"]
    lines += [
        f"{r.label},{r.seed},{r.error:.17g},{r.m_p:.17g},{r.m_g:.17g}" for r in rows
    ]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {len(rows)} rows to {args.output}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    scene = _load_scene(args.scene, seed=0)
    if args.frames is not None and args.scene in BUILTIN_SCENES:
        scene = BUILTIN_SCENES[args.scene](n_frames=args.frames)
    engine_cfg = EngineConfig(gmr_stride=args.gmr_stride)
    engine = Engine(scene.intrinsics, engine_cfg)
    stage_times = {"segment": [], "correspond": [], "fuse": [], "regress": []}
    totals = []
    for obs in render_synthetic(scene):
        t0 = time.perf_counter()
        result = engine.process_frame(obs)
        totals.append(time.perf_counter() - t0)
        for key, val in result.timings.items():
            stage_times[key].append(val)
    report = {
        "frames": engine.frames_processed,
        "image": [scene.intrinsics.height, scene.intrinsics.width],
        "gmr_stride": args.gmr_stride,
        "median_frame_ms": 1000.0 * float(np.median(totals)),
        "stage_median_ms": {
            k: 1000.0 * float(np.median(v)) for k, v in stage_times.items()
        },
        "mixture_components": engine.mixture.count,
        "mixture_memory_bytes": engine.mixture.count * MIXTURE_RECORD_BYTES,
    }
    text = json.dumps(report, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--print-config", action="store_true", help="print effective config and exit")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if type(f.default) is bool:
            group = p.add_mutually_exclusive_group()
            group.add_argument(flag, dest=f.name, action="store_true", default=None)
            group.add_argument(
                "--no-" + f.name.replace("_", "-"), dest=f.name, action="store_false", default=None
            )
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthmvd",
        description="Per-pixel depth uncertainty from multiview geometric disagreement.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="process a sequence into uncertainty maps")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score a run directory against ground truth")
    p_eval.add_argument("--run", required=True, help="run output directory")
    p_eval.add_argument("--gt", required=True, help="sequence root or gt directory")
    p_eval.add_argument("--output", help="report directory (default: run dir)")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p_synth.add_argument("--scene", required=True, help="scene file or builtin name")
    p_synth.add_argument("--output", required=True)
    p_synth.add_argument("--frames", type=int, default=None)
    p_synth.add_argument("--iid-sigma", type=float, default=None)
    p_synth.add_argument("--frame-bias-sigma", type=float, default=None)
    p_synth.add_argument("--bias", action="append", metavar="ID=METERS")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--encoding", choices=["f32", "png"], default="f32")
    p_synth.set_defaults(func=cmd_synth)

    p_oracle = sub.add_parser("oracle", help="disagreement case-harness CSV")
    p_oracle.add_argument("--cases", default="ABCDE")
    p_oracle.add_argument("--seeds", type=int, default=100)
    p_oracle.add_argument("--output", help="CSV path (default: stdout)")
    p_oracle.set_defaults(func=cmd_oracle)

    p_bench = sub.add_parser("bench", help="timing and memory report")
    p_bench.add_argument("--scene", default="room")
    p_bench.add_argument("--frames", type=int, default=None)
    p_bench.add_argument("--gmr-stride", type=int, default=1)
    p_bench.add_argument("--output", help="JSON path")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DepthMVDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
vertexdet command line

Subcommands:
    gen        write synthetic scene JSON files
    train      train the detector and write a checkpoint + loss CSV
    eval       AP25/AP50 per class, mAP and attention locality as JSON
    check      run the oracle/property suites
    dump-attn  export per-vertex bias maps and an attention row for one query

Usage:
    python main.py gen --scenes 500 --seed 0 --out-dir data/train
    python main.py train --data data/train --rpe exact --epochs 20 --ckpt-out runs/exact
    python main.py eval --data data/val --ckpt runs/exact --out runs/exact/metrics.json
    python main.py check --suite all
    python main.py dump-attn --ckpt runs/exact --scene data/val/scene_01000.json --query 0 --out-dir attn/

Machine-readable output goes to stdout (or --out); logs go to stderr.
Exit codes: 0 ok, 1 check or runtime failure, 2 configuration error, 3 I/O or format error.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from pydantic import ValidationError

from checkpoint import load_checkpoint, save_checkpoint
from checks import SUITES, run_suites
from config import DATA_DIR, DEFAULT_SEED, DEFAULT_THREADS, RUNS_DIR
from errors import CheckpointError, ConfigError, SceneFormatError, SceneGenerationError, ShapeError, VertexDetError
from evaluation import evaluate_detections, evaluate_model, export_attention, read_detections, write_detections
from metrics import STAGE_LATENCY
from ml.detector import VertexDetector
from models import CoordinateFrame, NonlinearKind, OptimizerKind, RpeMode, YawMode
from observability import get_logger, log_stage_event
from schemas import DetectorConfig, GenConfig, TrainConfig
from synthdata import generate_scenes, load_scenes, read_scene, write_scene
from trainer import train

logger = get_logger("cli")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _emit(payload: dict, out=None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _echo_config(directory, args: argparse.Namespace):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    (directory / "config.json").write_text(json.dumps(flags, indent=2, sort_keys=True, default=str) + "\n")


# ================== GEN ==================

def cmd_gen(args) -> int:
    config = GenConfig(
        scenes=args.scenes, seed=args.seed, yaw=args.yaw, points=args.points,
        boxes_min=args.boxes_min, boxes_max=args.boxes_max, clutter=args.clutter,
        n_classes=args.n_classes,
    )
    out_dir = Path(args.out_dir)
    _echo_config(out_dir, args)
    start = time.time()
    scenes = generate_scenes(config)
    for scene in scenes:
        write_scene(out_dir / f"{scene.scene_id}.json", scene)
    log_stage_event("gen", "complete", (time.time() - start) * 1000.0, {"scenes": len(scenes)})
    _emit({"scenes": len(scenes), "out_dir": str(out_dir)})
    return EXIT_OK


# ================== TRAIN ==================

def _detector_config(args) -> DetectorConfig:
    return DetectorConfig(
        d_model=args.d_model, heads=args.heads, queries=args.queries, layers=args.layers,
        seeds=args.seeds, n_classes=args.n_classes, rpe_mode=args.rpe, nonlinear=args.nonlinear,
        vertex_count=args.vertex_count, frame=args.frame, table_res=args.table_res,
        table_extent=args.table_extent, yaw_mode=args.yaw, object_normalized=not args.no_object_normalized,
        initial_ffn=not args.no_initial_ffn, init_candidates=args.init_candidates, seed=args.seed,
    )


def cmd_train(args) -> int:
    detector_config = _detector_config(args)
    train_config = TrainConfig(
        epochs=args.epochs, lr=args.lr, min_lr=args.min_lr, momentum=args.momentum,
        weight_decay=args.weight_decay, optimizer=args.optimizer, repeat_gt=args.repeat_gt,
        batch_size=args.batch_size, augment=args.augment, seed=args.seed, threads=args.threads,
    )
    scenes = load_scenes(args.data)
    if not scenes:
        raise ConfigError(f"no scenes found in {args.data}")
    _check_classes(scenes, detector_config)

    ckpt_dir = Path(args.ckpt_out)
    _echo_config(ckpt_dir, args)
    model = VertexDetector(detector_config)
    start = time.time()
    history = train(model, scenes, train_config)
    STAGE_LATENCY.labels(stage="train").observe(time.time() - start)
    save_checkpoint(model, ckpt_dir, epochs_trained=train_config.epochs)
    history.write_csv(ckpt_dir / "loss.csv")
    final = history.epochs[-1].loss if history.epochs else None
    _emit({"checkpoint": str(ckpt_dir), "epochs": train_config.epochs, "final_loss": final,
           "parameters": len(model.parameters())})
    return EXIT_OK


def _check_classes(scenes, config: DetectorConfig):
    for scene in scenes:
        for gt in scene.gt_boxes:
            if gt.class_id >= config.n_classes:
                raise CheckpointError(
                    f"scene {scene.scene_id} has class {gt.class_id}, model has {config.n_classes} classes"
                )


# ================== EVAL ==================

def cmd_eval(args) -> int:
    scenes = load_scenes(args.data)
    if args.detections:
        dets = read_detections(args.detections)
        report = evaluate_detections(dets, scenes)
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt or --detections")
        model = load_checkpoint(args.ckpt)
        _check_classes(scenes, model.config)
        nms_iou = args.nms_iou if args.nms_iou > 0 else None
        report, dets = evaluate_model(model, scenes, threads=args.threads, nms_iou=nms_iou)
    if args.dets_out:
        write_detections(args.dets_out, dets)
    if args.out:
        _echo_config(Path(args.out).parent, args)
    _emit(report.model_dump(), args.out)
    return EXIT_OK


# ================== CHECK ==================

def cmd_check(args) -> int:
    results = run_suites(args.suite)
    _emit({r.suite: r.to_dict() for r in results})
    failed = [r.suite for r in results if not r.passed]
    if failed:
        logger.error(f"failed suites: {', '.join(failed)}")
        return EXIT_FAILURE
    return EXIT_OK


# ================== DUMP-ATTN ==================

def cmd_dump_attn(args) -> int:
    model = load_checkpoint(args.ckpt)
    scene = read_scene(args.scene)
    written = export_attention(model, scene, args.query, args.out_dir, layer=args.layer)
    _echo_config(args.out_dir, args)
    _emit({name: str(path) for name, path in written.items()})
    return EXIT_OK


# ================== PARSER ==================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vertexdet",
        description="Toy 3D detection transformer with vertex relative position bias",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("Usage:")[1] if "Usage:" in __doc__ else None,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate synthetic scenes")
    gen.add_argument("--seed", type=int, default=DEFAULT_SEED)
    gen.add_argument("--scenes", type=int, default=10)
    gen.add_argument("--out-dir", default=DATA_DIR)
    gen.add_argument("--yaw", type=YawMode, choices=list(YawMode), default=YawMode.ZERO)
    gen.add_argument("--points", type=int, default=2048)
    gen.add_argument("--boxes-min", type=int, default=2)
    gen.add_argument("--boxes-max", type=int, default=6)
    gen.add_argument("--clutter", type=float, default=0.2)
    gen.add_argument("--n-classes", type=int, default=4)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="Train a detector")
    tr.add_argument("--data", default=DATA_DIR)
    tr.add_argument("--rpe", type=RpeMode, choices=list(RpeMode), default=RpeMode.EXACT)
    tr.add_argument("--layers", type=int, default=3)
    tr.add_argument("--queries", type=int, default=32)
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--d-model", type=int, default=64)
    tr.add_argument("--seeds", type=int, default=256)
    tr.add_argument("--n-classes", type=int, default=4)
    tr.add_argument("--nonlinear", type=NonlinearKind, choices=list(NonlinearKind), default=NonlinearKind.SIGNED_LOG)
    tr.add_argument("--vertex-count", type=int, choices=[1, 2, 4, 8], default=8)
    tr.add_argument("--frame", type=CoordinateFrame, choices=list(CoordinateFrame), default=CoordinateFrame.CANONICAL)
    tr.add_argument("--table-res", type=int, default=10)
    tr.add_argument("--table-extent", type=float, default=None,
                    help="F-space half range of the table (default: F(10 m) for --nonlinear)")
    tr.add_argument("--yaw", type=YawMode, choices=list(YawMode), default=YawMode.ZERO)
    tr.add_argument("--no-object-normalized", action="store_true")
    tr.add_argument("--no-initial-ffn", action="store_true")
    tr.add_argument("--init-candidates", type=int, default=None)
    tr.add_argument("--repeat-gt", type=int, default=1)
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--min-lr", type=float, default=1e-6)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--weight-decay", type=float, default=0.0)
    tr.add_argument("--optimizer", type=OptimizerKind, choices=list(OptimizerKind), default=OptimizerKind.SGD)
    tr.add_argument("--batch-size", type=int, default=1)
    tr.add_argument("--augment", action="store_true")
    tr.add_argument("--seed", type=int, default=DEFAULT_SEED)
    tr.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    tr.add_argument("--ckpt-out", default=str(Path(RUNS_DIR) / "latest"))
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint or a detection file")
    ev.add_argument("--data", default=DATA_DIR)
    ev.add_argument("--ckpt", default=None)
    ev.add_argument("--detections", default=None, help="evaluate this detection JSON instead of running a model")
    ev.add_argument("--nms-iou", type=float, default=0.25, help="0 disables NMS")
    ev.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    ev.add_argument("--dets-out", default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    ck = sub.add_parser("check", help="Run oracle/property suites")
    ck.add_argument("--suite", choices=list(SUITES) + ["all"], default="all")
    ck.set_defaults(func=cmd_check)

    da = sub.add_parser("dump-attn", help="Export attention maps for one query")
    da.add_argument("--ckpt", required=True)
    da.add_argument("--scene", required=True)
    da.add_argument("--query", type=int, required=True)
    da.add_argument("--layer", type=int, default=-1)
    da.add_argument("--out-dir", required=True)
    da.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, SceneGenerationError, ShapeError) as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG
    except (SceneFormatError, CheckpointError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except VertexDetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

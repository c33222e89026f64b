#!/usr/bin/env python3
"""Main entry point for SoftSplat Sim

Commands: gen (synthetic datasets), calib (real-to-sim calibration), train, rollout,
eval, report and sweep (stage-1 stride ablation). Status lines go to stderr; each
command prints one JSON summary line on stdout when it succeeds.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import ValidationError as PydanticValidationError
from scipy.spatial.transform import Rotation

from config import SimConfig, dump_config, load_config
from core.dynamics import Simulator, scene_context, scene_environment
from core.errors import ConfigError, SoftSplatError
from core.evalkit import evaluate_sequence, load_metrics, report, summarize, write_grid, write_metrics
from core.r2s import ReferencePair, estimate_rigid, estimate_scale
from core.render import dump_render, render_state
from core.serialization import (checkpoint_hierarchy_parents, dataset_sequences, load_checkpoint, load_sequence,
                                write_array, write_json)
from core.synthworld import generate_dataset
from core.trainer import sweep_stride, train
from core.types import SceneSequence
from utils.helpers import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _emit(summary: Dict[str, Any]) -> None:
    print(json.dumps(summary, sort_keys=True))


def _first_sequence(dataset: Path) -> SceneSequence:
    paths = dataset_sequences(dataset)
    if not paths:
        raise ConfigError(f"dataset {dataset} holds no sequences")
    return load_sequence(paths[0])


def cmd_gen(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = generate_dataset(cfg, out, args.seqs, args.task, args.object)
    dump_config(cfg, out / "config.json")
    return {"command": "gen", "out": str(out), "sequences": len(summary["sequences"]),
            "train": len(summary["split"]["train"]), "test": len(summary["split"]["test"])}


def calibrate(sequence: SceneSequence) -> Dict[str, Any]:
    """Scale, rigid alignment, table plane and gravity from a sequence's embedded calibration data."""
    metadata = sequence.metadata
    wrist = metadata.get("wrist_camera")
    pairs = metadata.get("wrist_pose_pairs") or []
    if not wrist or wrist not in [cam.name for cam in sequence.cameras] or not pairs:
        raise ConfigError(f"sequence {sequence.name} has no wrist camera pose pairs to calibrate from")
    references = [ReferencePair(float(p["rec"]), float(p["metric"])) for p in metadata.get("reference_pairs", [])]
    metric_per_rec = estimate_scale(references)
    s = 1.0 / metric_per_rec
    X = estimate_rigid(np.asarray(pairs[0]["robot"]), np.asarray(pairs[0]["rec"]), s)

    residual = 0.0
    for pair in pairs[1:]:
        mapped = X.apply_rigid(np.asarray(pair["robot"]))
        residual = max(residual, float(np.abs(mapped - np.asarray(pair["rec"])).max()))
    env = scene_environment(sequence)
    plane, g = env.plane, env.gravity
    logger.info(f"Calibrated {sequence.name}: s={s:.9f}, t={np.round(X.translation, 6).tolist()}, "
                f"pose residual {residual:.2e}, plane rms {plane.residual:.2e}")
    return {
        "scale": s,
        "rotation_quaternion_xyzw": Rotation.from_matrix(X.rotation).as_quat().tolist(),
        "rotation": X.rotation.tolist(),
        "translation": X.translation.tolist(),
        "plane": plane.to_record(),
        "gravity": g.tolist(),
        "pose_residual": residual,
        "plane_residual": plane.residual,
    }


def cmd_calib(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    sequence = _first_sequence(Path(args.dataset))
    calib = calibrate(sequence)
    out = Path(args.out) if args.out else Path(args.dataset) / "calib.json"
    write_json(out, calib)
    truth = sequence.metadata.get("calibration_truth")
    summary = {"command": "calib", "out": str(out), "scale": calib["scale"], "gravity": calib["gravity"],
               "plane_residual": calib["plane_residual"]}
    if truth:
        summary["scale_error"] = abs(calib["scale"] - float(truth["scale"]))
    return summary


def cmd_train(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    if args.stride is not None:
        cfg.train.stride = args.stride
    if args.stage1_epochs is not None:
        cfg.train.stage1_epochs = args.stage1_epochs
    if args.stage2_epochs is not None:
        cfg.train.stage2_epochs = args.stage2_epochs
    result = train(cfg, [Path(d) for d in args.dataset], Path(args.out), method=args.method)
    return {"command": "train", "out": args.out, **result}


def _parents_for(checkpoint: Path, sequence: SceneSequence, dataset: Path) -> Optional[List[np.ndarray]]:
    return checkpoint_hierarchy_parents(checkpoint, f"{Path(dataset).resolve().name}/{sequence.name}")


def cmd_rollout(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    params = load_checkpoint(Path(args.checkpoint), cfg.dynamics)
    source = Path(args.actions)
    sequence = load_sequence(source)
    T = sequence.num_frames - 1 if args.steps is None else args.steps
    context = scene_context(sequence, cfg, _parents_for(Path(args.checkpoint), sequence, source.parent))
    sim = Simulator(params, context.hierarchy, context.graphs, context.env, context.settings,
                    sequence.initial_state.to(params.dtype))
    with torch.no_grad():
        states = sim.rollout(sequence.actions, T)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "positions.f32", torch.stack([s.positions for s in states]).double().numpy())
    write_array(out / "covariances.f32", torch.stack([s.covariances for s in states]).double().numpy())
    write_json(out / "trajectory.json", {"sequence": sequence.name, "frames": len(states), "dt": sequence.dt,
                                         "splats": states[0].num_splats})
    if cfg.render.debug_dump:
        for cam in sequence.cameras_at(len(states) - 1):
            with torch.no_grad():
                dump_render(render_state(cam, states[-1].to(torch.float64), cfg.render), out / f"final_{cam.name}.png")
    dump_config(cfg, out / "config.json")
    return {"command": "rollout", "out": str(out), "frames": len(states)}


def cmd_eval(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    dataset = Path(args.dataset)
    split = "train" if args.mode == "resim" else "test"
    paths = dataset_sequences(dataset, split) or dataset_sequences(dataset)
    params = None
    if args.mode != "static":
        if not args.checkpoint:
            raise ConfigError(f"--checkpoint is required for mode '{args.mode}'")
        params = load_checkpoint(Path(args.checkpoint), cfg.dynamics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for path in paths:
        sequence = load_sequence(path)
        parents = _parents_for(Path(args.checkpoint), sequence, dataset) if params is not None else None
        results.append(evaluate_sequence(params, sequence, cfg, args.mode, parents))
        write_grid(params, sequence, cfg, out / f"grid_{sequence.name}.png", parents)
    record = summarize(results, args.method or ("static" if params is None else "softsplat"))
    write_metrics(record, out / "val_metrics.json")
    dump_config(cfg, out / "config.json")
    return {"command": "eval", "out": str(out), **{k: record[k] for k in ("abs_rel", "rmse", "psnr", "ssim", "mode")}}


def _metric_files(runs: Sequence[str]) -> List[Path]:
    files = []
    for run in runs:
        path = Path(run)
        files.append(path / "val_metrics.json" if path.is_dir() else path)
    return files


def cmd_report(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    records = []
    for path in _metric_files(args.runs):
        record = load_metrics(path)
        record.setdefault("method", path.parent.name if path.name == "val_metrics.json" else path.stem)
        records.append(record)
    rows = report(records, Path(args.out))
    return {"command": "report", "out": args.out, "rows": len(rows)}


def cmd_sweep(cfg: SimConfig, args: argparse.Namespace) -> Dict[str, Any]:
    records = sweep_stride(cfg, [Path(d) for d in args.dataset], Path(args.out), args.strides)
    return {"command": "sweep", "out": args.out, "runs": [r["method"] for r in records]}


COMMANDS = {
    "gen": cmd_gen,
    "calib": cmd_calib,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults to the desk preset)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; may be repeated")
    common.add_argument("--seed", type=int, help="global seed (overrides config and SOMA_SEED)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="softsplat", description="Desk-scale real-to-sim soft-body simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic manipulation dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--task", choices=["lift", "drag", "fold"], help="scripted task")
    p.add_argument("--object", choices=["cloth", "rope"], help="object kind")
    p.add_argument("--seqs", type=int, help="number of sequences")

    p = sub.add_parser("calib", parents=[common], help="recover scale, alignment, table plane and gravity")
    p.add_argument("--dataset", required=True, help="dataset or sequence directory")
    p.add_argument("--out", help="output JSON (default <dataset>/calib.json)")

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--dataset", required=True, nargs="+", help="one or more dataset directories")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--stride", type=int, help="stage-1 temporal stride k")
    p.add_argument("--stage1-epochs", type=int, help="0 disables the coarse stage")
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--method", default="softsplat", help="run label used in reports")

    p = sub.add_parser("rollout", parents=[common], help="open-loop rollout of a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--actions", required=True, help="sequence directory supplying G_0 and actions")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="horizon T (default: all frames)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", help="trained checkpoint (not needed for --mode static)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["resim", "general", "static"], default="general",
                   help="resim: training split; general: held-out split; static: frozen G_0 baseline")
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="run label used in reports")

    p = sub.add_parser("report", parents=[common], help="tabulate evaluation runs")
    p.add_argument("--runs", required=True, nargs="+", help="val_metrics.json files or run directories")
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("sweep", parents=[common], help="train one model per stage-1 stride")
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--strides", type=int, nargs="+", default=[1, 5, 10])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = load_config(Path(args.config) if args.config else None, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        summary = COMMANDS[args.command](cfg, args)
    except (ConfigError, PydanticValidationError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except SoftSplatError as e:
        logger.error(str(e))
        logger.debug("Traceback:", exc_info=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"An error occurred: {e}")
        logger.debug("Traceback:", exc_info=True)
        return EXIT_RUNTIME
    _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

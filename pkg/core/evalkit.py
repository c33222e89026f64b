#!/usr/bin/env python3
"""Evaluation module for SoftSplat Sim

Masked PSNR / SSIM on RGB, Abs Rel and RMSE on depth with the tabletop filled in
outside the object, frame-then-camera averaging, CSV tables and comparison grids.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from config import SimConfig
from core.dynamics import DynamicsParams, SceneContext, Simulator, scene_context
from core.errors import ValidationError
from core.render import SSIM_WINDOW, render_state, ssim_map, to_uint8
from core.types import CameraModel, Plane, SceneSequence, SplatSetState
from utils.helpers import sanitize_run_name

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
METRIC_COLUMNS = ("abs_rel", "rmse", "psnr", "ssim", "lpips")
METRIC_KEYS = ("abs_rel", "rmse", "psnr", "ssim")
MODES = ("resim", "general", "static")


def _as_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise ValidationError(f"mask shape {m.shape} != image shape {shape}")
    return m


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) over masked pixels (all channels), capped for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"PSNR inputs differ in shape: {a.shape} vs {b.shape}")
    m = _as_mask(mask, a.shape[:2])
    if not m.any():
        raise ValidationError("PSNR mask is empty")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """SSIM of mask-zeroed images, averaged over pixels whose window touches the mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    m = _as_mask(mask, a.shape[:2])
    if not m.any():
        raise ValidationError("SSIM mask is empty")
    mt = torch.as_tensor(m, dtype=torch.float64)
    zero = mt[..., None] if a.ndim == 3 else mt
    smap = ssim_map(torch.as_tensor(a) * zero, torch.as_tensor(b) * zero)
    kernel = torch.ones(1, 1, SSIM_WINDOW, SSIM_WINDOW, dtype=torch.float64)
    touched = F.conv2d(mt[None, None], kernel, padding=SSIM_WINDOW // 2)[0, 0] > 0
    return float(smap[touched].mean())


def table_depth_map(camera: CameraModel, plane: Plane) -> np.ndarray:
    """Camera depth of the table plane at every pixel center."""
    H, W = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs = np.stack([(jj - camera.cx) / camera.fx, (ii - camera.cy) / camera.fy, np.ones_like(jj)], axis=-1)
    world_dirs = dirs @ camera.rotation.T
    denom = world_dirs @ plane.normal
    numer = -(plane.normal @ camera.center + plane.offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = numer / denom
    # ray direction has unit camera-z, so the ray parameter is the depth
    depth = np.where(np.isfinite(depth) & (depth > 0.0), depth, 0.0)
    return depth


def depth_metrics(pred: np.ndarray, gt: np.ndarray, gt_mask: np.ndarray, table_depth: Any,
                  pred_mask: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """(Abs Rel, RMSE) over the full frame after replacing non-object pixels with table depth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    table = np.broadcast_to(np.asarray(table_depth, dtype=np.float64), gt.shape)
    gm = _as_mask(gt_mask, gt.shape)
    pm = pred > 0.0 if pred_mask is None else _as_mask(pred_mask, gt.shape)
    gt_filled = np.where(gm, gt, table)
    pred_filled = np.where(pm, pred, table)
    if np.any(gt_filled <= 0.0):
        raise ValidationError(f"{int(np.sum(gt_filled <= 0.0))} ground-truth pixels have no positive depth after fill")
    diff = pred_filled - gt_filled
    abs_rel = float(np.mean(np.abs(diff) / gt_filled))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    return abs_rel, rmse


def _average(per_frame: List[Dict[str, Any]]) -> Dict[str, float]:
    """Mean over frames per camera, then over cameras."""
    cameras = sorted({row["camera"] for row in per_frame})
    out = {}
    for key in METRIC_KEYS:
        camera_means = []
        for cam in cameras:
            values = [row[key] for row in per_frame if row["camera"] == cam and row.get(key) is not None]
            if values:
                camera_means.append(float(np.mean(values)))
        out[key] = float(np.mean(camera_means)) if camera_means else float("nan")
    return out


def evaluate_states(states: Sequence[SplatSetState], sequence: SceneSequence, plane: Plane,
                    cfg: Optional[SimConfig] = None) -> Dict[str, Any]:
    """Render predicted states against the sequence's observations and score every frame and camera."""
    cfg = cfg or SimConfig()
    if len(states) != sequence.num_frames:
        raise ValidationError(f"{len(states)} predicted states for {sequence.num_frames} frames")
    table_maps: Dict[str, np.ndarray] = {}
    per_frame: List[Dict[str, Any]] = []
    for t, state in enumerate(states):
        frame = sequence.frames[t]
        for cam in sequence.cameras_at(t):
            with torch.no_grad():
                rgb, alpha, depth = render_state(cam, state.to(torch.float64), cfg.render).numpy()
            moved = cam.name in frame.camera_poses
            if moved or cam.name not in table_maps:
                table_maps[cam.name] = table_depth_map(cam, plane)
            row: Dict[str, Any] = {"frame": t, "camera": cam.name}
            mask = frame.supervision_mask(cam.name).astype(bool)
            if mask.any():
                row["psnr"] = psnr(rgb, frame.rgb[cam.name], mask, cfg.eval.psnr_cap)
                row["ssim"] = ssim(rgb, frame.rgb[cam.name], mask)
            else:
                row["psnr"] = row["ssim"] = None
            try:
                row["abs_rel"], row["rmse"] = depth_metrics(depth, frame.depth[cam.name], frame.object_mask[cam.name],
                                                            table_maps[cam.name], alpha > 0.5)
            except ValidationError as e:
                logger.debug(f"frame {t} camera {cam.name}: depth skipped ({e})")
                row["abs_rel"] = row["rmse"] = None
            per_frame.append(row)
    summary = _average(per_frame)
    summary.update(frames=sequence.num_frames, cameras=len(sequence.cameras), per_frame=per_frame)
    return summary


def predicted_states(params: Optional[DynamicsParams], sequence: SceneSequence, cfg: SimConfig,
                     parents: Optional[Sequence[np.ndarray]] = None) -> Tuple[List[SplatSetState], SceneContext]:
    """Open-loop rollout over the whole sequence; ``params=None`` keeps G_0 frozen."""
    context = scene_context(sequence, cfg, parents)
    if params is None:
        return [sequence.initial_state] * sequence.num_frames, context
    sim = Simulator(params, context.hierarchy, context.graphs, context.env, context.settings,
                    sequence.initial_state.to(params.dtype))
    with torch.no_grad():
        return sim.rollout(sequence.actions, sequence.num_frames - 1), context


def evaluate_sequence(params: Optional[DynamicsParams], sequence: SceneSequence, cfg: SimConfig,
                      mode: str = "general", parents: Optional[Sequence[np.ndarray]] = None) -> Dict[str, Any]:
    """Rollout, render and score every frame; resim and general differ only in which sequences are passed."""
    if mode not in MODES:
        raise ValidationError(f"unknown evaluation mode '{mode}'")
    states, context = predicted_states(params, sequence, cfg, parents)
    result = evaluate_states(states, sequence, context.env.plane, cfg)
    result.update(sequence=sequence.name, mode=mode, task=sequence.metadata.get("task", "unknown"))
    logger.info(f"{sequence.name} [{mode}]: psnr {result['psnr']:.2f} ssim {result['ssim']:.4f} "
                f"abs_rel {result['abs_rel']:.4f} rmse {result['rmse']:.4f}")
    return result


def summarize(results: Sequence[Dict[str, Any]], method: str = "softsplat") -> Dict[str, Any]:
    """Average per-sequence metrics into one val_metrics record."""
    if not results:
        raise ValidationError("no sequences were evaluated")
    tasks = sorted({r["task"] for r in results})
    modes = sorted({r["mode"] for r in results})
    record: Dict[str, Any] = {
        "method": method,
        "task": tasks[0] if len(tasks) == 1 else "+".join(tasks),
        "mode": modes[0] if len(modes) == 1 else "+".join(modes),
        "frames": int(sum(r["frames"] for r in results)),
        "cameras": int(max(r["cameras"] for r in results)),
        "sequences": [r["sequence"] for r in results],
    }
    for key in METRIC_KEYS:
        values = [r[key] for r in results if np.isfinite(r[key])]
        record[key] = float(np.mean(values)) if values else float("nan")
    return record


def write_metrics(record: Dict[str, Any], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_metrics(path: Path) -> Dict[str, Any]:
    record = json.loads(Path(path).read_text())
    missing = [key for key in ("task", "mode") + METRIC_KEYS if key not in record]
    if missing:
        raise ValidationError(f"{path}: metrics file is missing fields {missing}")
    return record


def report(records: Sequence[Dict[str, Any]], out_csv: Path) -> List[Dict[str, Any]]:
    """One row per run, a metric block per task (LPIPS left empty)."""
    if not records:
        raise ValidationError("report needs at least one metrics record")
    for record in records:
        missing = [key for key in ("task",) + METRIC_KEYS if key not in record]
        if missing:
            raise ValidationError(f"metrics record is missing fields {missing}")
    tasks = sorted({r["task"] for r in records})
    header = ["method", "mode"] + [f"{task}/{metric}" for task in tasks for metric in METRIC_COLUMNS]
    rows = []
    for record in records:
        row = {key: "" for key in header}
        row["method"] = sanitize_run_name(str(record.get("method", "run")))
        row["mode"] = record.get("mode", "")
        for metric in METRIC_KEYS:
            row[f"{record['task']}/{metric}"] = f"{float(record[metric]):.6f}"
        rows.append(row)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Wrote report with {len(rows)} rows to {out_csv}")
    return rows


def comparison_grid(predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> np.ndarray:
    """Rows of (prediction, ground truth) tiles, one row per frame, as uint8 RGB."""
    if len(predictions) != len(targets) or not predictions:
        raise ValidationError("grid needs the same non-zero number of predictions and targets")
    rows = []
    for pred, gt in zip(predictions, targets):
        if pred.shape != gt.shape:
            raise ValidationError(f"tile shapes differ: {pred.shape} vs {gt.shape}")
        rows.append(np.concatenate([to_uint8(pred), to_uint8(gt)], axis=1))
    return np.concatenate(rows, axis=0)


def write_grid(params: Optional[DynamicsParams], sequence: SceneSequence, cfg: SimConfig, path: Path,
               parents: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Render a rollout from one camera at evenly spaced frames and save the comparison grid."""
    states, _ = predicted_states(params, sequence, cfg, parents)
    T = sequence.num_frames - 1
    count = min(cfg.eval.grid_frames, sequence.num_frames)
    frames = np.unique(np.round(np.linspace(0, T, count)).astype(int))
    cam_index = min(cfg.eval.grid_camera, len(sequence.cameras) - 1)
    preds, gts = [], []
    for t in frames:
        cam = sequence.cameras_at(int(t))[cam_index]
        with torch.no_grad():
            rgb, _, _ = render_state(cam, states[t].to(torch.float64), cfg.render).numpy()
        preds.append(rgb)
        gts.append(sequence.frames[t].rgb[cam.name])
    grid = comparison_grid(preds, gts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
    return grid

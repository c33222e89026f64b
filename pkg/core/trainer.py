#!/usr/bin/env python3
"""Training module for SoftSplat Sim

Two-stage schedule: a coarse stage rolls out over every k-th frame with step k*dt,
then a fine stage rolls out at full rate and back-propagates only through randomly
placed windows of n*k frames. The loss is the masked image loss over every camera
plus a weighted momentum-consistency term over the hierarchy.
"""

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import SimConfig, dump_config
from core.dynamics import DynamicsParams, SceneContext, Simulator, init_params, parameter_summary, scene_context
from core.errors import SimulationDivergedError, TrainingDivergedError, ValidationError
from core.evalkit import evaluate_sequence, load_metrics, report, summarize, write_metrics
from core.hier import momentum_residual
from core.render import masked_image_loss, rasterize
from core.serialization import dataset_sequences, load_sequence, save_checkpoint
from core.types import CameraModel, SceneSequence, SplatSetState

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("stage", "epoch", "loss", "image", "momentum", "lr")


@dataclass
class TrainingItem:
    """One sequence prepared for training: context, per-frame cameras and supervision tensors."""

    key: str
    sequence: SceneSequence
    context: SceneContext
    cameras: List[List[CameraModel]]
    targets: List[List[Tuple[torch.Tensor, torch.Tensor]]]

    @property
    def num_frames(self) -> int:
        return self.sequence.num_frames


@dataclass
class EpochLog:
    stage: str
    epoch: int
    loss: float
    image: float
    momentum: float
    lr: float

    def row(self) -> Dict[str, Any]:
        return {"stage": self.stage, "epoch": self.epoch, "loss": f"{self.loss:.10g}",
                "image": f"{self.image:.10g}", "momentum": f"{self.momentum:.10g}", "lr": f"{self.lr:.6g}"}


@dataclass
class _Totals:
    image: float = 0.0
    momentum: float = 0.0
    steps: int = field(default=0)

    @property
    def loss(self) -> float:
        return self.image + self.momentum


def prepare_item(sequence: SceneSequence, cfg: SimConfig, dtype: torch.dtype, key: Optional[str] = None,
                 parents: Optional[Sequence[np.ndarray]] = None) -> TrainingItem:
    image_only = cfg.train.supervision == "image_only"
    cameras, targets = [], []
    for t, frame in enumerate(sequence.frames):
        frame_cams = sequence.cameras_at(t)
        cameras.append(frame_cams)
        row = []
        for cam in frame_cams:
            rgb = torch.as_tensor(frame.rgb[cam.name], dtype=dtype)
            if image_only:
                mask = torch.ones(rgb.shape[:2], dtype=dtype)
            else:
                mask = torch.as_tensor(frame.supervision_mask(cam.name), dtype=dtype)
            row.append((rgb, mask))
        targets.append(row)
    context = scene_context(sequence, cfg, parents)
    return TrainingItem(key or sequence.name, sequence, context, cameras, targets)


class Trainer:
    """Owns the parameters, optimizer state and random stream for one training run."""

    def __init__(self, cfg: SimConfig, params: DynamicsParams, items: Sequence[TrainingItem]):
        if not items:
            raise ValidationError("training needs at least one sequence")
        self.cfg = cfg
        self.params = params
        self.items = list(items)
        self.dtype = params.dtype
        self.rng = np.random.default_rng(cfg.seed)
        self.beta = 0.0 if cfg.train.supervision == "image_only" else cfg.train.beta
        self.history: List[EpochLog] = []

    def _simulator(self, item: TrainingItem, stride: int) -> Simulator:
        ctx = item.context
        return Simulator(self.params, ctx.hierarchy, ctx.graphs, ctx.env, ctx.settings.strided(stride),
                         item.sequence.initial_state.to(self.dtype))

    def _image_loss(self, item: TrainingItem, frame: int, state: SplatSetState) -> Tuple[float, Optional[torch.Tensor]]:
        """Image loss value at one frame and its surrogate (state . dLoss/dstate) for back-propagation."""
        tracked = state.positions.requires_grad or state.covariances.requires_grad
        positions = state.positions.detach().clone().requires_grad_(tracked)
        covariances = state.covariances.detach().clone().requires_grad_(tracked)
        with torch.set_grad_enabled(tracked):
            loss = torch.zeros((), dtype=self.dtype)
            for cam, (target, mask) in zip(item.cameras[frame], item.targets[frame]):
                out = rasterize(cam, positions, covariances, state.colors, state.opacities, self.cfg.render)
                loss = loss + masked_image_loss(out, target, mask, self.cfg.render.lam)
        if not tracked:
            return float(loss), None
        g_pos, g_cov = torch.autograd.grad(loss, [positions, covariances], allow_unused=True)
        surrogate = torch.zeros((), dtype=self.dtype)
        if g_pos is not None:
            surrogate = surrogate + (state.positions * g_pos).sum()
        if g_cov is not None:
            surrogate = surrogate + (state.covariances * g_cov).sum()
        return float(loss.detach()), surrogate

    def _momentum(self, item: TrainingItem, predicted: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.beta * momentum_residual(item.context.hierarchy, predicted, self.cfg.dynamics.momentum_normalized)

    def _frame_terms(self, item: TrainingItem, frame: int, state: SplatSetState,
                     predicted: Sequence[torch.Tensor], totals: _Totals) -> torch.Tensor:
        """Record loss values for one supervised frame and return its differentiable objective."""
        value, surrogate = self._image_loss(item, frame, state)
        momentum = self._momentum(item, predicted)
        totals.image += value
        totals.momentum += float(momentum.detach())
        totals.steps += 1
        return momentum if surrogate is None else surrogate + momentum

    def _coarse_sequence(self, item: TrainingItem, stride: int, totals: _Totals) -> None:
        frames = list(range(0, item.num_frames, stride))
        actions = [item.sequence.actions[t] for t in frames]
        sim = self._simulator(item, stride)
        state = prev = sim.initial
        value, _ = self._image_loss(item, 0, state)
        totals.image += value
        objective = None
        for j in range(1, len(frames)):
            new_state, predicted = sim.advance(state, prev, actions[j], actions[j - 1], frames[j])
            objective = _accumulate(objective, self._frame_terms(item, frames[j], new_state, predicted, totals))
            prev, state = state, new_state
        if objective is not None and objective.requires_grad:
            objective.backward()

    def _window_starts(self, T: int, length: int) -> List[int]:
        if length >= T:
            return [0]
        count = self.cfg.train.windows_per_sequence
        starts = sorted(set(int(s) for s in self.rng.integers(0, T - length + 1, size=count)))
        merged = []
        for s in starts:
            if merged and s < merged[-1] + length:
                continue
            merged.append(s)
        return merged

    def _fine_sequence(self, item: TrainingItem, totals: _Totals, window: Optional[int] = None) -> None:
        T = item.num_frames - 1
        length = min(window or self.cfg.train.window_multiplier * self.cfg.train.stride, T)
        starts = self._window_starts(T, length)
        ends = {s + length: s for s in starts}
        sim = self._simulator(item, 1)
        actions = item.sequence.actions
        history = [sim.initial, sim.initial]
        objective = None
        active = False
        for t in range(1, T + 1):
            if t - 1 in starts:
                active = True
                history = [s.detached() for s in history]
            with torch.set_grad_enabled(active):
                state, predicted = sim.advance(history[-1], history[-2], actions[t], actions[t - 1], t)
            if active:
                objective = _accumulate(objective, self._frame_terms(item, t, state, predicted, totals))
            history = [history[-1], state]
            if t in ends:
                if objective is not None and objective.requires_grad:
                    objective.backward()
                objective = None
                active = False
                history = [s.detached() for s in history]

    def _run_stage(self, stage: str, epochs: int, lr: float, sequence_pass) -> List[EpochLog]:
        params = self.params
        optimizer = torch.optim.Adam(params.parameters(), lr=lr)
        scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=self.cfg.train.lr_decay)
        logs = []
        for epoch in range(epochs):
            last_good = copy.deepcopy(params.state_dict())
            totals = _Totals()
            order = self.rng.permutation(len(self.items))
            current_lr = optimizer.param_groups[0]["lr"]
            try:
                for start in range(0, len(order), self.cfg.train.batch):
                    optimizer.zero_grad(set_to_none=True)
                    for index in order[start:start + self.cfg.train.batch]:
                        sequence_pass(self.items[int(index)], totals)
                    if not np.isfinite(totals.loss):
                        raise TrainingDivergedError(stage, epoch, last_good)
                    if self.cfg.train.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(params.parameters(), self.cfg.train.grad_clip)
                    optimizer.step()
            except SimulationDivergedError as e:
                logger.error(f"{stage} epoch {epoch}: {e}")
                raise TrainingDivergedError(stage, epoch, last_good)
            params.check_finite()
            scheduler.step()
            log = EpochLog(stage, epoch, totals.loss, totals.image, totals.momentum, current_lr)
            logger.info(f"{stage} epoch {epoch + 1}/{epochs}: loss {log.loss:.6f} "
                        f"(image {log.image:.6f}, momentum {log.momentum:.6f}) lr {current_lr:.2e}")
            logs.append(log)
        self.history.extend(logs)
        return logs

    def stage1_coarse(self, epochs: Optional[int] = None, stride: Optional[int] = None) -> List[EpochLog]:
        stride = stride or self.cfg.train.stride
        for item in self.items:
            if item.num_frames < 2 * stride:
                logger.warning(f"{item.key}: {item.num_frames} frames give at most one coarse step at stride {stride}")
        epochs = self.cfg.train.stage1_epochs if epochs is None else epochs
        return self._run_stage("stage1", epochs, self.cfg.train.lr,
                               lambda item, totals: self._coarse_sequence(item, stride, totals))

    def stage2_fine(self, epochs: Optional[int] = None, window: Optional[int] = None) -> List[EpochLog]:
        epochs = self.cfg.train.stage2_epochs if epochs is None else epochs
        lr = self.cfg.train.lr * self.cfg.train.stage2_lr_scale
        return self._run_stage("stage2", epochs, lr, lambda item, totals: self._fine_sequence(item, totals, window))

    def train(self) -> List[EpochLog]:
        self.stage1_coarse()
        self.stage2_fine()
        return self.history

    def hierarchies(self) -> Dict[str, List[np.ndarray]]:
        return {item.key: item.context.hierarchy.parents for item in self.items}


def _accumulate(total: Optional[torch.Tensor], term: torch.Tensor) -> torch.Tensor:
    return term if total is None else total + term


def stage1_coarse(params: DynamicsParams, sequences: Sequence[SceneSequence], cfg: SimConfig) -> Tuple[DynamicsParams, List[EpochLog]]:
    trainer = Trainer(cfg, params, [prepare_item(s, cfg, params.dtype) for s in sequences])
    logs = trainer.stage1_coarse()
    return trainer.params, logs


def stage2_fine(params: DynamicsParams, sequences: Sequence[SceneSequence], cfg: SimConfig) -> Tuple[DynamicsParams, List[EpochLog]]:
    trainer = Trainer(cfg, params, [prepare_item(s, cfg, params.dtype) for s in sequences])
    logs = trainer.stage2_fine()
    return trainer.params, logs


def write_loss_csv(logs: Sequence[EpochLog], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(LOSS_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for log in logs:
            writer.writerow(log.row())


def _load_split(datasets: Sequence[Path], split: str) -> List[Tuple[str, SceneSequence]]:
    loaded = []
    for root in datasets:
        root = Path(root)
        for path in dataset_sequences(root, split):
            sequence = load_sequence(path)
            loaded.append((f"{root.resolve().name}/{sequence.name}", sequence))
    return loaded


def train(cfg: SimConfig, datasets: Sequence[Path], out_dir: Path, method: str = "softsplat") -> Dict[str, Any]:
    """Both stages on the union of the datasets' training splits; writes checkpoint, loss curve and metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    train_set = _load_split(datasets, "train")
    if not train_set:
        raise ValidationError(f"no training sequences in {[str(d) for d in datasets]}")
    params = init_params(cfg.dynamics, cfg.seed)
    items = [prepare_item(seq, cfg, params.dtype, key) for key, seq in train_set]
    trainer = Trainer(cfg, params, items)
    logger.info(f"Training on {len(items)} sequences ({parameter_summary(params)['weights']} weights)")

    try:
        trainer.train()
    except TrainingDivergedError as e:
        if e.last_good_state is not None:
            params.load_state_dict(e.last_good_state)
            save_checkpoint(params, out_dir / "checkpoint.bin", trainer.hierarchies(),
                            {"diverged": {"stage": e.stage, "epoch": e.epoch}})
            logger.error(f"Saved last good parameters to {out_dir / 'checkpoint.bin'}")
        write_loss_csv(trainer.history, out_dir / "loss.csv")
        raise

    save_checkpoint(params, out_dir / "checkpoint.bin", trainer.hierarchies())
    write_loss_csv(trainer.history, out_dir / "loss.csv")
    dump_config(cfg, out_dir / "config.json")

    test_set = _load_split(datasets, "test")
    mode = "general"
    if not test_set:
        logger.warning("No held-out sequences; validating on the training split")
        test_set, mode = train_set, "resim"
    parents = trainer.hierarchies()
    results = [evaluate_sequence(params, seq, cfg, mode, parents.get(key)) for key, seq in test_set]
    metrics = summarize(results, method)
    write_metrics(metrics, out_dir / "val_metrics.json")
    return {"checkpoint": str(out_dir / "checkpoint.bin"), "epochs": len(trainer.history),
            "final_loss": trainer.history[-1].loss if trainer.history else None,
            **{k: metrics[k] for k in ("abs_rel", "rmse", "psnr", "ssim")}}


def sweep_stride(cfg: SimConfig, datasets: Sequence[Path], out_dir: Path, strides: Sequence[int]) -> List[Dict[str, Any]]:
    """Train one model per stage-1 stride and tabulate their validation metrics."""
    out_dir = Path(out_dir)
    records = []
    for k in strides:
        run_cfg = cfg.model_copy(deep=True)
        run_cfg.train.stride = int(k)
        train(run_cfg, datasets, out_dir / f"k{k}", method=f"k{k}")
        records.append(load_metrics(out_dir / f"k{k}" / "val_metrics.json"))
    report(records, out_dir / "sweep.csv")
    return records

#!/usr/bin/env python3
"""Synthetic world for SoftSplat Sim

A mass-spring soft-body oracle (cloth grid or rope chain) deformed by a scripted
kinematic gripper, rendered from a desk camera rig into SceneSequence datasets.
The oracle runs in the robot (metric) frame; everything written to a dataset is
expressed in the simulation frame given by the ground-truth similarity.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp

from config import MaterialConfig, RenderConfig, SimConfig, WorldConfig
from core.errors import ReachabilityError, StabilityError, ValidationError
from core.r2s import FingerGeometry, KinematicChain, control_points, fk, gripper_state, map_pose
from core.render import rasterize
from core.serialization import save_dataset_index, save_sequence
from core.types import (CameraModel, Plane, RobotAction, SceneFrame, SceneSequence, SimilarityTransform,
                        SplatSetState)
from utils.helpers import invert_rigid, look_at, make_transform, quantize_unit, seed_everything

logger = logging.getLogger(__name__)

# splat colors for the checker pattern
CHECKER_COLORS = np.array([[0.85, 0.25, 0.20], [0.95, 0.90, 0.80]])
OCCLUDER_GRAY = 0.5
SPLAT_OPACITY = 0.95
BENDING_RATIO = 0.2

# wrist camera axes expressed in the end-effector frame (x right, y down, z forward)
WRIST_CAMERA_ROTATION = np.array([[0.0, 0.0, 1.0],
                                  [1.0, 0.0, 0.0],
                                  [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class OracleScene:
    """Particles, springs, grasp set and splat binding of the ground-truth soft body."""

    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    springs: np.ndarray
    rest_lengths: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    table: Plane
    gravity: np.ndarray
    splat_particles: np.ndarray
    splat_offsets: np.ndarray
    splat_covariances: np.ndarray
    colors: np.ndarray
    attributes: np.ndarray
    grasped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    grasp_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    drag: float = 0.0
    friction: float = 0.0
    kind: str = "cloth"
    spacing: float = 0.0
    grid: Tuple[int, ...] = ()

    def __post_init__(self):
        n = self.positions.shape[0]
        if self.velocities.shape != (n, 3) or self.masses.shape != (n,):
            raise ValidationError("particle arrays disagree on count")
        if np.any(self.masses <= 0.0):
            raise ValidationError("particle masses must be positive")
        s = self.springs.shape[0]
        if s and (self.springs.min() < 0 or self.springs.max() >= n):
            raise ValidationError("spring index out of range")
        for name in ("rest_lengths", "stiffness", "damping"):
            if getattr(self, name).shape != (s,):
                raise ValidationError(f"spring {name} must have one entry per spring")
        if s and np.any(self.rest_lengths <= 0.0):
            raise ValidationError("spring rest lengths must be positive")
        if np.any(self.stiffness < 0.0) or np.any(self.damping < 0.0):
            raise ValidationError("spring stiffness and damping must be non-negative")
        if self.grasped.size and (self.grasped.min() < 0 or self.grasped.max() >= n):
            raise ValidationError("grasped particle index out of range")
        if self.grasp_offsets.shape != (self.grasped.size, 3):
            raise ValidationError("one grasp offset per grasped particle")
        if sorted(self.splat_particles.tolist()) != list(range(n)):
            raise ValidationError("splat binding must attach exactly one splat to each particle")

    @property
    def num_particles(self) -> int:
        return int(self.positions.shape[0])

    def replace(self, **changes) -> "OracleScene":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return OracleScene(**values)

    def splat_positions(self) -> np.ndarray:
        return self.positions[self.splat_particles] + self.splat_offsets

    def stability_bound(self) -> float:
        """2 sqrt(m_min / k_max); infinite without springs."""
        if self.springs.shape[0] == 0 or self.stiffness.max() == 0.0:
            return math.inf
        return 2.0 * math.sqrt(self.masses.min() / self.stiffness.max())

    def energy(self) -> float:
        """Kinetic + spring + gravitational potential energy."""
        kinetic = 0.5 * float(np.sum(self.masses * np.sum(self.velocities ** 2, axis=1)))
        lengths = spring_lengths(self.positions, self.springs)
        elastic = 0.5 * float(np.sum(self.stiffness * (lengths - self.rest_lengths) ** 2))
        potential = -float(np.sum(self.masses * (self.positions @ self.gravity)))
        return kinetic + elastic + potential


@dataclass(frozen=True)
class GraspCommand:
    """attach (particles within ``radius`` of the gripper midpoint), detach or hold."""

    kind: str = "hold"
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("attach", "detach", "hold"):
            raise ValidationError(f"unknown grasp command '{self.kind}'")


HOLD = GraspCommand("hold")


@dataclass(frozen=True)
class ScriptedTask:
    kind: str
    q: np.ndarray
    gripper: np.ndarray
    frames: int
    dt: float
    grasp_particle: int
    attach_frame: int
    release_frame: Optional[int] = None
    ee_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("lift", "drag", "fold"):
            raise ValidationError(f"unknown task kind '{self.kind}'")
        if self.q.shape[0] != self.frames or self.gripper.shape != (self.frames,):
            raise ValidationError("task trajectory length must equal the frame count")
        if np.any(self.gripper < 0.0) or np.any(self.gripper > 1.0):
            raise ValidationError("gripper schedule must lie in [0, 1]")

    def command(self, frame: int, radius: float) -> GraspCommand:
        if frame == self.attach_frame:
            return GraspCommand("attach", radius)
        if self.release_frame is not None and frame == self.release_frame:
            return GraspCommand("detach")
        return HOLD


def spring_lengths(positions: np.ndarray, springs: np.ndarray) -> np.ndarray:
    d = positions[springs[:, 1]] - positions[springs[:, 0]]
    return np.sqrt(np.sum(d * d, axis=1))


def _cloth_springs(nx: int, ny: int) -> Tuple[np.ndarray, np.ndarray]:
    """Structural and shear springs of an nx x ny grid (particle id = i * ny + j)."""
    def pid(i, j):
        return i * ny + j

    structural, shear = [], []
    for i in range(nx):
        for j in range(ny):
            if i + 1 < nx:
                structural.append((pid(i, j), pid(i + 1, j)))
            if j + 1 < ny:
                structural.append((pid(i, j), pid(i, j + 1)))
            if i + 1 < nx and j + 1 < ny:
                shear.append((pid(i, j), pid(i + 1, j + 1)))
                shear.append((pid(i + 1, j), pid(i, j + 1)))
    return np.array(structural, dtype=np.int64).reshape(-1, 2), np.array(shear, dtype=np.int64).reshape(-1, 2)


def _rope_springs(n: int) -> Tuple[np.ndarray, np.ndarray]:
    structural = np.array([(i, i + 1) for i in range(n - 1)], dtype=np.int64).reshape(-1, 2)
    bending = np.array([(i, i + 2) for i in range(n - 2)], dtype=np.int64).reshape(-1, 2)
    return structural, bending


def material_attributes(kind: str, material: MaterialConfig, boundary: np.ndarray, attr_dim: int) -> np.ndarray:
    """Per-particle material descriptors, zero-padded or cut to attr_dim."""
    n = boundary.shape[0]
    base = np.stack([
        np.full(n, 1.0 if kind == "cloth" else 0.0),
        np.full(n, math.log10(material.stiffness) / 3.0),
        np.full(n, material.damping * 10.0),
        np.full(n, material.total_mass * 10.0),
        boundary.astype(np.float64),
    ], axis=1)
    out = np.zeros((n, attr_dim))
    width = min(attr_dim, base.shape[1])
    out[:, :width] = base[:, :width]
    return out


def make_scene(kind: str, resolution: Sequence[int], extent: Sequence[float], material: MaterialConfig,
               seed: int, center: Sequence[float] = (0.0, 0.0), center_jitter: float = 0.0,
               yaw_jitter: float = 0.0, gravity: float = 9.81, attr_dim: int = 8) -> OracleScene:
    """Cloth grid or rope chain resting on the table z = 0 with a seeded placement."""
    if kind not in ("cloth", "rope"):
        raise ValidationError(f"unknown object kind '{kind}'")
    for name in ("stiffness", "damping", "total_mass"):
        if not getattr(material, name) > 0.0:
            raise ValidationError(f"material {name} must be positive")
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(-yaw_jitter, yaw_jitter) if yaw_jitter > 0 else 0.0
    shift = rng.uniform(-center_jitter, center_jitter, size=2) if center_jitter > 0 else np.zeros(2)

    if kind == "cloth":
        nx, ny = (int(r) for r in resolution)
        ex, ey = (float(e) for e in extent)
        if nx < 2 or ny < 2:
            raise ValidationError(f"cloth grid needs at least 2 particles per axis, got {nx}x{ny}")
        if ex <= 0.0 or ey <= 0.0:
            raise ValidationError(f"cloth extent must be positive, got {extent}")
        gx = np.linspace(-ex / 2.0, ex / 2.0, nx)
        gy = np.linspace(-ey / 2.0, ey / 2.0, ny)
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        local = np.stack([gx[ii.reshape(-1)], gy[jj.reshape(-1)], np.zeros(nx * ny)], axis=1)
        structural, secondary = _cloth_springs(nx, ny)
        spacing = min(ex / (nx - 1), ey / (ny - 1))
        checker = ((ii // 2 + jj // 2) % 2).reshape(-1)
        boundary = ((ii == 0) | (ii == nx - 1) | (jj == 0) | (jj == ny - 1)).reshape(-1)
        secondary_ratio = 1.0
        grid: Tuple[int, ...] = (nx, ny)
    else:
        n = int(resolution[0]) if isinstance(resolution, (tuple, list)) else int(resolution)
        length = float(extent[0]) if isinstance(extent, (tuple, list)) else float(extent)
        if n < 2:
            raise ValidationError(f"rope needs at least 2 particles, got {n}")
        if length <= 0.0:
            raise ValidationError(f"rope length must be positive, got {length}")
        xs = np.linspace(-length / 2.0, length / 2.0, n)
        local = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
        structural, secondary = _rope_springs(n)
        spacing = length / (n - 1)
        checker = (np.arange(n) // 2) % 2
        boundary = np.zeros(n, dtype=bool)
        boundary[[0, -1]] = True
        secondary_ratio = BENDING_RATIO
        grid = (n,)

    R = Rotation.from_euler("z", yaw).as_matrix()
    positions = local @ R.T + np.array([center[0] + shift[0], center[1] + shift[1], 0.0])
    n = positions.shape[0]
    springs = np.concatenate([structural, secondary], axis=0)
    stiffness = np.concatenate([np.full(len(structural), material.stiffness),
                                np.full(len(secondary), material.stiffness * secondary_ratio)])
    damping = np.full(springs.shape[0], material.damping)
    cov = np.tile(np.eye(3) * (spacing / 2.0) ** 2, (n, 1, 1))
    return OracleScene(
        positions=positions,
        velocities=np.zeros((n, 3)),
        masses=np.full(n, material.total_mass / n),
        springs=springs,
        rest_lengths=spring_lengths(positions, springs),
        stiffness=stiffness,
        damping=damping,
        table=Plane(np.array([0.0, 0.0, 1.0]), 0.0),
        gravity=np.array([0.0, 0.0, -gravity]),
        splat_particles=np.arange(n),
        splat_offsets=np.zeros((n, 3)),
        splat_covariances=cov,
        colors=CHECKER_COLORS[checker],
        attributes=material_attributes(kind, material, boundary, attr_dim),
        drag=material.drag,
        friction=material.friction,
        kind=kind,
        spacing=spacing,
        grid=grid,
    )


def _spring_forces(scene: OracleScene, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    forces = np.zeros_like(x)
    if scene.springs.shape[0] == 0:
        return forces
    i, j = scene.springs[:, 0], scene.springs[:, 1]
    d = x[j] - x[i]
    length = np.sqrt(np.sum(d * d, axis=1))
    u = d / np.maximum(length, 1e-12)[:, None]
    rel_speed = np.sum((v[j] - v[i]) * u, axis=1)
    magnitude = scene.stiffness * (length - scene.rest_lengths) + scene.damping * rel_speed
    f = magnitude[:, None] * u
    np.add.at(forces, i, f)
    np.add.at(forces, j, -f)
    return forces


def _apply_table(scene: OracleScene, x: np.ndarray, v: np.ndarray) -> None:
    n = scene.table.normal
    d = x @ n + scene.table.offset
    below = d < 0.0
    if not np.any(below):
        return
    x[below] -= d[below][:, None] * n
    vn = v[below] @ n
    approaching = np.minimum(vn, 0.0)
    v_normal_removed = -approaching
    v[below] -= approaching[:, None] * n
    tangential = v[below] - (v[below] @ n)[:, None] * n
    speed = np.linalg.norm(tangential, axis=1)
    scale = np.where(speed > 0.0, np.maximum(0.0, 1.0 - scene.friction * v_normal_removed / np.maximum(speed, 1e-12)), 1.0)
    v[below] -= ((1.0 - scale)[:, None]) * tangential


def step_oracle(scene: OracleScene, grasp_pose: np.ndarray, command: GraspCommand, dt: float) -> OracleScene:
    """One semi-implicit Euler step with kinematic grasp pinning and table projection."""
    if not dt > 0.0:
        raise StabilityError(f"oracle dt must be positive, got {dt}")
    bound = scene.stability_bound()
    if dt >= bound:
        raise StabilityError(f"oracle dt {dt:.3e} exceeds the stability bound {bound:.3e}")

    grasped, offsets = scene.grasped, scene.grasp_offsets
    pose = np.asarray(grasp_pose, dtype=np.float64)
    if command.kind == "attach":
        dist = np.linalg.norm(scene.positions - pose[:3, 3], axis=1)
        grasped = np.nonzero(dist <= command.radius)[0]
        local = invert_rigid(pose)
        offsets = scene.positions[grasped] @ local[:3, :3].T + local[:3, 3]
    elif command.kind == "detach":
        grasped, offsets = np.zeros(0, dtype=np.int64), np.zeros((0, 3))

    x = scene.positions.copy()
    v = scene.velocities.copy()
    forces = _spring_forces(scene, x, v) + scene.masses[:, None] * scene.gravity
    v = v + dt * forces / scene.masses[:, None]
    v = v * math.exp(-scene.drag * dt)
    x = x + dt * v
    _apply_table(scene, x, v)

    if grasped.size:
        pinned = offsets @ pose[:3, :3].T + pose[:3, 3]
        v[grasped] = (pinned - scene.positions[grasped]) / dt
        x[grasped] = pinned
    return scene.replace(positions=x, velocities=v, grasped=grasped, grasp_offsets=offsets)


def _interpolate_poses(start: np.ndarray, end: np.ndarray, count: int) -> List[np.ndarray]:
    """Poses at fractions 1/count .. 1 between start and end (lerp + slerp)."""
    rotations = Rotation.from_matrix(np.stack([start[:3, :3], end[:3, :3]]))
    slerp = Slerp([0.0, 1.0], rotations)
    fractions = np.arange(1, count + 1) / count
    mats = slerp(fractions).as_matrix()
    return [make_transform(mats[k], (1.0 - f) * start[:3, 3] + f * end[:3, 3]) for k, f in enumerate(fractions)]


def simulate(scene: OracleScene, poses: Sequence[np.ndarray], commands: Sequence[GraspCommand],
             frame_dt: float, safety: float = 0.2) -> List[OracleScene]:
    """Advance frame by frame with enough substeps for stability; returns one scene per frame."""
    if len(poses) != len(commands):
        raise ValidationError("need one gripper pose and command per frame")
    substeps = max(1, int(math.ceil(frame_dt / (safety * scene.stability_bound())))) \
        if math.isfinite(scene.stability_bound()) else 1
    dt = frame_dt / substeps
    frames = [scene.replace(velocities=np.zeros_like(scene.velocities))]
    current = frames[0]
    for t in range(1, len(poses)):
        sub_poses = _interpolate_poses(poses[t - 1], poses[t], substeps)
        for k, pose in enumerate(sub_poses):
            command = commands[t] if k == 0 else HOLD
            current = step_oracle(current, pose, command, dt)
        if not np.all(np.isfinite(current.positions)):
            raise StabilityError(f"oracle produced non-finite positions at frame {t}")
        frames.append(current)
    logger.debug(f"Simulated {len(poses)} frames with {substeps} substeps per frame")
    return frames


def smoothstep(u: np.ndarray) -> np.ndarray:
    """Cubic ease 3u^2 - 2u^3 (zero slope at both ends)."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def solve_ik(chain: KinematicChain, target: Sequence[float], gripper_value: float = 0.0) -> np.ndarray:
    """Closed-form yaw/shoulder/elbow solution placing the flange at target (elbow up)."""
    shoulder = chain.joints[1].origin[:3, 3]
    upper = np.linalg.norm(chain.joints[2].origin[:3, 3])
    fore_vec = chain.joints[3].origin[:3, 3] + chain.ee_transform[:3, 3]
    fore = np.linalg.norm(fore_vec)
    x, y, z = (float(v) for v in target)
    yaw = math.atan2(y, x)
    a = math.hypot(x, y) - shoulder[0]
    b = shoulder[2] - z
    D = (a * a + b * b - upper ** 2 - fore ** 2) / (2.0 * upper * fore)
    if abs(D) > 1.0:
        raise ReachabilityError(f"grasp target {np.round(target, 4).tolist()} is outside the arm's workspace")
    elbow = math.acos(D)
    shoulder_angle = math.atan2(b, a) - math.atan2(fore * math.sin(elbow), upper + fore * math.cos(elbow))
    q = np.zeros(chain.num_joints)
    q[0], q[1], q[2] = yaw, shoulder_angle, elbow
    if chain.gripper_joint is not None:
        q[chain.gripper_joint] = gripper_value
    return q


def _grasp_candidates(scene: OracleScene, kind: str) -> np.ndarray:
    if scene.kind == "rope":
        n = scene.num_particles
        ends = max(1, n // 5)
        return np.concatenate([np.arange(ends), np.arange(n - ends, n)])
    nx, ny = scene.grid
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    if kind == "fold":
        # short edges, so the fold axis crosses the long side
        edge = (ii == 0) | (ii == nx - 1)
    else:
        edge = (ii == 0) | (ii == nx - 1) | (jj == 0) | (jj == ny - 1)
    return np.nonzero(edge.reshape(-1))[0]


def script_task(kind: str, scene: OracleScene, frames: int, dt: float, seed: int, chain: KinematicChain,
                world: Optional[WorldConfig] = None) -> ScriptedTask:
    """Approach, close, move (lift / drag / fold) and optionally release, with cubic easing."""
    world = world or WorldConfig()
    if frames < 10:
        raise ValidationError(f"a scripted task needs at least 10 frames, got {frames}")
    if kind not in ("lift", "drag", "fold"):
        raise ValidationError(f"unknown task kind '{kind}'")
    rng = np.random.default_rng(seed)
    candidates = _grasp_candidates(scene, kind)
    grasp = int(candidates[rng.integers(len(candidates))])
    p0 = scene.positions[grasp].copy()
    center = scene.positions.mean(axis=0)

    n_approach = max(2, int(round(0.2 * frames)))
    n_close = max(1, int(round(0.1 * frames)))
    n_release = max(1, int(round(0.1 * frames))) if world.release else 0
    n_motion = frames - n_approach - n_close - n_release
    if n_motion < 1:
        raise ValidationError(f"{frames} frames leave no room for the motion phase")

    above = p0 + np.array([0.0, 0.0, world.approach_height])
    targets, closure = [], []
    for i in range(n_approach):
        u = smoothstep(np.array(i / (n_approach - 1)))
        targets.append(above + u * (p0 - above))
        closure.append(1.0)
    for i in range(n_close):
        targets.append(p0.copy())
        closure.append(float(1.0 - smoothstep(np.array((i + 1) / n_close))))

    if kind == "lift":
        p1 = p0 + np.array([0.0, 0.0, world.lift_height])
    elif kind == "drag":
        angle = rng.uniform(-math.pi, math.pi)
        distance = rng.uniform(*world.drag_distance)
        p1 = p0 + distance * np.array([math.cos(angle), math.sin(angle), 0.0])
    else:
        axis = p0 - center
        axis[2] = 0.0
        axis /= max(np.linalg.norm(axis), 1e-12)
        p1 = p0 - 2.0 * float((p0 - center) @ axis) * axis
        p1[2] = p0[2] + world.fold_clearance
    arc_height = 0.5 * float(np.linalg.norm((p1 - p0)[:2])) if kind == "fold" else 0.0
    for i in range(n_motion):
        u = float(smoothstep(np.array((i + 1) / n_motion)))
        point = p0 + u * (p1 - p0)
        point[2] += arc_height * math.sin(math.pi * u)
        targets.append(point)
        closure.append(0.0)
    for i in range(n_release):
        targets.append(targets[-1].copy())
        closure.append(float(smoothstep(np.array((i + 1) / n_release))))

    span = chain.gripper_open - chain.gripper_closed
    q = np.stack([solve_ik(chain, target, chain.gripper_closed + c * span) for target, c in zip(targets, closure)])
    gripper = np.array([gripper_state(chain, qt) for qt in q])
    attach_frame = n_approach + n_close - 1
    release_frame = n_approach + n_close + n_motion if n_release else None
    return ScriptedTask(kind, q, gripper, frames, dt, grasp, attach_frame, release_frame, np.stack(targets))


def run_task(scene: OracleScene, task: ScriptedTask, chain: KinematicChain,
             world: Optional[WorldConfig] = None) -> List[OracleScene]:
    """Oracle trajectory under the task's gripper poses and grasp commands."""
    world = world or WorldConfig()
    radius = world.grasp_radius_factor * scene.spacing
    poses = [fk(chain, qt) for qt in task.q]
    commands = [task.command(t, radius) for t in range(task.frames)]
    return simulate(scene, poses, commands, task.dt, world.substep_safety)


def make_camera(name: str, pose: np.ndarray, width: int, height: int, fov_deg: float) -> CameraModel:
    f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraModel(name, f, f, width / 2.0, height / 2.0, width, height, pose)


def downsample(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Box-filter an image down to ``size`` = (width, height); integer factors average whole blocks."""
    if image.shape[1] == size[0] and image.shape[0] == size[1]:
        return image
    return cv2.resize(np.ascontiguousarray(image, dtype=np.float64), size, interpolation=cv2.INTER_AREA)


def wrist_camera_pose(T_ee_sim: np.ndarray, X: SimilarityTransform, offset: Sequence[float]) -> np.ndarray:
    """World-from-camera pose of the wrist camera for a simulation-frame flange pose (rotation block may be scaled)."""
    R = T_ee_sim[:3, :3] / X.scale
    position = T_ee_sim[:3, :3] @ np.asarray(offset, dtype=np.float64) + T_ee_sim[:3, 3]
    return make_transform(R @ WRIST_CAMERA_ROTATION, position)


def ground_truth_transform(world: WorldConfig) -> SimilarityTransform:
    return SimilarityTransform(world.rec_scale, Rotation.from_euler("z", world.rec_yaw).as_matrix(),
                               np.asarray(world.rec_translation, dtype=np.float64))


def _finger_boxes(T_ee_sim: np.ndarray, c: float, robot_geometry: Dict[str, float]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(box-from-world affine, half extents) for the two fingers."""
    half_gap = c * robot_geometry["max_opening"] / 2.0
    half = np.array([robot_geometry["finger_length"] / 2.0, robot_geometry["finger_width"] / 2.0,
                     robot_geometry["finger_width"] / 2.0])
    boxes = []
    for side in (-1.0, 1.0):
        offset = np.array([0.0, side * (half_gap + half[1]), 0.0])
        T_box = T_ee_sim @ make_transform(np.eye(3), offset)
        boxes.append((np.linalg.inv(T_box), half))
    return boxes


def render_occluder(camera: CameraModel, boxes: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Per-pixel camera depth of the nearest finger box (inf where no box is hit)."""
    H, W = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs_cam = np.stack([(jj - camera.cx) / camera.fx, (ii - camera.cy) / camera.fy, np.ones_like(jj)], axis=-1)
    dirs_world = dirs_cam.reshape(-1, 3) @ camera.rotation.T
    origin = camera.center
    depth = np.full(H * W, np.inf)
    for box_from_world, half in boxes:
        o = box_from_world[:3, :3] @ origin + box_from_world[:3, 3]
        d = dirs_world @ box_from_world[:3, :3].T
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_far > 0.0)
        t_hit = np.where(t_near > 0.0, t_near, t_far)
        # ray parameter t equals camera depth because direction z = 1 in the camera frame
        depth = np.where(hit, np.minimum(depth, t_hit), depth)
    return depth.reshape(H, W)


def state_from_scene(scene: OracleScene, X: SimilarityTransform, t: int = 0) -> SplatSetState:
    """Splat state of an oracle scene in the simulation frame, rounded to float32 storage precision."""
    positions = X.apply_points(scene.splat_positions()).astype(np.float32).astype(np.float64)
    # already exactly symmetric; elementwise rounding keeps it so
    cov = X.apply_covariances(scene.splat_covariances).astype(np.float32).astype(np.float64)
    n = positions.shape[0]
    masses = scene.masses[scene.splat_particles].astype(np.float32).astype(np.float64)

    def tensor(values):
        return torch.as_tensor(np.asarray(values, dtype=np.float64))

    return SplatSetState(
        positions=tensor(positions),
        covariances=tensor(cov),
        masses=tensor(masses),
        attributes=tensor(scene.attributes[scene.splat_particles].astype(np.float32)),
        colors=tensor(scene.colors[scene.splat_particles].astype(np.float32)),
        opacities=tensor(np.full(n, SPLAT_OPACITY, dtype=np.float32)),
        velocities=tensor(np.zeros((n, 3))),
        t=t,
    )


def build_cameras(cfg: SimConfig, X: SimilarityTransform, T_ee_sim0: np.ndarray) -> List[CameraModel]:
    rig = cfg.cameras
    cameras = [make_camera(rig.wrist_name, wrist_camera_pose(T_ee_sim0, X, rig.wrist_offset),
                           rig.width, rig.height, rig.fov_deg)]
    for index, eye in enumerate(rig.static_eyes):
        pose_rob = look_at(eye, rig.target)
        cameras.append(make_camera(f"static{index}", X.apply_rigid(pose_rob), rig.width, rig.height, rig.fov_deg))
    return cameras


def render_dataset(trajectory: Sequence[OracleScene], task: ScriptedTask, cameras: Sequence[CameraModel],
                   chain: KinematicChain, X: SimilarityTransform, cfg: SimConfig, name: str = "seq",
                   wrist_name: Optional[str] = None) -> SceneSequence:
    """Render every frame from every camera and package the sequence with its actions."""
    if len(trajectory) != task.frames:
        raise ValidationError(f"trajectory has {len(trajectory)} frames, task has {task.frames}")
    wrist_name = wrist_name or cfg.cameras.wrist_name
    render_cfg: RenderConfig = cfg.render
    factor = cfg.cameras.supersample
    fingers = FingerGeometry.from_config(cfg.robot)
    geometry = {"finger_length": cfg.robot.finger_length * X.scale,
                "finger_width": cfg.robot.finger_width * X.scale,
                "max_opening": cfg.robot.max_opening * X.scale}

    frames: List[SceneFrame] = []
    pose_pairs: List[Dict[str, Any]] = []
    for t, scene in enumerate(trajectory):
        state = state_from_scene(scene, X, t)
        T_ee_rob = fk(chain, task.q[t])
        T_ee_sim = map_pose(T_ee_rob, X)
        c = gripper_state(chain, task.q[t])
        action = RobotAction(task.q[t], T_ee_sim, c, control_points(T_ee_sim, c, fingers))
        T_rigid_sim = X.apply_rigid(T_ee_rob)
        boxes = _finger_boxes(T_rigid_sim, c, geometry)

        rgb, depth, obj, occ, poses = {}, {}, {}, {}, {}
        for cam in cameras:
            if cam.name == wrist_name:
                pose = wrist_camera_pose(T_ee_sim, X, cfg.cameras.wrist_offset)
                cam = cam.moved(pose)
                poses[cam.name] = pose
                T_rob = wrist_camera_pose(T_ee_rob, SimilarityTransform.identity(), cfg.cameras.wrist_offset)
                pose_pairs.append({"frame": t, "robot": T_rob.tolist(), "rec": pose.tolist()})
            cam_depths = (state.positions.numpy() - cam.center) @ cam.optical_axis
            if np.all(cam_depths <= 0.0):
                raise ValidationError(f"camera {cam.name} at frame {t} is behind the scene")
            fine = cam.scaled(factor)
            with torch.no_grad():
                out = rasterize(fine, state.positions, state.covariances, state.colors, state.opacities, render_cfg)
            image, alpha, obj_depth = out.numpy()
            occ_depth = render_occluder(fine, boxes)
            object_fine = alpha > 0.5
            occluder_fine = np.isfinite(occ_depth) & (
                ~object_fine | (occ_depth < np.where(obj_depth > 0, obj_depth, np.inf)))
            image = image.copy()
            image[occluder_fine] = OCCLUDER_GRAY
            size = (cam.width, cam.height)
            coverage = downsample(object_fine.astype(np.float64), size)
            object_mask = coverage >= 0.5
            depth_sum = downsample(np.where(object_fine, obj_depth, 0.0), size)
            rgb[cam.name] = quantize_unit(downsample(image, size))
            depth[cam.name] = np.where(object_mask, depth_sum / np.maximum(coverage, 1e-12), 0.0).astype(np.float32)
            obj[cam.name] = object_mask.astype(np.uint8)
            occ[cam.name] = (downsample(occluder_fine.astype(np.float64), size) >= 0.5).astype(np.uint8)
        frames.append(SceneFrame(t, rgb, depth, obj, occ, action, poses))

    initial = state_from_scene(trajectory[0], X, 0)
    metadata = {
        "task": task.kind,
        "object": trajectory[0].kind,
        "grasp_particle": task.grasp_particle,
        "calibration_truth": X.to_record(),
        "wrist_camera": wrist_name,
        "wrist_pose_pairs": pose_pairs,
        "reference_pairs": reference_pairs(trajectory[0], cfg, X),
    }
    return SceneSequence(name, list(cameras), frames, task.dt, initial, np.zeros((0, 3)), metadata)


def reference_pairs(scene: OracleScene, cfg: SimConfig, X: SimilarityTransform) -> List[Dict[str, float]]:
    """Known object and gripper dimensions as (reconstruction, metric) length pairs."""
    if scene.kind == "cloth":
        metric = [float(v) for v in cfg.world.cloth_extent]
    else:
        metric = [float(cfg.world.rope_length)]
    metric.append(float(cfg.robot.finger_length))
    return [{"rec": X.scale * m, "metric": m} for m in metric]


def table_points(cfg: SimConfig, X: SimilarityTransform, rng: np.random.Generator) -> np.ndarray:
    """Noisy samples of the table surface around the workspace, in the simulation frame."""
    world = cfg.world
    n = world.table_points
    xy = rng.uniform(-0.25, 0.25, size=(n, 2)) + np.asarray(world.object_center)
    z = rng.normal(0.0, world.table_noise, size=n) if world.table_noise > 0 else np.zeros(n)
    return X.apply_points(np.column_stack([xy, z]))


def generate_sequence(cfg: SimConfig, seed: int, name: str, task: Optional[str] = None,
                      object_kind: Optional[str] = None) -> SceneSequence:
    """Scene, scripted task, oracle trajectory and renders for one seed."""
    world = cfg.world
    task = task or world.task
    object_kind = object_kind or world.object_kind
    rng = seed_everything(seed)
    chain = KinematicChain.from_config(cfg.robot)
    if object_kind == "cloth":
        resolution, extent = world.cloth_grid, world.cloth_extent
    else:
        resolution, extent = (world.rope_particles,), (world.rope_length,)
    scene = make_scene(object_kind, resolution, extent, world.material, seed, world.object_center,
                       world.center_jitter, world.yaw_jitter, world.gravity, cfg.dynamics.attr_dim)
    scripted = script_task(task, scene, world.frames, world.dt, seed, chain, world)
    trajectory = run_task(scene, scripted, chain, world)
    X = ground_truth_transform(world)
    cameras = build_cameras(cfg, X, map_pose(fk(chain, scripted.q[0]), X))
    sequence = render_dataset(trajectory, scripted, cameras, chain, X, cfg, name)
    metadata = dict(sequence.metadata, seed=seed)
    logger.info(f"Generated {name}: {object_kind} {task}, {scene.num_particles} splats, {world.frames} frames")
    return SceneSequence(sequence.name, sequence.cameras, sequence.frames, sequence.dt, sequence.initial_state,
                         table_points(cfg, X, rng), metadata)


def split_sequences(count: int, train_fraction: float, seed: int) -> Dict[str, List[int]]:
    """Seeded train/test split of sequence indices (7:3 by default)."""
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(round(train_fraction * count))
    if count > 1:
        n_train = min(max(n_train, 1), count - 1)
    return {"train": sorted(int(i) for i in order[:n_train]), "test": sorted(int(i) for i in order[n_train:])}


def generate_dataset(cfg: SimConfig, out_dir: Path, count: Optional[int] = None,
                     task: Optional[str] = None, object_kind: Optional[str] = None) -> Dict[str, Any]:
    """Write ``count`` sequences plus a dataset index with the seeded train/test split."""
    out_dir = Path(out_dir)
    count = count or cfg.world.sequences
    split_idx = split_sequences(count, cfg.world.train_fraction, cfg.seed)
    names = [f"seq_{i:03d}" for i in range(count)]
    membership = {i: name for name, ids in split_idx.items() for i in ids}
    for i, name in enumerate(names):
        sequence = generate_sequence(cfg, cfg.seed * 1000 + i, name, task, object_kind)
        metadata = dict(sequence.metadata, split=membership[i])
        sequence = SceneSequence(sequence.name, sequence.cameras, sequence.frames, sequence.dt,
                                 sequence.initial_state, sequence.table_points, metadata)
        save_sequence(sequence, out_dir / name)
    split = {key: [names[i] for i in ids] for key, ids in split_idx.items()}
    info = {"task": task or cfg.world.task, "object": object_kind or cfg.world.object_kind, "seed": cfg.seed}
    save_dataset_index(out_dir, names, split, info)
    logger.info(f"Wrote {count} sequences to {out_dir} ({len(split['train'])} train / {len(split['test'])} test)")
    return {"sequences": names, "split": split, **info}

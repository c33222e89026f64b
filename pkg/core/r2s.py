#!/usr/bin/env python3
"""Real-to-sim mapping module for SoftSplat Sim

Metric scale recovery, rigid alignment from paired camera poses, forward
kinematics of the serial chain, pose mapping into the simulation frame, table
plane fitting and gravity-direction resolution.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from config import NUM_CONTROL_POINTS, RobotConfig
from core.errors import CalibrationError, ValidationError
from core.types import Plane, SimilarityTransform
from utils.helpers import make_transform, rigid_error, transform_from_record

logger = logging.getLogger(__name__)

RIGID_TOL = 1e-8
FINGER_POINTS = NUM_CONTROL_POINTS // 2


@dataclass(frozen=True)
class Joint:
    """One joint: fixed parent-to-joint transform followed by motion about/along ``axis``."""

    kind: str
    axis: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValidationError(f"unknown joint type '{self.kind}'")
        axis = np.asarray(self.axis, dtype=np.float64)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValidationError(f"joint axis must be a unit 3-vector, got {axis}")
        origin = np.asarray(self.origin, dtype=np.float64)
        problem = rigid_error(origin, RIGID_TOL)
        if problem:
            raise ValidationError(f"joint origin: {problem}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", origin)

    def motion(self, value: float) -> np.ndarray:
        if self.kind == "revolute":
            return make_transform(Rotation.from_rotvec(self.axis * value).as_matrix(), np.zeros(3))
        return make_transform(np.eye(3), self.axis * value)


@dataclass(frozen=True)
class KinematicChain:
    """Serial chain with an optional gripper joint that opens the fingers without moving the flange."""

    joints: List[Joint]
    ee_transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    gripper_joint: Optional[int] = None
    gripper_closed: float = 0.0
    gripper_open: float = 1.0
    base: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not self.joints:
            raise ValidationError("a kinematic chain needs at least one joint")
        if self.gripper_joint is not None and not 0 <= self.gripper_joint < len(self.joints):
            raise ValidationError(f"gripper joint index {self.gripper_joint} out of range")
        for name in ("ee_transform", "base"):
            problem = rigid_error(getattr(self, name), RIGID_TOL)
            if problem:
                raise ValidationError(f"chain {name}: {problem}")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @classmethod
    def from_config(cls, robot: RobotConfig) -> "KinematicChain":
        joints = []
        for record in robot.joints:
            axis = np.asarray(record.axis, dtype=np.float64)
            norm = np.linalg.norm(axis)
            if norm == 0.0:
                raise ValidationError("joint axis must be non-zero")
            joints.append(Joint(record.type, axis / norm, transform_from_record(record.translation, record.quaternion)))
        return cls(
            joints=joints,
            ee_transform=transform_from_record(robot.ee_translation, robot.ee_quaternion),
            gripper_joint=robot.gripper_joint,
            gripper_closed=robot.gripper_closed,
            gripper_open=robot.gripper_open,
        )

    def with_base(self, base: np.ndarray) -> "KinematicChain":
        return KinematicChain(self.joints, self.ee_transform, self.gripper_joint,
                              self.gripper_closed, self.gripper_open, np.asarray(base) @ self.base)


@dataclass(frozen=True)
class ReferencePair:
    """One known dimension measured in the reconstruction frame and in meters."""

    rec_length: float
    metric_length: float

    def __post_init__(self):
        if not (self.rec_length > 0.0 and self.metric_length > 0.0):
            raise CalibrationError(
                f"reference lengths must be positive, got rec={self.rec_length} metric={self.metric_length}")


@dataclass(frozen=True)
class FingerGeometry:
    length: float
    max_opening: float

    @classmethod
    def from_config(cls, robot: RobotConfig) -> "FingerGeometry":
        return cls(robot.finger_length, robot.max_opening)


def fk(chain: KinematicChain, q: Sequence[float]) -> np.ndarray:
    """Flange pose of the chain in the base frame."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != chain.num_joints:
        raise ValidationError(f"expected {chain.num_joints} joint values, got {q.shape[0]}")
    T = chain.base.copy()
    for index, (joint, value) in enumerate(zip(chain.joints, q)):
        T = T @ joint.origin
        if index != chain.gripper_joint:
            T = T @ joint.motion(value)
    return T @ chain.ee_transform


def estimate_scale(pairs: Sequence[ReferencePair]) -> float:
    """Least-squares metric/reconstruction ratio over all reference pairs."""
    if not pairs:
        raise CalibrationError("scale estimation needs at least one reference pair")
    rec = np.array([p.rec_length for p in pairs])
    metric = np.array([p.metric_length for p in pairs])
    return float(np.dot(metric, rec) / np.dot(rec, rec))


def estimate_rigid(T_cam_in_rob: np.ndarray, T_cam_in_rec: np.ndarray, s: float) -> SimilarityTransform:
    """Robot-to-simulation similarity from one camera observed in both frames.

    The robot-frame translation is scaled by ``s`` first, so the result maps the robot
    pose of the camera onto its reconstruction pose.
    """
    for label, T in (("robot-frame camera pose", T_cam_in_rob), ("reconstruction camera pose", T_cam_in_rec)):
        problem = rigid_error(T, RIGID_TOL)
        if problem:
            raise CalibrationError(f"{label}: {problem}")
    if not s > 0.0:
        raise CalibrationError(f"scale must be positive, got {s}")
    scaled = np.array(T_cam_in_rob, dtype=np.float64)
    scaled[:3, 3] *= s
    T = np.asarray(T_cam_in_rec, dtype=np.float64) @ np.linalg.inv(scaled)
    R = T[:3, :3]
    # re-orthonormalize the numerical product
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return SimilarityTransform(float(s), R, T[:3, 3])


def map_pose(T_ee_rob: np.ndarray, X: SimilarityTransform) -> np.ndarray:
    """[sR t; 0 1] applied to a robot-frame pose."""
    problem = rigid_error(T_ee_rob, RIGID_TOL)
    if problem:
        raise ValidationError(f"end-effector pose: {problem}")
    return X.matrix() @ np.asarray(T_ee_rob, dtype=np.float64)


def plane_residual(plane: Plane, points: np.ndarray) -> float:
    """RMS point-to-plane distance."""
    d = np.asarray(points, dtype=np.float64) @ plane.normal + plane.offset
    return float(np.sqrt(np.mean(d ** 2)))


def fit_plane(points: np.ndarray) -> Plane:
    """Total-least-squares plane through a point cloud; the RMS residual rides along on the plane."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise CalibrationError(f"plane fit needs at least 3 points in R^3, got shape {pts.shape}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / pts.shape[0])
    if eigvals[1] <= 1e-12 * max(eigvals[2], 1e-300):
        raise CalibrationError("plane fit input is rank-deficient (collinear or coincident points)")
    normal = eigvecs[:, 0]
    # deterministic sign: dominant component positive
    if normal[np.argmax(np.abs(normal))] < 0.0:
        normal = -normal
    plane = Plane.from_normal(normal, -float(normal @ centroid))
    plane = Plane(plane.normal, plane.offset, plane_residual(plane, pts))
    logger.debug(f"Fitted plane n={plane.normal.round(6).tolist()} d={plane.offset:.6f} rms={plane.residual:.3e}")
    return plane


def gravity_dir(plane: Plane, v_c: Sequence[float]) -> np.ndarray:
    """Gravity direction: the plane normal, signed to point away from the viewing camera."""
    v = np.asarray(v_c, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-8:
        raise ValidationError(f"viewing direction must be unit length, got norm {np.linalg.norm(v)}")
    dot = float(plane.normal @ v)
    if abs(dot) < 1e-12:
        raise CalibrationError("viewing direction is parallel to the table; gravity sign is ambiguous")
    return -np.sign(dot) * plane.normal


def gripper_state(chain: KinematicChain, q: Sequence[float]) -> float:
    if chain.gripper_joint is None:
        raise ValidationError("chain has no gripper joint")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != chain.num_joints:
        raise ValidationError(f"expected {chain.num_joints} joint values, got {q.shape[0]}")
    span = chain.gripper_open - chain.gripper_closed
    if span == 0.0:
        raise ValidationError("gripper open and closed values coincide")
    c = (q[chain.gripper_joint] - chain.gripper_closed) / span
    return float(np.clip(c, 0.0, 1.0))


def finger_points_local(c: float, fingers: FingerGeometry) -> np.ndarray:
    """Control points in the end-effector frame: two finger segments along x, split along y."""
    u = np.linspace(-fingers.length / 2.0, fingers.length / 2.0, FINGER_POINTS)
    half_gap = c * fingers.max_opening / 2.0
    left = np.stack([u, np.full_like(u, -half_gap), np.zeros_like(u)], axis=1)
    right = np.stack([u, np.full_like(u, half_gap), np.zeros_like(u)], axis=1)
    return np.concatenate([left, right], axis=0)


def control_points(T_ee_sim: np.ndarray, c: float, fingers: FingerGeometry) -> np.ndarray:
    """Thirty control points in the simulation frame."""
    local = finger_points_local(c, fingers)
    T = np.asarray(T_ee_sim, dtype=np.float64)
    return local @ T[:3, :3].T + T[:3, 3]

#!/usr/bin/env python3
"""Domain types for SoftSplat Sim

Value objects shared by every module. Constructors validate the invariants
listed for each type and raise ``ValidationError`` on violation. Arrays held by
numpy-backed types are copied and frozen (read-only) at construction.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from config import NUM_CONTROL_POINTS
from core.errors import ValidationError
from utils.helpers import rigid_error, rotation_error

SYMMETRY_TOL = 1e-10
POSE_TOL = 1e-8


def _frozen(values: Any, dtype=np.float64, shape: Optional[tuple] = None, name: str = "array") -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


def _check_covariances(cov: np.ndarray, name: str) -> None:
    asym = np.abs(cov - np.swapaxes(cov, -1, -2)).max() if cov.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ValidationError(f"{name} not symmetric (deviation {asym:.3e})")
    if cov.size and np.linalg.eigvalsh(cov).min() <= 0.0:
        raise ValidationError(f"{name} must be positive definite")


@dataclass(frozen=True)
class GaussianSplat:
    """One Gaussian primitive: geometry, appearance, mass and material embedding."""

    position: np.ndarray
    covariance: np.ndarray
    mass: float
    attributes: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, shape=(3,), name="position"))
        object.__setattr__(self, "covariance", _frozen(self.covariance, shape=(3, 3), name="covariance"))
        object.__setattr__(self, "attributes", _frozen(self.attributes, name="attributes").reshape(-1))
        object.__setattr__(self, "color", _frozen(self.color, shape=(3,), name="color"))
        if not np.all(np.isfinite(self.position)):
            raise ValidationError("splat position must be finite")
        _check_covariances(self.covariance, "splat covariance")
        if not self.mass > 0.0:
            raise ValidationError(f"splat mass must be positive, got {self.mass}")
        if not 0.0 < self.opacity <= 1.0:
            raise ValidationError(f"splat opacity must lie in (0, 1], got {self.opacity}")
        if np.any(self.color < 0.0) or np.any(self.color > 1.0):
            raise ValidationError("splat color components must lie in [0, 1]")


@dataclass(frozen=True)
class SplatSetState:
    """Simulated state G_t as structure-of-arrays tensors.

    ``positions`` (N, 3), ``covariances`` (N, 3, 3), ``masses`` (N,),
    ``attributes`` (N, A), ``colors`` (N, 3), ``opacities`` (N,), ``velocities`` (N, 3).
    Construction checks shapes and finite velocities; ``validate_geometry`` runs the
    full per-splat checks for states entering the system from outside.
    """

    positions: torch.Tensor
    covariances: torch.Tensor
    masses: torch.Tensor
    attributes: torch.Tensor
    colors: torch.Tensor
    opacities: torch.Tensor
    velocities: torch.Tensor
    t: int = 0

    def __post_init__(self):
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "covariances": (n, 3, 3),
            "masses": (n,),
            "colors": (n, 3),
            "opacities": (n,),
            "velocities": (n, 3),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                raise ValidationError(f"state {name} must have shape {shape}, got {actual}")
        if self.attributes.dim() != 2 or self.attributes.shape[0] != n:
            raise ValidationError(f"state attributes must have shape ({n}, attr_dim)")
        if not bool(torch.isfinite(self.velocities.detach()).all()):
            raise ValidationError(f"state velocities at t={self.t} are not finite")

    @property
    def num_splats(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dtype(self) -> torch.dtype:
        return self.positions.dtype

    def validate_geometry(self) -> "SplatSetState":
        """Run the GaussianSplat invariants over every splat; returns self."""
        cov = self.covariances.detach().cpu().double().numpy()
        _check_covariances(cov, "state covariances")
        if not bool((self.masses > 0).all()):
            raise ValidationError("state masses must be positive")
        if not bool(((self.opacities > 0) & (self.opacities <= 1)).all()):
            raise ValidationError("state opacities must lie in (0, 1]")
        if not bool(((self.colors >= 0) & (self.colors <= 1)).all()):
            raise ValidationError("state colors must lie in [0, 1]")
        if not bool(torch.isfinite(self.positions.detach()).all()):
            raise ValidationError("state positions must be finite")
        return self

    @classmethod
    def from_splats(cls, splats: Sequence[GaussianSplat], velocities: Optional[np.ndarray] = None,
                    t: int = 0, dtype: torch.dtype = torch.float64) -> "SplatSetState":
        if not splats:
            raise ValidationError("a splat set needs at least one splat")
        dims = {s.attributes.shape[0] for s in splats}
        if len(dims) != 1:
            raise ValidationError(f"splats disagree on attribute width: {sorted(dims)}")
        n = len(splats)
        vel = np.zeros((n, 3)) if velocities is None else np.asarray(velocities, dtype=np.float64)

        def stack(values):
            return torch.as_tensor(np.stack(values), dtype=dtype)

        return cls(
            positions=stack([s.position for s in splats]),
            covariances=stack([s.covariance for s in splats]),
            masses=torch.tensor([s.mass for s in splats], dtype=dtype),
            attributes=stack([s.attributes for s in splats]),
            colors=stack([s.color for s in splats]),
            opacities=torch.tensor([s.opacity for s in splats], dtype=dtype),
            velocities=torch.as_tensor(vel, dtype=dtype),
            t=t,
        )

    def splat(self, i: int) -> GaussianSplat:
        """Materialize splat i as a validated GaussianSplat."""
        def arr(x):
            return x[i].detach().cpu().double().numpy()

        return GaussianSplat(
            position=arr(self.positions),
            covariance=arr(self.covariances),
            mass=float(self.masses[i]),
            attributes=arr(self.attributes),
            color=arr(self.colors),
            opacity=float(self.opacities[i]),
        )

    def advanced(self, positions: torch.Tensor, covariances: torch.Tensor,
                 velocities: torch.Tensor, t: int) -> "SplatSetState":
        """New state with updated kinematics and shared appearance/material data."""
        return SplatSetState(positions, covariances, self.masses, self.attributes,
                             self.colors, self.opacities, velocities, t)

    def translated(self, offset: Sequence[float]) -> "SplatSetState":
        u = torch.as_tensor(offset, dtype=self.dtype)
        return self.advanced(self.positions + u, self.covariances, self.velocities, self.t)

    def detached(self) -> "SplatSetState":
        return self.advanced(self.positions.detach(), self.covariances.detach(),
                             self.velocities.detach(), self.t)

    def to(self, dtype: torch.dtype) -> "SplatSetState":
        return SplatSetState(*(getattr(self, f).to(dtype) for f in (
            "positions", "covariances", "masses", "attributes", "colors", "opacities", "velocities")), t=self.t)


@dataclass(frozen=True)
class Hierarchy:
    """Frozen multi-level clustering of splats (level 0 = splats).

    ``parents[l]`` maps every level-l node to its level-(l+1) cluster. Rest positions,
    masses and attributes per level are mass-weighted aggregates of the level below.

    Masses are float64 sums of the level below, so every level's total is checked
    against the splat total to 1e-12 relative (summation order alone moves the last
    bits); rest centers of mass must agree across levels to 1e-10.
    """

    level_sizes: List[int]
    parents: List[np.ndarray]
    rest_positions: List[np.ndarray]
    masses: List[np.ndarray]
    attributes: List[np.ndarray]
    child_counts: List[np.ndarray]

    def __post_init__(self):
        sizes = [int(s) for s in self.level_sizes]
        object.__setattr__(self, "level_sizes", sizes)
        L = len(sizes)
        if L < 2:
            raise ValidationError("a hierarchy needs at least two levels")
        if any(b >= a for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 1:
            raise ValidationError(f"level sizes must be strictly decreasing and positive: {sizes}")
        if len(self.parents) != L - 1:
            raise ValidationError("need one parent map per non-top level")
        for name in ("rest_positions", "masses", "attributes"):
            if len(getattr(self, name)) != L:
                raise ValidationError(f"{name} must hold one array per level")

        parents = []
        for level, p in enumerate(self.parents):
            p = _frozen(p, dtype=np.int64, name=f"parents[{level}]")
            if p.shape != (sizes[level],):
                raise ValidationError(f"parents[{level}] must have {sizes[level]} entries")
            if p.min() < 0 or p.max() >= sizes[level + 1]:
                raise ValidationError(f"parents[{level}] indexes outside level {level + 1}")
            if np.unique(p).size != sizes[level + 1]:
                raise ValidationError(f"parents[{level}] is not surjective onto level {level + 1}")
            parents.append(p)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_positions", [
            _frozen(x, shape=(sizes[l], 3), name=f"rest_positions[{l}]") for l, x in enumerate(self.rest_positions)])
        object.__setattr__(self, "masses", [
            _frozen(m, shape=(sizes[l],), name=f"masses[{l}]") for l, m in enumerate(self.masses)])
        object.__setattr__(self, "attributes", [
            _frozen(a, name=f"attributes[{l}]") for l, a in enumerate(self.attributes)])
        object.__setattr__(self, "child_counts", [
            _frozen(c, dtype=np.int64, name=f"child_counts[{l}]") for l, c in enumerate(self.child_counts)])

        if np.any(self.masses[0] <= 0):
            raise ValidationError("level-0 masses must be positive")
        total = self.masses[0].sum()
        for level in range(1, L):
            level_total = self.masses[level].sum()
            if abs(level_total - total) > 1e-12 * abs(total):
                raise ValidationError(f"mass not conserved at level {level}: {level_total} vs {total}")
            com_fine = (self.masses[level - 1][:, None] * self.rest_positions[level - 1]).sum(0) / total
            com_coarse = (self.masses[level][:, None] * self.rest_positions[level]).sum(0) / total
            scale = max(1.0, np.abs(com_fine).max())
            if np.abs(com_fine - com_coarse).max() > 1e-10 * scale:
                raise ValidationError(f"rest center of mass drifts between levels {level - 1} and {level}")

    @property
    def num_levels(self) -> int:
        return len(self.level_sizes)

    def parent_tensor(self, level: int, device: Optional[torch.device] = None) -> torch.Tensor:
        return torch.as_tensor(self.parents[level], dtype=torch.long, device=device)


@dataclass(frozen=True)
class RobotAction:
    """Robot command at one frame, already mapped into the simulation frame."""

    q: np.ndarray
    ee_pose: np.ndarray
    gripper: float
    control_points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(self.q, name="q").reshape(-1))
        object.__setattr__(self, "ee_pose", _frozen(self.ee_pose, shape=(4, 4), name="ee_pose"))
        object.__setattr__(self, "control_points", _frozen(
            self.control_points, shape=(NUM_CONTROL_POINTS, 3), name="control_points"))
        # the similarity map scales the rotation block by s; check the normalized rotation
        block = self.ee_pose[:3, :3]
        scale = np.cbrt(np.linalg.det(block)) if np.linalg.det(block) > 0 else 0.0
        if scale <= 0.0:
            raise ValidationError("end-effector pose rotation must have positive determinant")
        problem = rotation_error(block / scale, POSE_TOL)
        if problem:
            raise ValidationError(f"end-effector pose: {problem}")
        if not 0.0 <= self.gripper <= 1.0:
            raise ValidationError(f"gripper state must lie in [0, 1], got {self.gripper}")
        if not np.all(np.isfinite(self.control_points)):
            raise ValidationError("control points must be finite")

    def to_record(self) -> Dict[str, Any]:
        return {
            "q": self.q.tolist(),
            "ee_pose": self.ee_pose.tolist(),
            "gripper": float(self.gripper),
            "control_points": self.control_points.tolist(),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "RobotAction":
        return cls(record["q"], record["ee_pose"], float(record["gripper"]), record["control_points"])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a world-from-camera pose (x right, y down, z forward)."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pose", _frozen(self.pose, shape=(4, 4), name=f"camera {self.name} pose"))
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"camera {self.name}: focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"camera {self.name}: image size must be positive")
        problem = rigid_error(self.pose, POSE_TOL)
        if problem:
            raise ValidationError(f"camera {self.name}: {problem}")

    @property
    def rotation(self) -> np.ndarray:
        """World-from-camera rotation."""
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.pose[:3, 2] / np.linalg.norm(self.pose[:3, 2])

    def moved(self, pose: np.ndarray) -> "CameraModel":
        return CameraModel(self.name, self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def scaled(self, factor: int) -> "CameraModel":
        """Same view at ``factor`` times the resolution; each pixel covers a factor x factor block."""
        if factor < 1:
            raise ValidationError(f"camera {self.name}: resolution factor must be >= 1, got {factor}")
        return CameraModel(self.name, self.fx * factor, self.fy * factor, (self.cx + 0.5) * factor - 0.5,
                           (self.cy + 0.5) * factor - 0.5, self.width * factor, self.height * factor, self.pose)

    def to_record(self) -> Dict[str, Any]:
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.tolist()}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "CameraModel":
        return cls(record["name"], float(record["fx"]), float(record["fy"]), float(record["cx"]),
                   float(record["cy"]), int(record["width"]), int(record["height"]), record["pose"])


@dataclass(frozen=True)
class SceneFrame:
    """All observations at one time step, keyed by camera name."""

    index: int
    rgb: Dict[str, np.ndarray]
    depth: Dict[str, np.ndarray]
    object_mask: Dict[str, np.ndarray]
    occluder_mask: Dict[str, np.ndarray]
    action: RobotAction
    camera_poses: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        names = set(self.rgb)
        for label in ("depth", "object_mask", "occluder_mask"):
            if set(getattr(self, label)) != names:
                raise ValidationError(f"frame {self.index}: {label} cameras do not match rgb cameras")
        rgb, depth, obj, occ = {}, {}, {}, {}
        for cam in sorted(names):
            image = _frozen(self.rgb[cam], dtype=np.float32, name=f"frame {self.index} {cam} rgb")
            if image.ndim != 3 or image.shape[2] != 3:
                raise ValidationError(f"frame {self.index} camera {cam}: rgb must be HxWx3, got {image.shape}")
            hw = image.shape[:2]
            if np.any(image < 0.0) or np.any(image > 1.0) or not np.all(np.isfinite(image)):
                raise ValidationError(f"frame {self.index} camera {cam}: rgb values must lie in [0, 1]")
            d = _frozen(self.depth[cam], dtype=np.float32, name=f"frame {self.index} {cam} depth")
            m = _frozen(self.object_mask[cam], dtype=np.uint8, name=f"frame {self.index} {cam} object mask")
            o = _frozen(self.occluder_mask[cam], dtype=np.uint8, name=f"frame {self.index} {cam} occluder mask")
            for label, arr in (("depth", d), ("object mask", m), ("occluder mask", o)):
                if arr.shape != hw:
                    raise ValidationError(
                        f"frame {self.index} camera {cam}: {label} shape {arr.shape} != image shape {hw}")
            if np.any(d < 0.0) or not np.all(np.isfinite(d)):
                raise ValidationError(f"frame {self.index} camera {cam}: depth must be finite and >= 0")
            for label, arr in (("object mask", m), ("occluder mask", o)):
                if np.any(arr > 1):
                    raise ValidationError(f"frame {self.index} camera {cam}: {label} must be binary")
            rgb[cam], depth[cam], obj[cam], occ[cam] = image, d, m, o
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "object_mask", obj)
        object.__setattr__(self, "occluder_mask", occ)
        object.__setattr__(self, "camera_poses", {
            k: _frozen(v, shape=(4, 4), name=f"{k} pose") for k, v in self.camera_poses.items()})

    @property
    def cameras(self) -> List[str]:
        return sorted(self.rgb)

    def supervision_mask(self, cam: str) -> np.ndarray:
        """Object AND NOT occluder; the occluder wins where both are set."""
        return (self.object_mask[cam].astype(bool) & ~self.occluder_mask[cam].astype(bool)).astype(np.uint8)


@dataclass(frozen=True)
class SimilarityTransform:
    """x_sim = s * R @ x + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, shape=(3, 3), name="rotation"))
        object.__setattr__(self, "translation", _frozen(self.translation, shape=(3,), name="translation"))
        if not self.scale > 0.0:
            raise ValidationError(f"similarity scale must be positive, got {self.scale}")
        problem = rotation_error(self.rotation, 1e-10)
        if problem:
            raise ValidationError(f"similarity {problem}")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_covariances(self, cov: np.ndarray) -> np.ndarray:
        out = self.scale ** 2 * np.einsum("ij,njk,lk->nil", self.rotation, np.asarray(cov), self.rotation)
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def apply_rigid(self, T: np.ndarray) -> np.ndarray:
        """Map a rigid pose so its rotation stays orthonormal (position scaled, frame rotated)."""
        out = np.eye(4)
        out[:3, :3] = self.rotation @ T[:3, :3]
        out[:3, 3] = self.scale * self.rotation @ T[:3, 3] + self.translation
        return out

    def to_record(self) -> Dict[str, Any]:
        return {"scale": self.scale, "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "SimilarityTransform":
        return cls(float(record["scale"]), record["rotation"], record["translation"])


@dataclass(frozen=True)
class Plane:
    """{p : n . p + d = 0} with a unit normal.

    ``residual`` is the RMS point-to-plane distance of the points a fitted plane came
    from; it stays 0 for planes given directly.
    """

    normal: np.ndarray
    offset: float
    residual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(self.normal, shape=(3,), name="plane normal"))
        norm = np.linalg.norm(self.normal)
        if abs(norm - 1.0) > 1e-12:
            raise ValidationError(f"plane normal must be unit length, got norm {norm:.15f}")
        if not np.isfinite(self.offset):
            raise ValidationError("plane offset must be finite")
        if not (np.isfinite(self.residual) and self.residual >= 0.0):
            raise ValidationError(f"plane fit residual must be finite and non-negative, got {self.residual}")

    @classmethod
    def from_normal(cls, normal: Sequence[float], offset: float, residual: float = 0.0) -> "Plane":
        """Normalize (n, d) jointly so the represented plane is unchanged."""
        n = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise ValidationError("plane normal must be non-zero")
        return cls(n / norm, float(offset) / norm, float(residual))

    def flipped(self) -> "Plane":
        """Same plane with the normal reversed."""
        return Plane(-self.normal, -self.offset, self.residual)

    def to_record(self) -> Dict[str, Any]:
        return {"normal": self.normal.tolist(), "offset": self.offset, "residual": self.residual}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Plane":
        return cls.from_normal(record["normal"], record["offset"], record.get("residual", 0.0))


@dataclass(frozen=True)
class SceneSequence:
    """One manipulation episode: cameras, initial splats G_0 and per-frame observations.

    ``metadata`` carries JSON-serializable provenance (task, object kind, split, ground-truth
    calibration, reference dimensions, wrist-camera pose pairs). ``table_points`` is a
    sampled point cloud of the supporting surface in the simulation frame.
    """

    name: str
    cameras: List[CameraModel]
    frames: List[SceneFrame]
    dt: float
    initial_state: SplatSetState
    table_points: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "table_points", _frozen(self.table_points, name="table points"))
        if self.table_points.ndim != 2 or self.table_points.shape[1] != 3:
            raise ValidationError("table points must be an Nx3 array")
        if not self.dt > 0:
            raise ValidationError("sequence dt must be positive")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate camera names: {names}")
        for frame in self.frames:
            if sorted(frame.cameras) != sorted(names):
                raise ValidationError(f"frame {frame.index}: cameras {frame.cameras} do not match {names}")
            for cam in self.cameras:
                if frame.rgb[cam.name].shape[:2] != (cam.height, cam.width):
                    raise ValidationError(f"frame {frame.index} camera {cam.name}: image size mismatch")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def actions(self) -> List[RobotAction]:
        return [f.action for f in self.frames]

    def camera(self, name: str) -> CameraModel:
        for cam in self.cameras:
            if cam.name == name:
                return cam
        raise ValidationError(f"sequence {self.name} has no camera '{name}'")

    def cameras_at(self, frame: int) -> List[CameraModel]:
        """Cameras with per-frame poses applied (moving wrist camera)."""
        poses = self.frames[frame].camera_poses
        return [cam.moved(poses[cam.name]) if cam.name in poses else cam for cam in self.cameras]

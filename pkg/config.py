#!/usr/bin/env python3
"""Configuration for SoftSplat Sim

One JSON file with a section per module. Every section is a pydantic model whose
defaults form the desk preset; command-line ``--set section.key=value`` pairs and
the SOMA_SEED environment variable are layered on top by ``load_config``.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from core.errors import ConfigError

try:
    from dotenv import load_dotenv
except ImportError:
    load_dotenv = None

PROJECT_DIR = Path.cwd()

SEED_ENV_VAR = "SOMA_SEED"

FRAME_DT = 1.0 / 30.0  # 30 FPS capture

NUM_CONTROL_POINTS = 30

# Architecture presets for the learned simulator
ARCH_PRESETS: Dict[str, Dict[str, int]] = {
    "desk": {"embed_dim": 32, "num_layers": 4, "knn": 8},
    "paper": {"embed_dim": 128, "num_layers": 16, "knn": 8},
}

# Per-dataset cluster counts (splats, then clusters from coarse to fine) recorded
# from the large-scale setup; the default recipe is [n, n/2, 2].
HIERARCHY_PRESETS: Dict[str, List[int]] = {
    "rope": [13000, 800, 8],
    "cloth": [13000, 2400, 30],
    "doll": [13000, 2200, 22],
    "tshirt": [13000, 3000, 60],
}

# Stage-1 temporal stride per task family
STRIDE_PRESETS: Dict[str, int] = {
    "default": 10,
    "tshirt": 5,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MaterialConfig(_Section):
    stiffness: float = Field(300.0, gt=0.0)
    damping: float = Field(0.02, gt=0.0)
    total_mass: float = Field(0.1, gt=0.0)
    drag: float = Field(0.5, ge=0.0)
    friction: float = Field(0.5, ge=0.0)


class WorldConfig(_Section):
    object_kind: Literal["cloth", "rope"] = "cloth"
    task: Literal["lift", "drag", "fold"] = "drag"
    cloth_grid: Tuple[int, int] = (20, 15)
    cloth_extent: Tuple[float, float] = (0.24, 0.18)
    rope_particles: int = Field(40, ge=2)
    rope_length: float = Field(0.3, gt=0.0)
    material: MaterialConfig = Field(default_factory=MaterialConfig)
    object_center: Tuple[float, float] = (0.38, 0.0)
    center_jitter: float = Field(0.02, ge=0.0)
    yaw_jitter: float = Field(0.3, ge=0.0)
    gravity: float = Field(9.81, ge=0.0)
    frames: int = Field(60, ge=10)
    dt: float = Field(FRAME_DT, gt=0.0)
    substep_safety: float = Field(0.2, gt=0.0, le=1.0)
    grasp_radius_factor: float = Field(1.5, gt=0.0)
    approach_height: float = Field(0.04, ge=0.0)
    lift_height: float = Field(0.12, gt=0.0)
    drag_distance: Tuple[float, float] = (0.06, 0.1)
    fold_clearance: float = Field(0.02, ge=0.0)
    release: bool = False
    sequences: int = Field(10, ge=1)
    train_fraction: float = Field(0.7, gt=0.0, le=1.0)
    # ground-truth robot->simulation similarity (scale, yaw in radians, translation)
    rec_scale: float = Field(1.0, gt=0.0)
    rec_yaw: float = 0.3
    rec_translation: Tuple[float, float, float] = (0.1, -0.05, 0.0)
    table_points: int = Field(200, ge=3)
    table_noise: float = Field(0.0, ge=0.0)


class JointRecord(_Section):
    type: Literal["revolute", "prismatic"]
    axis: Tuple[float, float, float]
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    quaternion: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)


def _default_joints() -> List[JointRecord]:
    return [
        JointRecord(type="revolute", axis=(0.0, 0.0, 1.0)),
        JointRecord(type="revolute", axis=(0.0, 1.0, 0.0), translation=(0.0, 0.0, 0.25)),
        JointRecord(type="revolute", axis=(0.0, 1.0, 0.0), translation=(0.3, 0.0, 0.0)),
        JointRecord(type="prismatic", axis=(0.0, 1.0, 0.0), translation=(0.3, 0.0, 0.0)),
    ]


class RobotConfig(_Section):
    joints: List[JointRecord] = Field(default_factory=_default_joints)
    ee_translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ee_quaternion: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)
    gripper_joint: int = 3
    gripper_closed: float = 0.0
    gripper_open: float = 0.04
    finger_length: float = Field(0.03, gt=0.0)
    finger_width: float = Field(0.008, gt=0.0)
    max_opening: float = Field(0.04, gt=0.0)

    @model_validator(mode="after")
    def _check_gripper(self) -> "RobotConfig":
        if not 0 <= self.gripper_joint < len(self.joints):
            raise ValueError("gripper_joint must index one of the joints")
        return self


class CameraRigConfig(_Section):
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    fov_deg: float = Field(60.0, gt=1.0, lt=179.0)
    static_eyes: List[Tuple[float, float, float]] = Field(
        default_factory=lambda: [(0.72, -0.32, 0.42), (0.18, 0.38, 0.46)])
    target: Tuple[float, float, float] = (0.38, 0.0, 0.03)
    wrist_offset: Tuple[float, float, float] = (-0.22, 0.0, 0.0)
    wrist_name: str = "wrist"
    # opt-in: render datasets at this multiple of the image size, then box-filter down
    supersample: int = Field(1, ge=1)


class HierarchyConfig(_Section):
    fine_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    top_nodes: int = Field(2, ge=1)
    level_sizes: Optional[List[int]] = None
    kmeans_iters: int = Field(50, ge=1)
    kmeans_inits: int = Field(10, ge=1)
    max_retries: int = Field(5, ge=0)

    def sizes_for(self, num_splats: int, num_levels: int = 3) -> List[int]:
        """Level sizes for a splat count: explicit list, else the [n, n/2, 2] recipe."""
        if self.level_sizes is not None:
            return [num_splats] + list(self.level_sizes[1:])
        if num_splats < num_levels:
            raise ConfigError(f"{num_splats} splats cannot fill {num_levels} hierarchy levels")
        sizes = [num_splats]
        for level in range(1, num_levels - 1):
            remaining = num_levels - 1 - level
            size = int(round(sizes[-1] * self.fine_fraction))
            size = max(size, self.top_nodes + remaining)
            sizes.append(min(size, sizes[-1] - 1))
        sizes.append(max(1, min(self.top_nodes, sizes[-1] - 1)))
        return sizes


class ForceConfig(_Section):
    tau_factor: float = Field(2.0, gt=0.0)
    kappa: float = Field(1.0, ge=0.0)
    g_mag: float = Field(1.0, ge=0.0)
    rho_factor: float = Field(3.0, gt=0.0)
    finger_contact_pad: float = Field(0.0, ge=0.0)


class DynamicsConfig(_Section):
    preset: Literal["desk", "paper"] = "desk"
    embed_dim: Optional[int] = None
    num_layers: Optional[int] = None
    knn: Optional[int] = None
    attr_dim: int = Field(8, ge=1)
    num_levels: int = Field(3, ge=2)
    offset_reference: Literal["rest", "previous"] = "rest"
    momentum_normalized: bool = False
    dtype: Literal["float32", "float64"] = "float32"

    def arch(self) -> Dict[str, int]:
        """Preset architecture with explicit overrides applied."""
        arch = dict(ARCH_PRESETS[self.preset])
        for key in ("embed_dim", "num_layers", "knn"):
            value = getattr(self, key)
            if value is not None:
                arch[key] = value
        return arch


class RenderConfig(_Section):
    near: float = Field(1e-3, gt=0.0)
    dilation: float = Field(0.3, ge=0.0)
    alpha_max: float = Field(0.999, gt=0.0, lt=1.0)
    sigma_extent: float = Field(3.0, gt=0.0)
    lam: float = Field(0.8, ge=0.0, le=1.0)
    debug_dump: bool = False


class TrainConfig(_Section):
    stride: int = Field(10, ge=1)
    window_multiplier: int = Field(3, ge=1)
    stage1_epochs: int = Field(30, ge=0)
    stage2_epochs: int = Field(10, ge=0)
    lr: float = Field(1e-3, ge=0.0)
    lr_decay: float = Field(0.98, gt=0.0, le=1.0)
    stage2_lr_scale: float = Field(0.1, ge=0.0)
    beta: float = Field(0.01, ge=0.0)
    batch: int = Field(1, ge=1)
    windows_per_sequence: int = Field(1, ge=1)
    supervision: Literal["blended", "image_only"] = "blended"
    grad_clip: float = Field(1.0, ge=0.0)


class EvalConfig(_Section):
    psnr_cap: float = Field(100.0, gt=0.0)
    grid_camera: int = Field(0, ge=0)
    grid_frames: int = Field(6, ge=1)


class SimConfig(_Section):
    seed: int = 0
    world: WorldConfig = Field(default_factory=WorldConfig)
    robot: RobotConfig = Field(default_factory=RobotConfig)
    cameras: CameraRigConfig = Field(default_factory=CameraRigConfig)
    hierarchy: HierarchyConfig = Field(default_factory=HierarchyConfig)
    forces: ForceConfig = Field(default_factory=ForceConfig)
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


def _parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override '{item}' must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def _apply_override(data: Dict[str, Any], path: List[str], value: Any) -> None:
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override below non-section key '{part}'")
    node[path[-1]] = value


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> SimConfig:
    """Load the JSON config, apply dotted overrides and the seed environment variable."""
    if load_dotenv is not None:
        load_dotenv(dotenv_path=PROJECT_DIR / ".env")

    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")

    for item in overrides:
        key_path, value = _parse_override(item)
        _apply_override(data, key_path, value)

    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_seed}'")

    try:
        return SimConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ConfigError(str(e))


def dump_config(cfg: SimConfig, path: Path) -> None:
    """Write the effective merged config for provenance."""
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")


def model_arch(cfg: DynamicsConfig) -> Dict[str, int]:
    """Every dimension that fixes the weight shapes."""
    arch = dict(cfg.arch())
    arch.update(attr_dim=cfg.attr_dim, num_levels=cfg.num_levels)
    return arch


def arch_hash(arch: Dict[str, int]) -> str:
    canonical = json.dumps({k: int(v) for k, v in arch.items()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(cfg: SimConfig) -> str:
    """Hash of the architecture-defining settings, stored in checkpoint headers."""
    return arch_hash(model_arch(cfg.dynamics))

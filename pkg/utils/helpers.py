#!/usr/bin/env python3
"""Utility functions for SoftSplat Sim"""

import logging
import os
import random
import sys
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Configure root logging once; status lines go to stderr."""
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%H:%M:%S"))
        root.addHandler(handler)
    root.setLevel(level)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; return a numpy generator for explicit draws."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def sanitize_run_name(name: str) -> str:
    """Sanitize a run or method name for use in file names and CSV rows."""
    return name.strip().lower().replace(" ", "-").replace("_", "-").replace(os.sep, "-")


def make_transform(rotation: np.ndarray, translation: Sequence[float]) -> np.ndarray:
    """Assemble a 4x4 homogeneous transform from a 3x3 block and a translation."""
    T = np.eye(4)
    T[:3, :3] = np.asarray(rotation, dtype=np.float64)
    T[:3, 3] = np.asarray(translation, dtype=np.float64)
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a rigid transform."""
    R = T[:3, :3]
    t = T[:3, 3]
    return make_transform(R.T, -R.T @ t)


def rotation_error(R: np.ndarray, tol: float) -> Optional[str]:
    """Describe why R is not a proper rotation, or None when it is one."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return "rotation block must be a finite 3x3 matrix"
    ortho = np.abs(R.T @ R - np.eye(3)).max()
    if ortho > tol:
        return f"rotation block not orthonormal (deviation {ortho:.3e})"
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        return f"rotation determinant {det:.12f} != +1"
    return None


def rigid_error(T: np.ndarray, tol: float) -> Optional[str]:
    """Describe why T is not a rigid 4x4 transform, or None when it is one."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        return f"expected a 4x4 transform, got shape {T.shape}"
    if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=tol, rtol=0.0):
        return "bottom row must be (0, 0, 0, 1)"
    if not np.all(np.isfinite(T[:3, 3])):
        return "translation must be finite"
    return rotation_error(T[:3, :3], tol)


def transform_from_record(translation: Sequence[float], quaternion_xyzw: Sequence[float]) -> np.ndarray:
    """Build a rigid transform from 3 translation and 4 quaternion (x, y, z, w) values."""
    quat = np.asarray(quaternion_xyzw, dtype=np.float64)
    norm = np.linalg.norm(quat)
    if norm == 0.0:
        raise ValueError("quaternion must be non-zero")
    return make_transform(Rotation.from_quat(quat / norm).as_matrix(), translation)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose for a pinhole camera (x right, y down, z forward) looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return make_transform(np.stack([right, down, forward], axis=1), eye)


def quantize_unit(values: np.ndarray, levels: int = 65535) -> np.ndarray:
    """Snap [0, 1] values to the grid a 16-bit PNG stores, as float32."""
    codes = np.round(np.clip(values, 0.0, 1.0) * levels).astype(np.uint16)
    return (codes.astype(np.float32) / np.float32(levels)).astype(np.float32)

#!/usr/bin/env python3
"""Force module for SoftSplat Sim

Environment forces (gravity plus an analytic table-support ramp), robot forces from
the control-point interaction graph, and bottom-up force aggregation. Forces are
conditioning features for the learned simulator, not Newtonian forces.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from torch import nn

from config import ForceConfig
from core.errors import ValidationError
from core.hier import scatter_sum
from core.types import Hierarchy, Plane


@dataclass(frozen=True)
class ForceSettings:
    tau: float
    kappa: float
    g_mag: float
    rho: float

    @classmethod
    def from_config(cls, cfg: ForceConfig, covariances: torch.Tensor) -> "ForceSettings":
        """Resolve thresholds relative to the mean splat radius of the initial state."""
        radius = mean_splat_radius(covariances)
        return cls(tau=cfg.tau_factor * radius, kappa=cfg.kappa, g_mag=cfg.g_mag, rho=cfg.rho_factor * radius)


@dataclass
class InteractionGraph:
    """Edges between splats and control points within the interaction radius.

    ``displacement`` is splat position minus control point position.
    """

    splat_index: torch.Tensor
    control_index: torch.Tensor
    displacement: torch.Tensor
    control_velocity: torch.Tensor
    distance: torch.Tensor
    radius: float

    def __post_init__(self):
        e = self.splat_index.shape[0]
        if self.control_index.shape[0] != e or self.distance.shape[0] != e:
            raise ValidationError("interaction graph arrays disagree on edge count")
        if e and bool((self.distance.detach() > self.radius).any()):
            raise ValidationError("interaction edge longer than the interaction radius")

    @property
    def num_edges(self) -> int:
        return int(self.splat_index.shape[0])

    def duplicated(self) -> "InteractionGraph":
        def twice(x):
            return torch.cat([x, x], dim=0)

        return InteractionGraph(twice(self.splat_index), twice(self.control_index), twice(self.displacement),
                                twice(self.control_velocity), twice(self.distance), self.radius)


def mean_splat_radius(covariances: torch.Tensor) -> float:
    """Mean of sqrt(trace(Sigma) / 3) over splats."""
    trace = torch.diagonal(covariances.detach(), dim1=-2, dim2=-1).sum(-1)
    return float(torch.sqrt(trace / 3.0).mean())


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(dim=-1)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def signed_distance(positions: torch.Tensor, plane: Plane) -> torch.Tensor:
    n = torch.as_tensor(plane.normal, dtype=positions.dtype)
    return positions @ n + plane.offset


def env_force(positions: torch.Tensor, plane: Plane, g: np.ndarray, tau: float,
              kappa: float = 1.0, g_mag: float = 1.0) -> torch.Tensor:
    """g_mag * g plus a support push kappa * (tau - d) / tau along the normal below tau."""
    if not tau > 0.0:
        raise ValidationError(f"support threshold must be positive, got {tau}")
    dtype = positions.dtype
    d = signed_distance(positions, plane)
    ramp = kappa * torch.clamp((tau - d) / tau, min=0.0)
    gravity = g_mag * torch.as_tensor(np.asarray(g, dtype=np.float64), dtype=dtype)
    n = torch.as_tensor(plane.normal, dtype=dtype)
    return gravity.expand_as(positions) + ramp[:, None] * n


def build_interaction_graph(positions: torch.Tensor, control_points: torch.Tensor,
                            control_velocities: torch.Tensor, rho: float) -> InteractionGraph:
    """All (splat, control point) pairs within rho, ordered splat-major."""
    if not rho > 0.0:
        raise ValidationError(f"interaction radius must be positive, got {rho}")
    dtype = positions.dtype
    control_points = control_points.to(dtype)
    control_velocities = control_velocities.to(dtype)
    dist = torch.cdist(positions.detach(), control_points.detach())
    pairs = torch.nonzero(dist <= rho)
    splat_index, control_index = pairs[:, 0], pairs[:, 1]
    displacement = positions[splat_index] - control_points[control_index]
    distance = safe_norm(displacement)
    # cdist and the explicit norm can disagree in the last ulp
    distance = torch.minimum(distance, torch.full_like(distance, rho))
    return InteractionGraph(splat_index, control_index, displacement, control_velocities[control_index],
                            distance, rho)


def edge_features(graph: InteractionGraph, splat_velocities: torch.Tensor, c: float) -> torch.Tensor:
    """[displacement, distance, control velocity, gripper state, splat velocity] per edge."""
    e = graph.num_edges
    dtype = graph.displacement.dtype
    return torch.cat([
        graph.displacement,
        graph.distance[:, None],
        graph.control_velocity,
        torch.full((e, 1), float(c), dtype=dtype),
        splat_velocities[graph.splat_index],
    ], dim=1)


EDGE_FEATURE_DIM = 11


def robot_force(phi: nn.Module, splat_velocities: torch.Tensor, graph: InteractionGraph, c: float) -> torch.Tensor:
    """Summed per-edge messages of the interaction network; splats without edges get zero."""
    n = splat_velocities.shape[0]
    out = torch.zeros(n, 3, dtype=splat_velocities.dtype)
    if graph.num_edges == 0:
        return out
    messages = phi(edge_features(graph, splat_velocities, c))
    if messages.shape != (graph.num_edges, 3):
        raise ValidationError(f"robot force network must emit (E, 3) messages, got {tuple(messages.shape)}")
    return out.index_add(0, graph.splat_index, messages)


def total_force(env: torch.Tensor, robot: torch.Tensor) -> torch.Tensor:
    if env.shape != robot.shape:
        raise ValidationError(f"force shapes differ: {tuple(env.shape)} vs {tuple(robot.shape)}")
    return env + robot


def aggregate_up(h: Hierarchy, forces: torch.Tensor) -> List[torch.Tensor]:
    """Per-level forces; a cluster's force is the plain sum of its children's."""
    levels = [forces]
    for level in range(h.num_levels - 1):
        levels.append(scatter_sum(levels[-1], h.parent_tensor(level), h.level_sizes[level + 1]))
    return levels

#!/usr/bin/env python3
"""Hierarchy module for SoftSplat Sim

Builds the frozen multi-level clustering of splats and moves state through it:
bottom-up mass-weighted aggregation, top-down deformation propagation and the
momentum-consistency residual between adjacent levels.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.cluster import KMeans

from core.errors import ClusteringError, ValidationError
from core.types import Hierarchy, SplatSetState

logger = logging.getLogger(__name__)


@dataclass
class LevelState:
    """Per-node state at one hierarchy level.

    ``positions``/``velocities``/``forces`` are (n, 3); ``deformation`` (n, 3, 3) holds the
    running product of deformation gradients from the top level down to this one.
    """

    positions: torch.Tensor
    velocities: torch.Tensor
    deformation: torch.Tensor
    forces: torch.Tensor
    masses: torch.Tensor
    attributes: torch.Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in ("velocities", "forces"):
            if tuple(getattr(self, name).shape) != (n, 3):
                raise ValidationError(f"level {name} must have shape ({n}, 3)")
        if tuple(self.deformation.shape) != (n, 3, 3):
            raise ValidationError(f"level deformation must have shape ({n}, 3, 3)")
        if self.masses.shape[0] != n or self.attributes.shape[0] != n:
            raise ValidationError("level masses/attributes length mismatch")
        if not bool(torch.isfinite(self.deformation.detach()).all()):
            raise ValidationError("level deformation products must be finite")

    @property
    def num_nodes(self) -> int:
        return int(self.positions.shape[0])


def _cluster_sums(values: np.ndarray, parents: np.ndarray, k: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(parents, weights=values, minlength=k)
    return np.stack([np.bincount(parents, weights=values[:, j], minlength=k) for j in range(values.shape[1])], axis=1)


def _rest_data(positions: np.ndarray, masses: np.ndarray, attributes: np.ndarray,
               parents: Sequence[np.ndarray], level_sizes: Sequence[int]) -> Tuple[list, list, list, list]:
    rest, mass, attrs, counts = [positions], [masses], [attributes], [np.ones(len(masses), dtype=np.int64)]
    for level, p in enumerate(parents):
        k = level_sizes[level + 1]
        m = _cluster_sums(mass[-1], p, k)
        x = _cluster_sums(mass[-1][:, None] * rest[-1], p, k) / m[:, None]
        n_children = np.bincount(p, minlength=k)
        a = _cluster_sums(attrs[-1], p, k) / n_children[:, None]
        rest.append(x)
        mass.append(m)
        attrs.append(a)
        counts.append(n_children)
    return rest, mass, attrs, counts


def hierarchy_from_parents(positions: np.ndarray, masses: np.ndarray, attributes: np.ndarray,
                           parents: Sequence[np.ndarray]) -> Hierarchy:
    """Rebuild a hierarchy (rest data included) from stored parent maps."""
    parents = [np.asarray(p, dtype=np.int64) for p in parents]
    sizes = [len(masses)] + [int(p.max()) + 1 for p in parents]
    rest, mass, attrs, counts = _rest_data(np.asarray(positions, dtype=np.float64),
                                           np.asarray(masses, dtype=np.float64),
                                           np.asarray(attributes, dtype=np.float64), parents, sizes)
    return Hierarchy(sizes, parents, rest, mass, attrs, counts)


def build_hierarchy(splats: SplatSetState, level_sizes: Sequence[int], seed: int,
                    iters: int = 50, inits: int = 10, max_retries: int = 5) -> Hierarchy:
    """Cluster rest positions level by level with seeded k-means++ (mass-weighted)."""
    sizes = [int(s) for s in level_sizes]
    if sizes[0] != splats.num_splats:
        raise ValidationError(f"first level size {sizes[0]} != splat count {splats.num_splats}")
    if any(b >= a for a, b in zip(sizes, sizes[1:])) or sizes[-1] < 1:
        raise ValidationError(f"level sizes must be strictly decreasing and positive: {sizes}")

    positions = splats.positions.detach().cpu().double().numpy()
    masses = splats.masses.detach().cpu().double().numpy()
    attributes = splats.attributes.detach().cpu().double().numpy()

    parents: List[np.ndarray] = []
    points, weights = positions, masses
    for level, k in enumerate(sizes[1:]):
        labels = None
        for attempt in range(max_retries + 1):
            km = KMeans(n_clusters=k, init="k-means++", n_init=inits, max_iter=iters,
                        random_state=seed + 1000 * level + attempt)
            candidate = km.fit_predict(points, sample_weight=weights)
            if np.unique(candidate).size == k:
                labels = candidate
                break
            logger.debug(f"level {level + 1}: empty clusters on attempt {attempt + 1}, re-seeding")
        if labels is None:
            raise ClusteringError(f"level {level + 1}: empty clusters after {max_retries + 1} attempts (k={k})")
        labels = labels.astype(np.int64)
        parents.append(labels)
        m = _cluster_sums(weights, labels, k)
        points = _cluster_sums(weights[:, None] * points, labels, k) / m[:, None]
        weights = m

    rest, mass, attrs, counts = _rest_data(positions, masses, attributes, parents, sizes)
    hierarchy = Hierarchy(sizes, parents, rest, mass, attrs, counts)
    logger.debug(f"Built hierarchy with level sizes {sizes}")
    return hierarchy


def scatter_sum(values: torch.Tensor, parents: torch.Tensor, size: int) -> torch.Tensor:
    """Sum child rows into their parent rows."""
    out = torch.zeros((size,) + tuple(values.shape[1:]), dtype=values.dtype, device=values.device)
    return out.index_add(0, parents, values)


def level_masses(h: Hierarchy, level: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return torch.as_tensor(h.masses[level], dtype=dtype)


def aggregate(h: Hierarchy, positions: torch.Tensor, velocities: torch.Tensor,
              attributes: torch.Tensor, masses: torch.Tensor,
              forces: Optional[torch.Tensor] = None) -> List[LevelState]:
    """Mass-weighted positions/velocities, mean attributes and summed forces per level."""
    if positions.shape[0] != h.level_sizes[0]:
        raise ValidationError(f"state has {positions.shape[0]} splats, hierarchy expects {h.level_sizes[0]}")
    dtype = positions.dtype
    eye = torch.eye(3, dtype=dtype)
    f = forces if forces is not None else torch.zeros_like(positions)
    levels = [LevelState(positions, velocities, eye.expand(positions.shape[0], 3, 3), f, masses, attributes)]
    for level in range(h.num_levels - 1):
        below = levels[-1]
        k = h.level_sizes[level + 1]
        p = h.parent_tensor(level)
        m = scatter_sum(below.masses, p, k)
        x = scatter_sum(below.masses[:, None] * below.positions, p, k) / m[:, None]
        v = scatter_sum(below.masses[:, None] * below.velocities, p, k) / m[:, None]
        counts = torch.as_tensor(h.child_counts[level + 1], dtype=dtype)
        a = scatter_sum(below.attributes, p, k) / counts[:, None]
        levels.append(LevelState(x, v, eye.expand(k, 3, 3), scatter_sum(below.forces, p, k), m, a))
    return levels


def propagate(h: Hierarchy, level: int, parent_positions: torch.Tensor, F: torch.Tensor,
              upstream: torch.Tensor, child_reference: Optional[torch.Tensor] = None,
              parent_reference: Optional[torch.Tensor] = None,
              child_covariances: Optional[torch.Tensor] = None
              ) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """Carry a level's motion down to its children.

    ``x_k = x_c + P_c (X_k - X_c)`` with ``P_c = upstream_c @ F_c``. The reference
    configuration X defaults to the stored rest positions. When ``child_covariances``
    is given (level 1 -> 0) they are transformed as ``P Sigma P^T``.
    Returns ``(child positions, child running products, child covariances or None)``.
    """
    if not 1 <= level < h.num_levels:
        raise ValidationError(f"cannot propagate from level {level}")
    if not bool(torch.isfinite(F.detach()).all()):
        raise ValidationError(f"non-finite deformation gradient at level {level}")
    dtype = parent_positions.dtype
    if child_reference is None:
        child_reference = torch.as_tensor(h.rest_positions[level - 1], dtype=dtype)
    if parent_reference is None:
        parent_reference = torch.as_tensor(h.rest_positions[level], dtype=dtype)
    p = h.parent_tensor(level - 1)
    P = upstream @ F
    P_child = P[p]
    offsets = child_reference - parent_reference[p]
    child_positions = parent_positions[p] + (P_child @ offsets.unsqueeze(-1)).squeeze(-1)
    cov = None
    if child_covariances is not None:
        cov = P_child @ child_covariances @ P_child.transpose(1, 2)
        cov = 0.5 * (cov + cov.transpose(1, 2))
    return child_positions, P_child, cov


def momentum_residual(h: Hierarchy, level_positions: Sequence[torch.Tensor], normalized: bool = False) -> torch.Tensor:
    """Sum over levels and clusters of ||m_c x_c - sum_i m_i x_i||^2 (optionally divided by m_c^2)."""
    if len(level_positions) != h.num_levels:
        raise ValidationError(f"need positions for {h.num_levels} levels, got {len(level_positions)}")
    dtype = level_positions[0].dtype
    total = torch.zeros((), dtype=dtype)
    for level in range(1, h.num_levels):
        m_child = level_masses(h, level - 1, dtype)
        m_cluster = level_masses(h, level, dtype)
        children = scatter_sum(m_child[:, None] * level_positions[level - 1], h.parent_tensor(level - 1),
                               h.level_sizes[level])
        diff = m_cluster[:, None] * level_positions[level] - children
        terms = (diff ** 2).sum(dim=1)
        if normalized:
            terms = terms / m_cluster ** 2
        total = total + terms.sum()
    return total

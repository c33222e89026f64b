#!/usr/bin/env python3
"""Learned hierarchical dynamics for SoftSplat Sim

One encode-process-decode graph network is shared by every hierarchy level and told
which level it runs on through a one-hot feature; each level owns its decoder heads
for velocity, angular velocity and the deformation-gradient increment. A step runs
coarse to fine: clusters move, their motion and deformation are propagated to their
children, and every finer level adds its own residual velocity.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from config import DynamicsConfig, SimConfig
from core.errors import CalibrationError, SimulationDivergedError, ValidationError
from core.forces import (EDGE_FEATURE_DIM, ForceSettings, aggregate_up, build_interaction_graph, env_force,
                         robot_force, safe_norm, signed_distance, total_force)
from core.hier import aggregate, build_hierarchy, hierarchy_from_parents, propagate
from core.r2s import fit_plane, gravity_dir
from core.types import Hierarchy, Plane, RobotAction, SceneSequence, SplatSetState

logger = logging.getLogger(__name__)

LEVEL_EDGE_DIM = 7
TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.LayerNorm(hidden),
        nn.SiLU(),
        nn.Linear(hidden, out_dim),
    )


class InteractionLayer(nn.Module):
    """One message-passing round with residual edge and node updates and mean aggregation."""

    def __init__(self, dim: int):
        super().__init__()
        self.edge_mlp = mlp(3 * dim, dim, dim)
        self.node_mlp = mlp(2 * dim, dim, dim)

    def forward(self, h: torch.Tensor, e: torch.Tensor, senders: torch.Tensor,
                receivers: torch.Tensor, degree: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        e = e + self.edge_mlp(torch.cat([e, h[senders], h[receivers]], dim=1))
        incoming = torch.zeros_like(h).index_add(0, receivers, e) / degree[:, None]
        h = h + self.node_mlp(torch.cat([h, incoming], dim=1))
        return h, e


class LevelHeads(nn.Module):
    """Linear decoders for (v, omega, dF), zero-initialized so an untrained model is at rest."""

    def __init__(self, dim: int):
        super().__init__()
        self.velocity = nn.Linear(dim, 3)
        self.omega = nn.Linear(dim, 3)
        self.deformation = nn.Linear(dim, 9)
        for layer in (self.velocity, self.omega, self.deformation):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.velocity(h), self.omega(h), self.deformation(h).reshape(-1, 3, 3)


class DynamicsParams(nn.Module):
    """All learnable weights: the level graph network (psi) and the robot interaction network (phi)."""

    def __init__(self, embed_dim: int, num_layers: int, knn: int, attr_dim: int, num_levels: int):
        super().__init__()
        self.arch = {"embed_dim": embed_dim, "num_layers": num_layers, "knn": knn,
                     "attr_dim": attr_dim, "num_levels": num_levels}
        self.node_encoder = mlp(feature_dim(attr_dim, num_levels), embed_dim, embed_dim)
        self.edge_encoder = mlp(LEVEL_EDGE_DIM, embed_dim, embed_dim)
        self.layers = nn.ModuleList([InteractionLayer(embed_dim) for _ in range(num_layers)])
        self.heads = nn.ModuleList([LevelHeads(embed_dim) for _ in range(num_levels)])
        self.robot_net = mlp(EDGE_FEATURE_DIM, embed_dim, 3)

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.arch["attr_dim"], self.arch["num_levels"])

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def check_finite(self) -> None:
        for name, tensor in self.state_dict().items():
            if not bool(torch.isfinite(tensor).all()):
                raise ValidationError(f"parameter {name} is not finite")


def feature_dim(attr_dim: int, num_levels: int) -> int:
    """velocity 3 + position delta 3 + force 3 + attributes + plane distance 1 + level one-hot."""
    return 3 + 3 + 3 + attr_dim + 1 + num_levels


def init_params(cfg: DynamicsConfig, seed: int) -> DynamicsParams:
    """Seeded fan-in initialization; decoder heads start at exactly zero."""
    arch = cfg.arch()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        params = DynamicsParams(arch["embed_dim"], arch["num_layers"], arch["knn"], cfg.attr_dim, cfg.num_levels)
    return params.to(TORCH_DTYPES[cfg.dtype])


@dataclass
class LevelGraph:
    """Undirected kNN edges among one level's nodes at rest, stored as both directions."""

    senders: torch.Tensor
    receivers: torch.Tensor
    num_nodes: int

    def __post_init__(self):
        if bool((self.senders == self.receivers).any()):
            raise ValidationError("level graph contains self-edges")

    @property
    def degree(self) -> torch.Tensor:
        deg = torch.zeros(self.num_nodes, dtype=torch.float64).index_add(
            0, self.receivers, torch.ones(self.receivers.shape[0], dtype=torch.float64))
        return torch.clamp(deg, min=1.0)

    def permuted(self, perm: torch.Tensor) -> "LevelGraph":
        """Same graph after renumbering nodes so that new node i is old node perm[i]."""
        inverse = torch.empty_like(perm)
        inverse[perm] = torch.arange(perm.shape[0])
        return LevelGraph(inverse[self.senders], inverse[self.receivers], self.num_nodes)


def build_level_graph(positions: np.ndarray, k: int) -> LevelGraph:
    pts = np.asarray(positions, dtype=np.float64)
    n = pts.shape[0]
    k = min(k, n - 1)
    if k <= 0:
        empty = torch.zeros(0, dtype=torch.long)
        return LevelGraph(empty, empty.clone(), n)
    _, idx = cKDTree(pts).query(pts, k=k + 1)
    rows = np.repeat(np.arange(n), k + 1)
    cols = np.asarray(idx).reshape(-1)
    keep = rows != cols
    pairs = np.stack([rows[keep], cols[keep]], axis=1)
    pairs = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    pairs = np.unique(pairs, axis=0)
    return LevelGraph(torch.as_tensor(pairs[:, 0]), torch.as_tensor(pairs[:, 1]), n)


def build_level_graphs(h: Hierarchy, k: int) -> List[LevelGraph]:
    return [build_level_graph(h.rest_positions[level], k) for level in range(h.num_levels)]


def encode_features(x_prev: torch.Tensor, x_prevprev: torch.Tensor, forces: torch.Tensor,
                    attributes: torch.Tensor, plane: Plane, level: int, num_levels: int, dt: float,
                    velocities: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-node features; absolute positions enter only through the plane distance."""
    delta = x_prev - x_prevprev
    velocity = delta / dt if velocities is None else velocities
    n = x_prev.shape[0]
    onehot = torch.zeros(n, num_levels, dtype=x_prev.dtype)
    onehot[:, level] = 1.0
    return torch.cat([velocity, delta, forces, attributes.to(x_prev.dtype),
                      signed_distance(x_prev, plane)[:, None], onehot], dim=1)


def level_edge_features(graph: LevelGraph, positions: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    rel = positions[graph.senders] - positions[graph.receivers]
    ref = reference[graph.senders] - reference[graph.receivers]
    return torch.cat([rel, safe_norm(rel)[:, None], rel - ref], dim=1)


def level_step(params: DynamicsParams, graph: LevelGraph, features: torch.Tensor, level: int,
               positions: torch.Tensor, reference: torch.Tensor
               ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode, run the message-passing rounds and decode (v, omega, dF) for one level."""
    if features.shape[1] != params.feature_dim:
        raise ValidationError(f"feature width {features.shape[1]} != model width {params.feature_dim}")
    dtype = features.dtype
    h = params.node_encoder(features)
    e = params.edge_encoder(level_edge_features(graph, positions, reference))
    degree = graph.degree.to(dtype)
    for layer in params.layers:
        h, e = layer(h, e, graph.senders, graph.receivers, degree)
    return params.heads[level](h)


def axis_angle_matrix(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, batched; exactly the identity for a zero vector."""
    theta = safe_norm(rotvec)
    small = theta < 1e-6
    safe = torch.where(small, torch.ones_like(theta), theta)
    a = torch.where(small, 1.0 - theta ** 2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - torch.cos(safe)) / safe ** 2)
    x, y, z = rotvec[:, 0], rotvec[:, 1], rotvec[:, 2]
    zero = torch.zeros_like(x)
    K = torch.stack([
        torch.stack([zero, -z, y], dim=1),
        torch.stack([z, zero, -x], dim=1),
        torch.stack([-y, x, zero], dim=1),
    ], dim=1)
    eye = torch.eye(3, dtype=rotvec.dtype).expand_as(K)
    return eye + a[:, None, None] * K + b[:, None, None] * (K @ K)


@dataclass(frozen=True)
class Environment:
    plane: Plane
    gravity: np.ndarray


@dataclass(frozen=True)
class StepSettings:
    dt: float
    forces: ForceSettings
    offset_reference: str = "rest"

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValidationError(f"step dt must be positive, got {self.dt}")
        if self.offset_reference not in ("rest", "previous"):
            raise ValidationError(f"unknown offset reference '{self.offset_reference}'")

    def strided(self, stride: int) -> "StepSettings":
        return StepSettings(self.dt * stride, self.forces, self.offset_reference)


class Simulator:
    """Binds params to one scene (hierarchy, level graphs, environment) and steps it."""

    def __init__(self, params: DynamicsParams, hierarchy: Hierarchy, graphs: Sequence[LevelGraph],
                 env: Environment, settings: StepSettings, initial: SplatSetState):
        if hierarchy.num_levels != params.arch["num_levels"]:
            raise ValidationError(
                f"hierarchy has {hierarchy.num_levels} levels, model expects {params.arch['num_levels']}")
        if initial.attributes.shape[1] != params.arch["attr_dim"]:
            raise ValidationError(
                f"splat attributes have width {initial.attributes.shape[1]}, model expects {params.arch['attr_dim']}")
        self.params = params
        self.hierarchy = hierarchy
        self.graphs = list(graphs)
        self.env = env
        self.settings = settings
        self.initial = initial
        zeros = torch.zeros_like(initial.positions)
        self.rest_levels = aggregate(hierarchy, initial.positions, zeros, initial.attributes, initial.masses)

    def _control(self, action: RobotAction, dtype: torch.dtype) -> torch.Tensor:
        return torch.as_tensor(action.control_points, dtype=dtype)

    def advance(self, prev: SplatSetState, prevprev: SplatSetState, action: RobotAction,
                prev_action: RobotAction, t: int) -> Tuple[SplatSetState, List[torch.Tensor]]:
        """One step to frame t; also returns predicted positions per level (finest first)."""
        h = self.hierarchy
        dt = self.settings.dt
        dtype = prev.positions.dtype
        L = h.num_levels
        plane = self.env.plane
        fs = self.settings.forces

        splat_vel = (prev.positions - prevprev.positions) / dt
        controls = self._control(action, dtype)
        control_vel = (controls - self._control(prev_action, dtype)) / dt
        graph = build_interaction_graph(prev.positions, controls, control_vel, fs.rho)
        f_rob = robot_force(self.params.robot_net, splat_vel, graph, action.gripper)
        f_env = env_force(prev.positions, plane, self.env.gravity, fs.tau, fs.kappa, fs.g_mag)
        level_forces = aggregate_up(h, total_force(f_env, f_rob))

        levels_prev = aggregate(h, prev.positions, splat_vel, prev.attributes, prev.masses)
        levels_prevprev = aggregate(h, prevprev.positions, splat_vel, prev.attributes, prev.masses)
        if self.settings.offset_reference == "previous":
            reference = [lv.positions for lv in levels_prev]
            reference_cov = prev.covariances
        else:
            reference = [lv.positions for lv in self.rest_levels]
            reference_cov = self.initial.covariances

        predicted: List[Optional[torch.Tensor]] = [None] * L
        upstream = torch.eye(3, dtype=dtype).expand(h.level_sizes[-1], 3, 3)
        base = levels_prev[-1].positions
        outputs = None
        for level in range(L - 1, -1, -1):
            lv = levels_prev[level]
            features = encode_features(lv.positions, levels_prevprev[level].positions, level_forces[level],
                                       lv.attributes, plane, level, L, dt)
            v, omega, dF = level_step(self.params, self.graphs[level], features, level, lv.positions,
                                      self.rest_levels[level].positions)
            x_hat = base + v * dt
            predicted[level] = x_hat
            F = torch.eye(3, dtype=dtype) + dF
            if level > 0:
                # x_k = X_k + (x_c - X_c) + (P - I)(X_k - X_c), the propagation rule rearranged
                parent_shift = x_hat - reference[level]
                offsets_moved, P_child, _ = propagate(h, level, parent_shift, F, upstream,
                                                      child_reference=reference[level - 1],
                                                      parent_reference=reference[level])
                offsets = reference[level - 1] - reference[level][h.parent_tensor(level - 1)]
                base = reference[level - 1] + (offsets_moved - offsets)
                upstream = P_child
            else:
                outputs = (omega, upstream @ F)

        omega, P0 = outputs
        x_new = predicted[0]
        cov = P0 @ reference_cov @ P0.transpose(1, 2)
        R = axis_angle_matrix(omega * dt)
        cov = R @ cov @ R.transpose(1, 2)
        cov = 0.5 * (cov + cov.transpose(1, 2))
        for name, tensor in (("positions", x_new), ("covariances", cov)):
            if not bool(torch.isfinite(tensor.detach()).all()):
                raise SimulationDivergedError(t, f"non-finite {name}")
        velocities = (x_new - prev.positions) / dt
        return prev.advanced(x_new, cov, velocities, t), predicted

    def step(self, prev: SplatSetState, prevprev: SplatSetState, action: RobotAction,
             prev_action: RobotAction, t: int) -> SplatSetState:
        return self.advance(prev, prevprev, action, prev_action, t)[0]

    def rollout(self, actions: Sequence[RobotAction], T: int) -> List[SplatSetState]:
        """Open-loop rollout of T steps from the initial state; actions[i] belongs to frame i."""
        if T < 0 or T > len(actions) - 1:
            raise ValidationError(f"horizon {T} needs {T + 1} actions, got {len(actions)}")
        states = [self.initial]
        prevprev = self.initial
        for t in range(1, T + 1):
            state = self.step(states[-1], prevprev, actions[t], actions[t - 1], t)
            prevprev = states[-1]
            states.append(state)
        return states


def make_simulator(params: DynamicsParams, hierarchy: Hierarchy, env: Environment,
                   settings: StepSettings, initial: SplatSetState,
                   graphs: Optional[Sequence[LevelGraph]] = None) -> Simulator:
    if graphs is None:
        graphs = build_level_graphs(hierarchy, params.arch["knn"])
    return Simulator(params, hierarchy, graphs, env, settings, initial.to(params.dtype))


def step(params: DynamicsParams, h: Hierarchy, prev: SplatSetState, prevprev: SplatSetState,
         action: RobotAction, prev_action: RobotAction, env: Environment, settings: StepSettings,
         initial: Optional[SplatSetState] = None, graphs: Optional[Sequence[LevelGraph]] = None) -> SplatSetState:
    """Single step; ``initial`` (default ``prevprev``) supplies the rest configuration."""
    sim = make_simulator(params, h, env, settings, initial if initial is not None else prevprev, graphs)
    return sim.step(prev, prevprev, action, prev_action, prev.t + 1)


def rollout(params: DynamicsParams, G_0: SplatSetState, actions: Sequence[RobotAction], T: int,
            env: Environment, settings: StepSettings, h: Hierarchy,
            graphs: Optional[Sequence[LevelGraph]] = None) -> List[SplatSetState]:
    return make_simulator(params, h, env, settings, G_0, graphs).rollout(actions, T)


def parameter_summary(params: DynamicsParams) -> Dict[str, int]:
    return {"tensors": len(params.state_dict()), "weights": sum(p.numel() for p in params.parameters())}


@dataclass
class SceneContext:
    """Everything a rollout needs besides the weights, derived once per sequence."""

    hierarchy: Hierarchy
    graphs: List[LevelGraph]
    env: Environment
    settings: StepSettings


def scene_environment(sequence: SceneSequence) -> Environment:
    """Table plane from the table points; gravity points away from the wrist camera at frame 0, the normal against it."""
    plane = fit_plane(sequence.table_points)
    wrist = sequence.metadata.get("wrist_camera")
    cameras = {cam.name: cam for cam in sequence.cameras_at(0)}
    if not wrist or wrist not in cameras:
        raise CalibrationError(f"sequence {sequence.name} has no wrist camera to resolve the gravity sign")
    # view vector from the table toward the camera
    g = gravity_dir(plane, -cameras[wrist].optical_axis)
    if float(plane.normal @ g) > 0.0:
        # support pushes along the normal, so the normal must oppose gravity
        plane = plane.flipped()
    return Environment(plane, g)


def scene_context(sequence: SceneSequence, cfg: SimConfig,
                  parents: Optional[Sequence[np.ndarray]] = None) -> SceneContext:
    """Hierarchy (rebuilt from stored parent maps when given), level graphs, environment and step settings."""
    initial = sequence.initial_state
    if parents is not None:
        hierarchy = hierarchy_from_parents(initial.positions.detach().double().numpy(),
                                           initial.masses.detach().double().numpy(),
                                           initial.attributes.detach().double().numpy(), parents)
    else:
        sizes = cfg.hierarchy.sizes_for(initial.num_splats, cfg.dynamics.num_levels)
        hierarchy = build_hierarchy(initial, sizes, cfg.seed, cfg.hierarchy.kmeans_iters,
                                    cfg.hierarchy.kmeans_inits, cfg.hierarchy.max_retries)
    graphs = build_level_graphs(hierarchy, cfg.dynamics.arch()["knn"])
    forces = ForceSettings.from_config(cfg.forces, initial.covariances)
    settings = StepSettings(sequence.dt, forces, cfg.dynamics.offset_reference)
    return SceneContext(hierarchy, graphs, scene_environment(sequence), settings)

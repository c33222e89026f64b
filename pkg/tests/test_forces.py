import numpy as np
import pytest
import torch
from torch import nn

from config import ForceConfig
from core.dynamics import mlp
from core.errors import ValidationError
from core.forces import (EDGE_FEATURE_DIM, ForceSettings, aggregate_up, build_interaction_graph, edge_features,
                         env_force, mean_splat_radius, robot_force, total_force)
from core.hier import hierarchy_from_parents
from core.types import Plane

TABLE = Plane(np.array([0.0, 0.0, 1.0]), 0.0)
DOWN = np.array([0.0, 0.0, -1.0])


def _points(*rows):
    return torch.tensor(rows, dtype=torch.float64)


class _ConstantMessage(nn.Module):
    def forward(self, features):
        return torch.ones(features.shape[0], 3, dtype=features.dtype)


def test_env_force_far_from_table_is_gravity():
    f = env_force(_points([0.0, 0.0, 1.0]), TABLE, DOWN, tau=0.01)
    np.testing.assert_allclose(f.numpy(), [[0.0, 0.0, -1.0]])


def test_env_force_support_ramp():
    positions = _points([0.0, 0.0, 0.005], [0.0, 0.0, 0.0], [0.0, 0.0, -0.01])
    f = env_force(positions, TABLE, DOWN, tau=0.01, kappa=2.0)
    np.testing.assert_allclose(f[:, 2].numpy(), [-1.0 + 1.0, -1.0 + 2.0, -1.0 + 4.0])


def test_env_force_rejects_non_positive_tau():
    with pytest.raises(ValidationError):
        env_force(_points([0.0, 0.0, 0.0]), TABLE, DOWN, tau=0.0)


def test_force_settings_scale_with_splat_radius():
    cov = torch.eye(3, dtype=torch.float64).expand(5, 3, 3) * 0.01 ** 2
    assert mean_splat_radius(cov) == pytest.approx(0.01)
    settings = ForceSettings.from_config(ForceConfig(tau_factor=2.0, rho_factor=3.0), cov)
    assert settings.tau == pytest.approx(0.02)
    assert settings.rho == pytest.approx(0.03)


def test_interaction_graph_respects_radius():
    splats = _points([0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [1.0, 0.0, 0.0])
    controls = _points([0.0, 0.0, 0.01])
    graph = build_interaction_graph(splats, controls, torch.zeros(1, 3, dtype=torch.float64), rho=0.06)
    assert graph.splat_index.tolist() == [0, 1]
    assert bool((graph.distance <= 0.06).all())
    np.testing.assert_allclose(graph.displacement[0].numpy(), [0.0, 0.0, -0.01])


def test_interaction_graph_radius_boundary_inclusive():
    splats = _points([0.5, 0.0, 0.0])
    controls = _points([0.0, 0.0, 0.0])
    graph = build_interaction_graph(splats, controls, torch.zeros(1, 3, dtype=torch.float64), rho=0.5)
    assert graph.num_edges == 1


def test_edge_features_width():
    splats = _points([0.0, 0.0, 0.0])
    graph = build_interaction_graph(splats, _points([0.0, 0.0, 0.01]), torch.zeros(1, 3, dtype=torch.float64), 0.1)
    features = edge_features(graph, torch.zeros(1, 3, dtype=torch.float64), 0.5)
    assert features.shape == (1, EDGE_FEATURE_DIM)
    assert float(features[0, 7]) == 0.5


def test_robot_force_zero_without_edges():
    splats = _points([0.0, 0.0, 0.0])
    graph = build_interaction_graph(splats, _points([1.0, 1.0, 1.0]), torch.zeros(1, 3, dtype=torch.float64), 0.1)
    f = robot_force(_ConstantMessage(), torch.zeros(1, 3, dtype=torch.float64), graph, 0.0)
    np.testing.assert_array_equal(f.numpy(), np.zeros((1, 3)))


def test_robot_force_duplicated_graph_doubles():
    splats = _points([0.0, 0.0, 0.0], [0.01, 0.0, 0.0])
    graph = build_interaction_graph(splats, _points([0.0, 0.0, 0.01]), torch.zeros(1, 3, dtype=torch.float64), 0.1)
    velocities = torch.zeros(2, 3, dtype=torch.float64)
    once = robot_force(_ConstantMessage(), velocities, graph, 0.0)
    twice = robot_force(_ConstantMessage(), velocities, graph.duplicated(), 0.0)
    np.testing.assert_allclose(twice.numpy(), 2.0 * once.numpy())


def test_total_force_requires_matching_shapes():
    with pytest.raises(ValidationError):
        total_force(torch.zeros(2, 3), torch.zeros(3, 3))


def test_aggregate_up_sums_children():
    positions = np.random.default_rng(0).normal(size=(6, 3))
    h = hierarchy_from_parents(positions, np.ones(6), np.zeros((6, 2)),
                               [np.array([0, 0, 1, 1, 2, 2]), np.array([0, 0, 1])])
    forces = torch.arange(18, dtype=torch.float64).reshape(6, 3)
    levels = aggregate_up(h, forces)
    assert [tuple(f.shape) for f in levels] == [(6, 3), (3, 3), (2, 3)]
    np.testing.assert_allclose(levels[-1].sum(0).numpy(), forces.sum(0).numpy())
    np.testing.assert_allclose(levels[1][0].numpy(), (forces[0] + forces[1]).numpy())


def _interaction_net():
    torch.manual_seed(0)
    return mlp(EDGE_FEATURE_DIM, 8, 3).double()


def test_robot_force_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    phi = _interaction_net()
    controls = torch.as_tensor(rng.uniform(-0.01, 0.01, size=(3, 3)))
    control_vel = torch.as_tensor(rng.normal(scale=0.1, size=(3, 3)))
    positions = torch.as_tensor(rng.uniform(-0.01, 0.01, size=(4, 3))).requires_grad_(True)
    velocities = torch.as_tensor(rng.normal(scale=0.1, size=(4, 3))).requires_grad_(True)

    def force(x, v):
        graph = build_interaction_graph(x, controls, control_vel, 0.1)
        return robot_force(phi, v, graph, 0.5)

    assert build_interaction_graph(positions, controls, control_vel, 0.1).num_edges == 12
    assert torch.autograd.gradcheck(force, (positions, velocities), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_robot_force_invariant_to_joint_translation():
    rng = np.random.default_rng(2)
    phi = _interaction_net()
    positions = torch.as_tensor(rng.uniform(-0.02, 0.02, size=(6, 3)))
    controls = torch.as_tensor(rng.uniform(-0.02, 0.02, size=(3, 3)))
    control_vel = torch.as_tensor(rng.normal(size=(3, 3)))
    velocities = torch.as_tensor(rng.normal(size=(6, 3)))
    u = torch.tensor([0.3, -0.7, 1.1], dtype=torch.float64)
    with torch.no_grad():
        base = robot_force(phi, velocities, build_interaction_graph(positions, controls, control_vel, 0.03), 1.0)
        moved = robot_force(phi, velocities,
                            build_interaction_graph(positions + u, controls + u, control_vel, 0.03), 1.0)
    np.testing.assert_allclose(moved.numpy(), base.numpy(), atol=1e-12)


def test_env_force_is_continuous_at_the_support_threshold():
    tau = 0.01
    positions = _points([0.0, 0.0, tau - 1e-9], [0.0, 0.0, tau], [0.0, 0.0, tau + 1e-9])
    f = env_force(positions, TABLE, DOWN, tau=tau, kappa=3.0)
    np.testing.assert_allclose(f[1].numpy(), DOWN, atol=0.0)
    np.testing.assert_allclose(f[0].numpy(), f[2].numpy(), atol=1e-6)

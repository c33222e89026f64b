import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from core.errors import ValidationError
from core.hier import aggregate, build_hierarchy, hierarchy_from_parents, momentum_residual, propagate
from core.types import SplatSetState


def _state(n=40, seed=0):
    rng = np.random.default_rng(seed)
    positions = torch.as_tensor(rng.uniform(-0.1, 0.1, size=(n, 3)))
    return SplatSetState(
        positions=positions,
        covariances=torch.eye(3, dtype=torch.float64).expand(n, 3, 3) * 1e-4,
        masses=torch.as_tensor(rng.uniform(0.5, 1.5, size=n)),
        attributes=torch.as_tensor(rng.normal(size=(n, 4))),
        colors=torch.full((n, 3), 0.5, dtype=torch.float64),
        opacities=torch.full((n,), 0.9, dtype=torch.float64),
        velocities=torch.zeros(n, 3, dtype=torch.float64),
    )


@pytest.fixture
def splats():
    return _state()


@pytest.fixture
def hierarchy(splats):
    return build_hierarchy(splats, [40, 10, 2], seed=3, iters=30, inits=2)


def test_build_hierarchy_conserves_mass_and_center(hierarchy, splats):
    total = float(splats.masses.sum())
    for level in range(hierarchy.num_levels):
        assert hierarchy.masses[level].sum() == pytest.approx(total, rel=1e-12)
    com = (splats.masses[:, None] * splats.positions).sum(0).numpy() / total
    top = (hierarchy.masses[-1][:, None] * hierarchy.rest_positions[-1]).sum(0) / total
    np.testing.assert_allclose(top, com, atol=1e-12)


def test_build_hierarchy_is_deterministic(splats):
    a = build_hierarchy(splats, [40, 10, 2], seed=3, iters=30, inits=2)
    b = build_hierarchy(splats, [40, 10, 2], seed=3, iters=30, inits=2)
    for pa, pb in zip(a.parents, b.parents):
        np.testing.assert_array_equal(pa, pb)


def test_build_hierarchy_rejects_wrong_first_level(splats):
    with pytest.raises(ValidationError):
        build_hierarchy(splats, [39, 10, 2], seed=0)


def test_build_hierarchy_rejects_non_decreasing_sizes(splats):
    with pytest.raises(ValidationError):
        build_hierarchy(splats, [40, 40, 2], seed=0)


def test_hierarchy_from_parents_reproduces_rest_data(hierarchy, splats):
    again = hierarchy_from_parents(splats.positions.numpy(), splats.masses.numpy(), splats.attributes.numpy(),
                                   hierarchy.parents)
    assert again.level_sizes == hierarchy.level_sizes
    for a, b in zip(again.rest_positions, hierarchy.rest_positions):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_aggregate_matches_manual_weighted_mean(hierarchy, splats):
    velocities = torch.as_tensor(np.random.default_rng(5).normal(size=(40, 3)))
    levels = aggregate(hierarchy, splats.positions, velocities, splats.attributes, splats.masses)
    assert [lv.num_nodes for lv in levels] == [40, 10, 2]
    parents = hierarchy.parents[0]
    members = parents == 0
    m = splats.masses.numpy()[members]
    expected = (m[:, None] * velocities.numpy()[members]).sum(0) / m.sum()
    np.testing.assert_allclose(levels[1].velocities[0].numpy(), expected, atol=1e-12)


def test_aggregate_rest_positions_match_hierarchy(hierarchy, splats):
    levels = aggregate(hierarchy, splats.positions, torch.zeros(40, 3, dtype=torch.float64), splats.attributes,
                       splats.masses)
    for level in range(3):
        np.testing.assert_allclose(levels[level].positions.numpy(), hierarchy.rest_positions[level], atol=1e-12)


def test_aggregate_sums_forces(hierarchy, splats):
    forces = torch.ones(40, 3, dtype=torch.float64)
    levels = aggregate(hierarchy, splats.positions, torch.zeros_like(forces), splats.attributes, splats.masses,
                       forces)
    np.testing.assert_allclose(levels[-1].forces.sum(0).numpy(), [40.0, 40.0, 40.0])


def test_propagate_identity_returns_rest(hierarchy):
    parent = torch.as_tensor(hierarchy.rest_positions[1])
    eye = torch.eye(3, dtype=torch.float64).expand(10, 3, 3)
    children, products, _ = propagate(hierarchy, 1, parent, eye, eye)
    np.testing.assert_allclose(children.numpy(), hierarchy.rest_positions[0], atol=1e-14)
    np.testing.assert_allclose(products.numpy(), np.broadcast_to(np.eye(3), (40, 3, 3)))


def test_propagate_translation_moves_children_rigidly(hierarchy):
    shift = torch.tensor([0.01, -0.02, 0.03], dtype=torch.float64)
    parent = torch.as_tensor(hierarchy.rest_positions[1]) + shift
    eye = torch.eye(3, dtype=torch.float64).expand(10, 3, 3)
    children, _, _ = propagate(hierarchy, 1, parent, eye, eye)
    np.testing.assert_allclose(children.numpy(), hierarchy.rest_positions[0] + shift.numpy(), atol=1e-14)


def test_propagate_transforms_covariances(hierarchy):
    parent = torch.as_tensor(hierarchy.rest_positions[1])
    F = (2.0 * torch.eye(3, dtype=torch.float64)).expand(10, 3, 3)
    eye = torch.eye(3, dtype=torch.float64).expand(10, 3, 3)
    cov = torch.eye(3, dtype=torch.float64).expand(40, 3, 3) * 1e-4
    _, _, out = propagate(hierarchy, 1, parent, F, eye, child_covariances=cov)
    np.testing.assert_allclose(out.numpy(), np.broadcast_to(np.eye(3) * 4e-4, (40, 3, 3)), atol=1e-16)


def test_propagate_rejects_non_finite_gradient(hierarchy):
    F = torch.eye(3, dtype=torch.float64).expand(10, 3, 3).clone()
    F[0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        propagate(hierarchy, 1, torch.as_tensor(hierarchy.rest_positions[1]), F, F)


def test_momentum_residual_zero_at_rest(hierarchy):
    positions = [torch.as_tensor(x) for x in hierarchy.rest_positions]
    assert float(momentum_residual(hierarchy, positions)) == pytest.approx(0.0, abs=1e-20)


def test_momentum_residual_detects_displaced_cluster(hierarchy):
    positions = [torch.as_tensor(x).clone() for x in hierarchy.rest_positions]
    positions[2][0] += torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64)
    m = hierarchy.masses[2][0]
    assert float(momentum_residual(hierarchy, positions)) == pytest.approx((m * 0.1) ** 2, rel=1e-9)
    assert float(momentum_residual(hierarchy, positions, normalized=True)) == pytest.approx(0.01, rel=1e-9)


def test_momentum_residual_needs_every_level(hierarchy):
    with pytest.raises(ValidationError):
        momentum_residual(hierarchy, [torch.as_tensor(hierarchy.rest_positions[0])])


def test_momentum_residual_gradient_matches_finite_differences(hierarchy):
    rng = np.random.default_rng(4)
    positions = tuple(torch.as_tensor(x + rng.normal(scale=0.01, size=x.shape)).requires_grad_(True)
                      for x in hierarchy.rest_positions)
    assert torch.autograd.gradcheck(lambda *xs: momentum_residual(hierarchy, list(xs)), positions,
                                    eps=1e-6, atol=1e-8, rtol=1e-6)


def test_propagate_rotation_keeps_covariance_spectrum(hierarchy):
    rng = np.random.default_rng(5)
    rotations = torch.as_tensor(Rotation.random(10, random_state=6).as_matrix())
    eye = torch.eye(3, dtype=torch.float64).expand(10, 3, 3)
    basis = Rotation.random(40, random_state=7).as_matrix()
    scales = rng.uniform(1e-5, 1e-3, size=(40, 3))
    cov = torch.as_tensor(basis @ (scales[:, :, None] * np.transpose(basis, (0, 2, 1))))
    _, _, out = propagate(hierarchy, 1, torch.as_tensor(hierarchy.rest_positions[1]), rotations, eye,
                          child_covariances=cov)
    np.testing.assert_allclose(np.linalg.eigvalsh(out.numpy()), np.linalg.eigvalsh(cov.numpy()), atol=1e-10)

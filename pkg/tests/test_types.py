import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from config import NUM_CONTROL_POINTS
from core.errors import ValidationError
from core.types import (CameraModel, GaussianSplat, Hierarchy, Plane, RobotAction, SceneFrame, SimilarityTransform,
                        SplatSetState)
from utils.helpers import make_transform


def _splat(**changes):
    values = dict(position=[0.0, 0.0, 0.1], covariance=np.eye(3) * 1e-4, mass=0.01,
                  attributes=np.zeros(4), color=[0.5, 0.5, 0.5], opacity=0.9)
    values.update(changes)
    return GaussianSplat(**values)


def _action(gripper=0.5):
    return RobotAction(np.zeros(4), np.eye(4), gripper, np.zeros((NUM_CONTROL_POINTS, 3)))


def test_splat_arrays_are_frozen():
    splat = _splat()
    with pytest.raises(ValueError):
        splat.position[0] = 1.0


@pytest.mark.parametrize("changes", [
    {"covariance": np.diag([1e-4, 1e-4, -1e-4])},
    {"covariance": np.array([[1e-4, 1e-5, 0.0], [0.0, 1e-4, 0.0], [0.0, 0.0, 1e-4]])},
    {"mass": 0.0},
    {"opacity": 0.0},
    {"opacity": 1.2},
    {"color": [0.2, 1.1, 0.0]},
    {"position": [0.0, np.nan, 0.0]},
])
def test_splat_rejects_invalid_values(changes):
    with pytest.raises(ValidationError):
        _splat(**changes)


def test_state_from_splats_round_trips_a_splat():
    splats = [_splat(position=[0.1 * i, 0.0, 0.0]) for i in range(3)]
    state = SplatSetState.from_splats(splats)
    assert state.num_splats == 3
    assert state.dtype == torch.float64
    np.testing.assert_array_equal(state.splat(2).position, splats[2].position)
    assert state.validate_geometry() is state


def test_state_rejects_mismatched_shapes():
    n = 3
    with pytest.raises(ValidationError):
        SplatSetState(torch.zeros(n, 3), torch.eye(3).expand(n, 3, 3), torch.ones(n), torch.zeros(n, 2),
                      torch.zeros(n, 3), torch.ones(n), torch.zeros(n + 1, 3))


def test_state_rejects_non_finite_velocities():
    n = 2
    velocities = torch.zeros(n, 3)
    velocities[0, 0] = float("inf")
    with pytest.raises(ValidationError):
        SplatSetState(torch.zeros(n, 3), torch.eye(3).expand(n, 3, 3), torch.ones(n), torch.zeros(n, 2),
                      torch.zeros(n, 3), torch.ones(n), velocities)


def test_splats_must_agree_on_attribute_width():
    with pytest.raises(ValidationError):
        SplatSetState.from_splats([_splat(), _splat(attributes=np.zeros(5))])


def test_hierarchy_requires_surjective_parents():
    with pytest.raises(ValidationError, match="surjective"):
        Hierarchy(
            level_sizes=[4, 2],
            parents=[np.zeros(4, dtype=np.int64)],
            rest_positions=[np.zeros((4, 3)), np.zeros((2, 3))],
            masses=[np.ones(4), np.array([4.0, 0.0])],
            attributes=[np.zeros((4, 1)), np.zeros((2, 1))],
            child_counts=[np.ones(4), np.array([4, 0])],
        )


def _two_level(top_masses):
    return Hierarchy(
        level_sizes=[4, 2],
        parents=[np.array([0, 0, 1, 1])],
        rest_positions=[np.zeros((4, 3)), np.zeros((2, 3))],
        masses=[np.ones(4), np.asarray(top_masses, dtype=np.float64)],
        attributes=[np.zeros((4, 1)), np.zeros((2, 1))],
        child_counts=[np.ones(4), np.array([2, 2])],
    )


def test_hierarchy_mass_conservation_tolerance():
    assert _two_level([2.0, 2.0 + 4e-13]).num_levels == 2
    with pytest.raises(ValidationError, match="mass not conserved"):
        _two_level([2.0, 2.0 + 1e-9])


def test_hierarchy_requires_decreasing_sizes():
    with pytest.raises(ValidationError, match="decreasing"):
        Hierarchy([2, 2], [np.array([0, 1])], [np.zeros((2, 3))] * 2, [np.ones(2)] * 2,
                  [np.zeros((2, 1))] * 2, [np.ones(2)] * 2)


def test_robot_action_rejects_gripper_outside_unit_interval():
    with pytest.raises(ValidationError):
        _action(gripper=1.5)


def test_robot_action_accepts_scaled_rotation_block():
    X = SimilarityTransform(2.0, Rotation.from_euler("z", 0.4).as_matrix(), np.zeros(3))
    action = RobotAction(np.zeros(4), X.matrix(), 0.0, np.zeros((NUM_CONTROL_POINTS, 3)))
    assert action.ee_pose[0, 0] == pytest.approx(2.0 * np.cos(0.4))


def test_robot_action_record_round_trip():
    action = _action(0.25)
    again = RobotAction.from_record(action.to_record())
    assert again.gripper == 0.25
    np.testing.assert_array_equal(again.ee_pose, action.ee_pose)


def test_camera_rejects_non_rigid_pose():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValidationError):
        CameraModel("cam", 10.0, 10.0, 8.0, 8.0, 16, 16, pose)


def test_scene_frame_occluder_wins_in_supervision_mask():
    obj = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    occ = np.array([[1, 0], [1, 0]], dtype=np.uint8)
    frame = SceneFrame(0, {"c": np.zeros((2, 2, 3))}, {"c": np.ones((2, 2))}, {"c": obj}, {"c": occ}, _action())
    np.testing.assert_array_equal(frame.supervision_mask("c"), [[0, 1], [0, 0]])


def test_scene_frame_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        SceneFrame(0, {"c": np.zeros((2, 2, 3))}, {"c": np.ones((3, 2))}, {"c": np.zeros((2, 2))},
                   {"c": np.zeros((2, 2))}, _action())


def test_scene_frame_rejects_non_binary_mask():
    with pytest.raises(ValidationError):
        SceneFrame(0, {"c": np.zeros((2, 2, 3))}, {"c": np.ones((2, 2))}, {"c": np.full((2, 2), 2)},
                   {"c": np.zeros((2, 2))}, _action())


def test_similarity_rigid_map_matches_point_map(rng):
    X = SimilarityTransform(1.7, Rotation.from_rotvec([0.1, -0.2, 0.3]).as_matrix(), np.array([0.1, 0.2, -0.3]))
    T = make_transform(Rotation.from_rotvec(rng.normal(size=3)).as_matrix(), rng.normal(size=3))
    mapped = X.apply_rigid(T)
    np.testing.assert_allclose(mapped[:3, 3], X.apply_points(T[:3, 3]), atol=1e-12)
    np.testing.assert_allclose(mapped[:3, :3].T @ mapped[:3, :3], np.eye(3), atol=1e-12)


def test_similarity_covariance_map_scales_by_square():
    X = SimilarityTransform(3.0, np.eye(3), np.zeros(3))
    out = X.apply_covariances(np.eye(3)[None] * 0.5)
    np.testing.assert_allclose(out[0], np.eye(3) * 4.5)


def test_similarity_rejects_reflection():
    with pytest.raises(ValidationError):
        SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_plane_from_normal_normalizes_jointly():
    plane = Plane.from_normal([0.0, 0.0, 2.0], -0.6)
    np.testing.assert_allclose(plane.normal, [0.0, 0.0, 1.0])
    assert plane.offset == pytest.approx(-0.3)


def test_plane_rejects_non_unit_normal():
    with pytest.raises(ValidationError):
        Plane(np.array([0.0, 0.0, 2.0]), 0.0)


def test_flipped_plane_keeps_points_and_residual():
    plane = Plane.from_normal([0.0, 0.0, 1.0], -0.3, residual=0.01)
    flipped = plane.flipped()
    np.testing.assert_allclose(flipped.normal, [0.0, 0.0, -1.0])
    assert flipped.offset == pytest.approx(0.3)
    assert flipped.residual == 0.01
    assert Plane.from_record(flipped.to_record()).residual == 0.01


def test_plane_rejects_negative_residual():
    with pytest.raises(ValidationError):
        Plane(np.array([0.0, 0.0, 1.0]), 0.0, -1.0)

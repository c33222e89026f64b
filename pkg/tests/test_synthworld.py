import math

import numpy as np
import pytest

from config import MaterialConfig, RobotConfig, WorldConfig
from core.errors import ReachabilityError, StabilityError, ValidationError
from core.r2s import KinematicChain, fk
from core.synthworld import (HOLD, GraspCommand, downsample, generate_sequence, make_camera, make_scene, render_occluder,
                             run_task, script_task, simulate, solve_ik, split_sequences, state_from_scene,
                             step_oracle)
from core.types import SimilarityTransform
from utils.helpers import look_at, make_transform


@pytest.fixture
def chain():
    return KinematicChain.from_config(RobotConfig())


def _free_rope(stretch=0.0, gravity=0.0, drag=0.0, damping=0.0):
    scene = make_scene("rope", (2,), (0.1,), MaterialConfig(), seed=0, gravity=gravity)
    positions = scene.positions.copy()
    positions[1, 0] += stretch
    return scene.replace(positions=positions, drag=drag, damping=np.full(1, damping))


def test_cloth_spring_count():
    scene = make_scene("cloth", (10, 10), (0.2, 0.2), MaterialConfig(), seed=0)
    assert scene.num_particles == 100
    assert scene.springs.shape[0] == 342


def test_rope_of_two_has_one_spring():
    scene = make_scene("rope", (2,), (0.1,), MaterialConfig(), seed=0)
    assert scene.springs.tolist() == [[0, 1]]
    assert scene.rest_lengths[0] == pytest.approx(0.1)


def test_scene_rejects_degenerate_inputs():
    with pytest.raises(ValidationError):
        make_scene("rope", (1,), (0.1,), MaterialConfig(), seed=0)
    with pytest.raises(ValidationError):
        make_scene("cloth", (1, 5), (0.1, 0.1), MaterialConfig(), seed=0)
    with pytest.raises(ValidationError):
        make_scene("jelly", (4, 4), (0.1, 0.1), MaterialConfig(), seed=0)


def test_scene_placement_is_seeded():
    a = make_scene("cloth", (4, 3), (0.12, 0.09), MaterialConfig(), seed=3, center_jitter=0.02, yaw_jitter=0.3)
    b = make_scene("cloth", (4, 3), (0.12, 0.09), MaterialConfig(), seed=3, center_jitter=0.02, yaw_jitter=0.3)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_free_fall_matches_closed_form():
    scene = _free_rope(gravity=9.81)
    scene = scene.replace(positions=scene.positions + np.array([0.0, 0.0, 1.0]))
    dt, steps = 1e-3, 100
    for _ in range(steps):
        scene = step_oracle(scene, np.eye(4), HOLD, dt)
    expected = 1.0 - 9.81 * dt ** 2 * steps * (steps + 1) / 2.0
    np.testing.assert_allclose(scene.positions[:, 2], expected, atol=1e-12)
    np.testing.assert_allclose(scene.velocities[:, 2], -9.81 * dt * steps, atol=1e-12)


def test_single_spring_oscillation_period():
    scene = _free_rope(stretch=0.01)
    m = scene.masses[0]
    k = scene.stiffness[0]
    period = 2.0 * math.pi / math.sqrt(2.0 * k / m)
    dt = 1e-4
    extension, times = [], []
    for step in range(int(4 * period / dt)):
        scene = step_oracle(scene, np.eye(4), HOLD, dt)
        extension.append(np.linalg.norm(scene.positions[1] - scene.positions[0]) - scene.rest_lengths[0])
        times.append((step + 1) * dt)
    extension = np.array(extension)
    rising = np.nonzero((extension[:-1] < 0.0) & (extension[1:] >= 0.0))[0]
    assert len(rising) >= 2
    measured = float(np.mean(np.diff(np.array(times)[rising])))
    assert measured == pytest.approx(period, rel=0.02)


def test_energy_decays_with_drag():
    scene = _free_rope(stretch=0.01, drag=5.0, damping=0.02)
    initial = scene.energy()
    energies = []
    for _ in range(8000):
        scene = step_oracle(scene, np.eye(4), HOLD, 5e-5)
        energies.append(scene.energy())
    history = [initial] + energies
    for before, after in zip(history, history[1:]):
        assert after <= before * (1.0 + 1e-6)
    assert energies[-1] < 0.5 * initial


def test_table_blocks_falling_particles():
    scene = _free_rope(gravity=9.81).replace(drag=0.0)
    for _ in range(200):
        scene = step_oracle(scene, np.eye(4), HOLD, 1e-3)
    assert scene.positions[:, 2].min() >= -1e-12


def test_step_at_stability_bound_raises():
    scene = _free_rope()
    with pytest.raises(StabilityError):
        step_oracle(scene, np.eye(4), HOLD, scene.stability_bound())


def test_attach_pins_particles_to_gripper():
    scene = _free_rope(gravity=9.81)
    pose = make_transform(np.eye(3), scene.positions[0])
    scene = step_oracle(scene, pose, GraspCommand("attach", 0.01), 1e-3)
    assert scene.grasped.tolist() == [0]
    lifted = make_transform(np.eye(3), scene.positions[0] + np.array([0.0, 0.0, 0.05]))
    scene = step_oracle(scene, lifted, HOLD, 1e-3)
    np.testing.assert_allclose(scene.positions[0], lifted[:3, 3], atol=1e-12)
    scene = step_oracle(scene, lifted, GraspCommand("detach"), 1e-3)
    assert scene.grasped.size == 0


def test_simulate_returns_one_scene_per_frame():
    scene = _free_rope(gravity=9.81)
    poses = [np.eye(4)] * 4
    frames = simulate(scene, poses, [HOLD] * 4, 1.0 / 30.0)
    assert len(frames) == 4
    np.testing.assert_array_equal(frames[0].velocities, 0.0)


def test_simulate_requires_a_command_per_pose():
    scene = _free_rope()
    with pytest.raises(ValidationError):
        simulate(scene, [np.eye(4)] * 3, [HOLD] * 2, 0.03)


def test_solve_ik_reaches_target(chain):
    target = np.array([0.4, 0.1, 0.05])
    q = solve_ik(chain, target)
    np.testing.assert_allclose(fk(chain, q)[:3, 3], target, atol=1e-9)


def test_solve_ik_rejects_unreachable_target(chain):
    with pytest.raises(ReachabilityError):
        solve_ik(chain, [2.0, 0.0, 0.0])


def test_script_task_needs_ten_frames(chain):
    scene = make_scene("cloth", (4, 3), (0.12, 0.09), MaterialConfig(), seed=0, center=(0.38, 0.0))
    with pytest.raises(ValidationError):
        script_task("lift", scene, 9, 1.0 / 30.0, 0, chain)


def test_lift_raises_grasped_particle(chain):
    world = WorldConfig(frames=10)
    scene = make_scene("cloth", (4, 3), (0.12, 0.09), world.material, seed=0, center=(0.38, 0.0))
    task = script_task("lift", scene, 10, world.dt, 0, chain, world)
    trajectory = run_task(scene, task, chain, world)
    heights = [frame.positions[task.grasp_particle, 2] for frame in trajectory]
    assert heights[-1] > 0.1
    motion = heights[task.attach_frame:]
    assert all(b >= a - 1e-9 for a, b in zip(motion, motion[1:]))


def test_gripper_closes_before_attach(chain):
    world = WorldConfig(frames=20)
    scene = make_scene("rope", (8,), (0.2,), world.material, seed=1, center=(0.38, 0.0))
    task = script_task("drag", scene, 20, world.dt, 1, chain, world)
    assert task.gripper[0] == pytest.approx(1.0)
    assert task.gripper[task.attach_frame] == pytest.approx(0.0, abs=1e-12)
    assert task.command(task.attach_frame, 0.01).kind == "attach"


def test_state_from_scene_is_float32_exact():
    scene = make_scene("cloth", (4, 3), (0.12, 0.09), MaterialConfig(), seed=0)
    X = SimilarityTransform(1.3, np.eye(3), np.array([0.1, 0.0, 0.0]))
    state = state_from_scene(scene, X)
    positions = state.positions.numpy()
    np.testing.assert_array_equal(positions.astype(np.float32).astype(np.float64), positions)
    state.validate_geometry()


def test_render_occluder_hits_box_in_front_of_camera():
    camera = make_camera("cam", look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0)), 16, 16, 60.0)
    box = (np.eye(4), np.array([0.05, 0.05, 0.05]))
    depth = render_occluder(camera, [box])
    assert depth[8, 8] == pytest.approx(0.95)
    assert np.isinf(depth[0, 0])


def test_split_sequences_is_seeded_and_disjoint():
    a = split_sequences(10, 0.7, 3)
    assert a == split_sequences(10, 0.7, 3)
    assert len(a["train"]) == 7 and len(a["test"]) == 3
    assert sorted(a["train"] + a["test"]) == list(range(10))


def test_split_keeps_one_test_sequence():
    split = split_sequences(2, 1.0, 0)
    assert len(split["train"]) == 1 and len(split["test"]) == 1


def test_generated_sequence_shape(tiny_sequence):
    assert tiny_sequence.num_frames == 10
    assert [cam.name for cam in tiny_sequence.cameras] == ["wrist", "static0", "static1"]
    assert tiny_sequence.metadata["task"] == "lift"
    assert tiny_sequence.table_points.shape == (60, 3)
    frame = tiny_sequence.frames[0]
    assert frame.rgb["static0"].shape == (16, 16, 3)
    assert frame.object_mask["static0"].any()


def test_wrist_pose_pairs_follow_ground_truth(tiny_sequence):
    X = SimilarityTransform.from_record(tiny_sequence.metadata["calibration_truth"])
    for pair in tiny_sequence.metadata["wrist_pose_pairs"]:
        np.testing.assert_allclose(X.apply_rigid(np.asarray(pair["robot"])), pair["rec"], atol=1e-12)


def test_generation_is_deterministic(cfg_factory, tiny_sequence):
    again = generate_sequence(cfg_factory(), 7, "seq_test", "lift", "cloth")
    for a, b in zip(tiny_sequence.frames, again.frames):
        for cam in a.cameras:
            np.testing.assert_array_equal(a.rgb[cam], b.rgb[cam])
    np.testing.assert_array_equal(tiny_sequence.initial_state.positions.numpy(),
                                  again.initial_state.positions.numpy())


def test_downsample_averages_whole_blocks():
    image = np.arange(16, dtype=np.float64).reshape(4, 4)
    np.testing.assert_allclose(downsample(image, (2, 2)), [[2.5, 4.5], [10.5, 12.5]])
    assert downsample(image, (4, 4)) is image


def test_supersampled_camera_pixel_blocks_line_up():
    camera = make_camera("cam", look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0)), 16, 16, 60.0)
    fine = camera.scaled(2)
    assert (fine.width, fine.height) == (32, 32)
    assert fine.fx == pytest.approx(2.0 * camera.fx)
    # coarse pixel center u lands between fine pixels 2u and 2u + 1
    assert fine.cx == pytest.approx(2.0 * camera.cx + 0.5)
    np.testing.assert_array_equal(fine.pose, camera.pose)

import json
import math

import numpy as np
import pytest

from envlight.color import collect_paired_samples, fit_correction_matrix
from envlight.envmap import EnvironmentMap, data_loss
from envlight.geometry import RigidPose, look_at
from envlight.ingest import (label_reliability, load_colour, pointcloud_to_rgbd, read_point_cloud,
                             srgb_to_linear)
from envlight.synth import (COLOUR_RATE_HZ, DEPTH_RATE_HZ, OutsideRoomError, Rectangle,
                            SensorModel, SyntheticScene, dataset_digest, default_calibration,
                            generate_trajectory, ground_truth_em, render_synthetic_frame,
                            write_dataset)

FORWARD = look_at([0, 0, 0], [0, 0, 1])


def test_centre_pixel_sees_the_panel_in_front():
    scene = SyntheticScene.panel_room()
    fr = render_synthetic_frame(scene, FORWARD, SensorModel())
    cam = default_calibration().colour_camera
    code = fr.colour8[cam.height // 2, cam.width // 2]
    assert tuple(code) == (200, 40, 40)
    # the red panel sits at z = 1.6 in front of the origin
    depth_centre = default_calibration().depth_camera
    n = depth_centre.width * (depth_centre.height // 2) + depth_centre.width // 2
    assert fr.cloud.points[n, 2] == pytest.approx(1.6, abs=0.01)


def test_noise_free_depth_is_exact_plane_distance():
    scene = SyntheticScene.uniform_box()
    fr = render_synthetic_frame(scene, FORWARD, SensorModel())
    # the whole view hits the z = +2 wall
    assert np.allclose(fr.cloud.points[:, 2], 2.0, atol=1e-9)
    assert np.all(fr.cloud.confidence == 1.0)


def test_emissive_panel_gets_low_confidence_and_is_dropped():
    scene = SyntheticScene.panel_room()
    up = look_at([0.6, 0.0, -0.6], [0.6, 1.6, -0.55])
    fr = render_synthetic_frame(scene, up, SensorModel())
    assert np.any(fr.cloud.confidence == 0.1)
    frame = pointcloud_to_rgbd(fr.cloud, srgb_to_linear(fr.colour8), default_calibration())
    assert frame.known.sum() == np.sum(fr.cloud.confidence >= 0.7)


def test_depth_edges_get_mid_confidence():
    scene = SyntheticScene.panel_room()
    fr = render_synthetic_frame(scene, FORWARD, SensorModel())
    assert np.any(fr.cloud.confidence == 0.5)


def test_noise_scales_with_distance():
    s = SensorModel(noise_scale=1.0)
    assert s.sigma(0.5) == pytest.approx(0.001)
    assert s.sigma(4.0) == pytest.approx(0.04)
    assert s.sigma(10.0) == pytest.approx(0.04)
    scene = SyntheticScene.uniform_box()
    fr = render_synthetic_frame(scene, FORWARD, s)
    # the front wall is at 2 m: sigma = 0.001 + 0.039 * 1.5 / 3.5 along each ray
    err = np.linalg.norm(fr.cloud.points, axis=1) - np.linalg.norm(
        render_synthetic_frame(scene, FORWARD, SensorModel()).cloud.points, axis=1)
    expect = 0.001 + 0.039 * 1.5 / 3.5
    assert np.std(err) == pytest.approx(expect, rel=0.3)


def test_drift_recovered_by_correction_fit():
    scene = SyntheticScene.gallery_room()
    calib = default_calibration()
    pose = look_at([0, 0, 0], [1, 0.1, 1])
    clean = render_synthetic_frame(scene, pose, SensorModel())
    drifted = render_synthetic_frame(scene, pose, SensorModel(drift=[(0.0, np.diag([0.5, 1, 1]))]))
    ref = pointcloud_to_rgbd(clean.cloud, srgb_to_linear(clean.colour8), calib)
    cur = pointcloud_to_rgbd(drifted.cloud, srgb_to_linear(drifted.colour8), calib)
    label_reliability(cur)
    em = EnvironmentMap.empty(800, 400)
    from envlight.envmap import project_frame_to_em
    project_frame_to_em(ref, em, pose.translation, calib.depth_camera)
    pairs = collect_paired_samples(cur, em, calib.depth_camera)
    m = fit_correction_matrix(pairs)
    assert np.allclose(m, np.diag([2.0, 1, 1]), atol=0.05)


def test_drift_steps_by_time():
    a, b = np.diag([0.9, 1, 1]), np.diag([1, 1.1, 1])
    s = SensorModel(drift=[(2.0, b), (1.0, a)])
    assert np.array_equal(s.drift_at(0.5), np.eye(3))
    assert np.array_equal(s.drift_at(1.5), a)
    assert np.array_equal(s.drift_at(2.0), b)


def test_ill_conditioned_drift_rejected():
    with pytest.raises(ValueError):
        SensorModel(drift=[(0.0, np.diag([0.05, 1, 1]))])


def test_corrupt_interval_replaces_colour():
    scene = SyntheticScene.uniform_box((200, 200, 200))
    s = SensorModel(corrupt=[(1.0, 2.0)])
    ok = render_synthetic_frame(scene, FORWARD, s, t=0.5).colour8
    bad = render_synthetic_frame(scene, FORWARD, s, t=1.5).colour8
    assert np.all(ok == 200)
    assert bad.std() > 50


def test_colour_noise_is_seeded():
    scene = SyntheticScene.uniform_box((120, 120, 120))
    a = render_synthetic_frame(scene, FORWARD, SensorModel(colour_noise=2.0, seed=1)).colour8
    b = render_synthetic_frame(scene, FORWARD, SensorModel(colour_noise=2.0, seed=1)).colour8
    c = render_synthetic_frame(scene, FORWARD, SensorModel(colour_noise=2.0, seed=2)).colour8
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.astype(float).std() == pytest.approx(2.0, rel=0.2)


def test_outside_room_rejected():
    scene = SyntheticScene.uniform_box()
    with pytest.raises(OutsideRoomError):
        render_synthetic_frame(scene, look_at([5, 0, 0], [6, 0, 0]), SensorModel())
    with pytest.raises(OutsideRoomError):
        ground_truth_em(scene, [0, 3, 0], 40, 20)


def test_rectangle_outside_room_rejected():
    with pytest.raises(ValueError):
        SyntheticScene(rectangles=[Rectangle((0, 0, 1.9), (0.5, 0, 0.5), (0, 0.3, 0), (1, 2, 3))])


def test_ground_truth_of_uniform_box():
    scene = SyntheticScene.uniform_box((100, 150, 200))
    gt = ground_truth_em(scene, [0.1, 0.0, -0.2], 80, 40)
    assert np.all(gt.valid)
    assert np.allclose(gt.rgb, srgb_to_linear(np.array([100, 150, 200])), atol=1e-6)
    assert gt.depth.min() == pytest.approx(1.2, abs=0.05)
    assert data_loss(gt, gt) == 0.0


def test_panel_removed_after_its_time():
    panel = Rectangle((0, 0, 1.5), (0.3, 0, 0), (0, 0.3, 0), (255, 0, 0), present_until=3.0)
    scene = SyntheticScene.uniform_box(rectangles=[panel])
    dist0, surf0 = scene.cast([0, 0, 0], [[0, 0, 1]], t=2.9)
    dist1, surf1 = scene.cast([0, 0, 0], [[0, 0, 1]], t=3.0)
    assert dist0[0] == pytest.approx(1.5) and surf0[0] == 6
    assert dist1[0] == pytest.approx(2.0) and surf1[0] == 5


def test_scene_round_trip(tmp_path):
    scene = SyntheticScene.panel_room()
    scene.save(tmp_path / "scene.json")
    back = SyntheticScene.load(tmp_path / "scene.json")
    assert back.to_dict() == scene.to_dict()


# ---------------------------------------------------------------- trajectories

def test_zero_radius_orbit_is_static():
    traj = generate_trajectory("orbit", radius=0.0, frames=6, look="outward", colour_frames=False)
    assert all(np.allclose(s.pose.translation, 0) for s in traj)


def test_orbit_spacing_is_equal():
    traj = generate_trajectory("orbit", radius=0.05, frames=12, colour_frames=False)
    pos = np.array([s.pose.translation for s in traj])
    assert np.allclose(np.linalg.norm(pos, axis=1), 0.05)
    steps = np.linalg.norm(np.diff(np.vstack([pos, pos[:1]]), axis=0), axis=1)
    assert np.allclose(steps, steps[0])
    # inward: every pose looks at the centre
    for s in traj:
        fwd = s.pose.rotation[:, 2]
        assert np.allclose(fwd, -s.pose.translation / 0.05, atol=1e-9)


def test_approach_ends_at_target_position():
    traj = generate_trajectory("approach", start=[0, 0, -1.0], end=[0, 0, -0.05],
                               target=[0, 0, 2], frames=8, colour_frames=False)
    assert np.allclose(traj[-1].pose.translation, [0, 0, -0.05])
    d = [np.linalg.norm(s.pose.translation) for s in traj]
    assert d[-1] < 0.1 and all(a >= b for a, b in zip(d, d[1:]))


def test_camera_rates():
    traj = generate_trajectory("sweep", start=[-0.2, 0, 0], end=[0.2, 0, 0], frames=3)
    ts = np.array([s.timestamp for s in traj])
    depth_ts = ts[[s.has_depth for s in traj]]
    assert np.allclose(np.diff(ts), 1 / COLOUR_RATE_HZ)
    assert np.allclose(np.diff(depth_ts), 1 / DEPTH_RATE_HZ)
    assert len(traj) == 13


def test_colour_only_poses_interpolate():
    traj = generate_trajectory("sweep", start=[-0.3, 0, 0], end=[0.3, 0, 0], frames=2)
    mid = traj[3]
    assert not mid.has_depth
    assert np.allclose(mid.pose.translation, [0, 0, 0], atol=1e-12)
    assert np.allclose(mid.pose.rotation @ mid.pose.rotation.T, np.eye(3), atol=1e-12)


def test_unknown_trajectory_kind():
    with pytest.raises(ValueError):
        generate_trajectory("spiral")


# ---------------------------------------------------------------- datasets

def small_dataset(root, seed=0):
    traj = generate_trajectory("orbit", radius=0.0, frames=2, look="outward")
    return write_dataset(root, SyntheticScene.panel_room(), traj,
                         SensorModel(noise_scale=1.0, seed=seed))


def test_dataset_layout(tmp_path):
    root = small_dataset(tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    assert len(manifest["frames"]) == 7
    first = manifest["frames"][0]
    pts, conf = read_point_cloud(root / first["cloud_path"])
    assert pts.shape == (224 * 172, 3) and conf.shape == (224 * 172,)
    assert load_colour(root / first["colour_path"]).shape == (240, 320, 3)
    assert manifest["frames"][1]["cloud_path"] is None
    truth = json.loads((root / "truth.json").read_text())
    assert len(truth["frames"]) == 7


def test_dataset_is_deterministic(tmp_path):
    a = dataset_digest(small_dataset(tmp_path / "a", seed=4))
    b = dataset_digest(small_dataset(tmp_path / "b", seed=4))
    c = dataset_digest(small_dataset(tmp_path / "c", seed=5))
    assert a == b and a != c

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envlight.geometry import CameraModel, RigidPose
from envlight.ingest import (MAX_CLOUD_POINTS, Calibration, MalformedInputError, PointCloud,
                             RgbdFrame, colourize_filled, decode_nv21, depth_flatness_chi2,
                             encode_nv21, fill_holes, label_reliability, linear_to_srgb8,
                             load_colour, pointcloud_to_rgbd, read_point_cloud, srgb_to_linear,
                             write_point_cloud)
from oracles import brute_force_fill, random_reliability_case

DCAM = CameraModel(224, 172, 180.0, 180.0, 112.0, 86.0)
CCAM = CameraModel(320, 240, 230.0, 230.0, 160.0, 120.0)
CALIB = Calibration(DCAM, CCAM)


def nv21(y, u, v, w=2, h=2):
    return bytes([y] * (w * h) + [v, u] * (w * h // 4))


def frame_from(depth, reliable=None, rgb=None):
    h, w = depth.shape
    f = RgbdFrame.empty(w, h)
    f.depth = depth.astype(np.float64).copy()
    f.has_colour = depth > 0
    f.rgb = np.full((h, w, 3), 0.5) if rgb is None else rgb
    f.confidence = np.where(depth > 0, 1.0, 0.0)
    if reliable is not None:
        f.reliable = reliable.copy()
    return f


# ---------------------------------------------------------------- colour decoding

def test_nv21_white_and_black():
    assert np.all(decode_nv21(nv21(255, 128, 128), 2, 2) == 255)
    assert np.all(decode_nv21(nv21(0, 128, 128), 2, 2) == 0)


def test_nv21_red_pixel():
    # BT.601 full range evaluated by hand: (238.02, 14.09, 13.66)
    px = decode_nv21(nv21(81, 90, 240), 2, 2)[0, 0]
    assert tuple(px) == (238, 14, 14)


def test_nv21_rejects_bad_buffers():
    with pytest.raises(MalformedInputError):
        decode_nv21(b"\x00" * 5, 2, 2)
    with pytest.raises(MalformedInputError):
        decode_nv21(b"\x00" * 12, 3, 2)


def test_nv21_round_trip_on_flat_colour():
    img = np.zeros((4, 6, 3), np.uint8)
    img[:] = (120, 60, 200)
    back = decode_nv21(encode_nv21(img), 6, 4)
    assert np.max(np.abs(back.astype(int) - img)) <= 2


def test_load_colour_reads_nv21_and_png(tmp_path):
    raw = tmp_path / "f.nv21"
    raw.write_bytes(nv21(255, 128, 128, 4, 2))
    assert load_colour(raw, 4, 2).shape == (2, 4, 3)
    with pytest.raises(MalformedInputError):
        load_colour(raw)
    from PIL import Image
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "f.png")
    assert np.array_equal(load_colour(tmp_path / "f.png"), img)


def test_srgb_endpoints_and_linear_segment():
    assert srgb_to_linear(0) == 0.0
    assert srgb_to_linear(255) == 1.0
    assert srgb_to_linear(10) == pytest.approx(0.003035269835, abs=1e-12)


def test_srgb_monotone_and_round_trip_all_codes():
    codes = np.arange(256)
    lin = srgb_to_linear(codes)
    assert np.all(np.diff(lin) > 0)
    assert np.array_equal(linear_to_srgb8(lin), codes)


# ---------------------------------------------------------------- point clouds

def test_point_on_axis_lands_on_principal_point():
    colour = np.zeros((240, 320, 3))
    colour[120, 160] = (0.2, 0.4, 0.6)
    f = pointcloud_to_rgbd(PointCloud([[0, 0, 2.0]], [1.0]), colour, CALIB)
    assert f.depth[86, 112] == 2.0
    assert np.array_equal(f.rgb[86, 112], [0.2, 0.4, 0.6])
    assert np.count_nonzero(f.depth) == 1


def test_low_confidence_point_dropped():
    colour = np.ones((240, 320, 3))
    f = pointcloud_to_rgbd(PointCloud([[0, 0, 2.0]], [0.69]), colour, CALIB)
    assert not f.known.any()


def test_collision_keeps_nearer_point():
    colour = np.ones((240, 320, 3))
    pts = [[0, 0, 3.0], [0, 0, 1.0]]
    f = pointcloud_to_rgbd(PointCloud(pts, [1.0, 1.0]), colour, CALIB)
    assert f.depth[86, 112] == 1.0


def test_empty_cloud_gives_unknown_frame():
    f = pointcloud_to_rgbd(PointCloud(np.zeros((0, 3)), np.zeros(0)), np.ones((240, 320, 3)), CALIB)
    assert f.depth.shape == (172, 224) and not f.known.any()


def test_point_outside_colour_image_is_skipped():
    narrow = Calibration(DCAM, CameraModel(320, 240, 40.0, 40.0, 160.0, 120.0),
                         RigidPose(translation=[20.0, 0, 0]))
    f = pointcloud_to_rgbd(PointCloud([[0, 0, 2.0]], [1.0]), np.ones((240, 320, 3)), narrow)
    assert not f.known.any()


def test_colour_pose_overrides_static_extrinsic():
    colour = np.zeros((240, 320, 3))
    colour[120, 160 + 23] = 1.0        # 0.2 m shift at 2 m depth = 23 px
    cloud = PointCloud([[0, 0, 2.0]], [1.0])
    f = pointcloud_to_rgbd(cloud, colour, CALIB, colour_pose=RigidPose(translation=[-0.2, 0, 0]))
    assert np.array_equal(f.rgb[86, 112], [1.0, 1.0, 1.0])


def test_too_many_points_warns():
    pts = np.tile([0, 0, 1.0], (MAX_CLOUD_POINTS + 1, 1))
    with pytest.warns(UserWarning, match="38528"):
        PointCloud(pts, np.ones(len(pts)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        PointCloud(pts[:MAX_CLOUD_POINTS], np.ones(MAX_CLOUD_POINTS))


def test_cloud_validation():
    with pytest.raises(MalformedInputError):
        PointCloud([[0, 0, 1]], [1.2])
    with pytest.raises(MalformedInputError):
        PointCloud([[0, 0, 1]], [1.0, 1.0])


def test_point_cloud_file_round_trip(tmp_path):
    pts = np.random.default_rng(1).normal(size=(50, 3)).astype(np.float32)
    conf = np.linspace(0, 1, 50).astype(np.float32)
    write_point_cloud(tmp_path / "c.bin", pts, conf)
    p, c = read_point_cloud(tmp_path / "c.bin")
    assert np.array_equal(p, pts) and np.array_equal(c, conf)
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 20)
    with pytest.raises(MalformedInputError):
        read_point_cloud(tmp_path / "bad.bin")


def brute_force_splat(points, conf):
    """Per-point projection with an explicit z-buffer loop."""
    depth = np.zeros((172, 224))
    for p, c in zip(points, conf):
        if c < 0.7 or p[2] <= 0:
            continue
        cu = int(np.floor(230.0 * p[0] / p[2] + 160.0 + 0.5))
        cv = int(np.floor(230.0 * p[1] / p[2] + 120.0 + 0.5))
        du = int(np.floor(180.0 * p[0] / p[2] + 112.0 + 0.5))
        dv = int(np.floor(180.0 * p[1] / p[2] + 86.0 + 0.5))
        if not (0 <= cu < 320 and 0 <= cv < 240 and 0 <= du < 224 and 0 <= dv < 172):
            continue
        if depth[dv, du] == 0 or p[2] < depth[dv, du]:
            depth[dv, du] = p[2]
    return depth


def test_splat_matches_brute_force_projection():
    rng = np.random.default_rng(7)
    pts = np.column_stack([rng.uniform(-0.3, 0.3, 3000), rng.uniform(-0.2, 0.2, 3000),
                           rng.uniform(0.5, 1.5, 3000)])
    conf = rng.uniform(0.5, 1.0, 3000)
    f = pointcloud_to_rgbd(PointCloud(pts, conf), np.ones((240, 320, 3)), CALIB)
    assert np.array_equal(f.depth, brute_force_splat(pts, conf))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_splat_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 400
    pts = np.column_stack([rng.integers(-3, 4, n) * 0.01, rng.integers(-3, 4, n) * 0.01,
                           rng.choice([1.0, 1.5, 2.0], n)])
    conf = np.ones(n)
    colour = rng.random((240, 320, 3))
    a = pointcloud_to_rgbd(PointCloud(pts, conf), colour, CALIB)
    perm = rng.permutation(n)
    b = pointcloud_to_rgbd(PointCloud(pts[perm], conf[perm]), colour, CALIB)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.rgb, b.rgb)


# ---------------------------------------------------------------- reliability

def test_flat_plane_interior_reliable():
    f = frame_from(np.full((20, 30), 2.0))
    rel = label_reliability(f)
    assert rel[1:-1, 1:-1].all()
    assert rel is f.reliable


def test_underexposed_and_overexposed_pixels_unreliable():
    rgb = np.full((10, 10, 3), 0.5)
    rgb[3, 3] = (0.02, 0.03, 0.01)
    rgb[5, 5] = (0.97, 0.99, 0.96)
    rgb[6, 6] = (0.02, 0.5, 0.99)       # mixed channels stay usable
    rel = label_reliability(frame_from(np.full((10, 10), 2.0), rgb=rgb))
    assert not rel[3, 3] and not rel[5, 5] and rel[6, 6]


def test_depth_step_edge_unreliable():
    depth = np.full((20, 20), 2.0)
    depth[:, 10:] = 2.1
    chi2 = depth_flatness_chi2(depth)
    # hand evaluation for a pixel at the step with 3 of 9 samples across it:
    # mean = 2.0333.., ss = 6 * 0.0333..^2 + 3 * 0.0666..^2 = 0.02
    assert chi2[5, 9] == pytest.approx(0.02 / 1e-4, rel=1e-9)
    rel = label_reliability(frame_from(depth))
    assert not rel[:, 9:11].any()
    assert rel[5, 3] and rel[5, 15]


def test_unknown_depth_unreliable():
    depth = np.full((10, 10), 2.0)
    depth[4, 4] = 0
    assert not label_reliability(frame_from(depth))[4, 4]


# ---------------------------------------------------------------- hole filling

def test_hole_surrounded_by_equal_depth():
    depth = np.full((9, 9), 2.0)
    depth[4, 4] = 0
    f = frame_from(depth)
    label_reliability(f)
    out = fill_holes(f)
    assert out.depth[4, 4] == 2.0 and out.filled[4, 4] and not out.reliable[4, 4]


def test_two_hit_weighted_mean():
    depth = np.zeros((1, 224))
    reliable = np.zeros((1, 224), bool)
    depth[0, 104], reliable[0, 104] = 1.0, True      # 4 steps west of the hole
    depth[0, 222], reliable[0, 222] = 3.0, True      # 114 steps east
    out = fill_holes(frame_from(depth, reliable))
    assert out.depth[0, 108] == pytest.approx((220 * 1.0 + 110 * 3.0) / 330, abs=1e-12)


def test_region_without_reliable_pixels_stays_unknown():
    depth = np.zeros((5, 224))
    depth[2, :] = 1.0
    out = fill_holes(frame_from(depth, np.zeros((5, 224), bool)))
    assert not out.depth[[0, 1, 3, 4]].any()
    assert not out.filled.any()


def test_fill_matches_brute_force_scan():
    for seed in range(6):
        depth, reliable = random_reliability_case(seed, 60, 40)
        out = fill_holes(frame_from(depth, reliable))
        ref, ref_filled = brute_force_fill(depth, reliable)
        assert np.array_equal(out.depth, ref)
        assert np.array_equal(out.filled, ref_filled)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_fill_invariants(seed):
    depth, reliable = random_reliability_case(seed, 40, 30)
    out = fill_holes(frame_from(depth, reliable))
    known = depth > 0
    assert np.array_equal(out.depth[known], depth[known])
    assert not out.reliable[out.filled].any()
    if reliable.any():
        lo, hi = depth[reliable].min(), depth[reliable].max()
        filled = out.depth[out.filled]
        assert np.all(filled >= lo - 1e-12) and np.all(filled <= hi + 1e-12)
    else:
        assert not out.filled.any()


def test_filled_pixels_take_colour_from_colour_image():
    depth = np.full((172, 224), 2.0)
    depth[86, 112] = 0.0
    f = frame_from(depth)
    f.has_colour[86, 112] = False
    label_reliability(f)
    out = fill_holes(f)
    colour = np.zeros((240, 320, 3))
    colour[120, 160] = (0.3, 0.2, 0.1)
    colourize_filled(out, colour, CALIB)
    assert out.has_colour[86, 112]
    assert np.array_equal(out.rgb[86, 112], [0.3, 0.2, 0.1])

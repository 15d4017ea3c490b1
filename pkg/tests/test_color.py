import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envlight.color import (CorrectionLog, CorrectionState, DegenerateSamplesError,
                            InsufficientSamplesError, PairedSamples, apply_correction,
                            bootstrap_state, collect_paired_samples, correction_mse,
                            fit_correction_matrix, gate_matrix, keep_state)
from envlight.envmap import EnvironmentMap, project_frame_to_em
from envlight.geometry import dir_to_pixel, look_at
from envlight.ingest import RgbdFrame, backproject, exposure_ok
from envlight.synth import default_calibration

DCAM = default_calibration().depth_camera


def pairs_from(current, reference):
    current = np.asarray(current, float)
    n = len(current)
    z2 = np.zeros((n, 2), np.int64)
    return PairedSamples(current, np.asarray(reference, float), z2, z2.copy(),
                         np.ones(n), np.ones(n))


def diverse_colours(n, seed=0):
    return np.random.default_rng(seed).uniform(0.05, 0.9, (n, 3))


def wall_frame(depth=2.0, pose=None, seed=0):
    rng = np.random.default_rng(seed)
    f = RgbdFrame.empty(DCAM.width, DCAM.height, pose or look_at([0, 0, 0], [0, 0, 1]))
    f.depth[:] = depth
    f.rgb = rng.uniform(0.1, 0.9, (DCAM.height, DCAM.width, 3))
    f.rgb[:10] = 0.01                                       # under-exposed strip
    f.has_colour[:] = True
    f.confidence[:] = 1.0
    f.reliable = exposure_ok(f.rgb)
    return f


# ---------------------------------------------------------------- pairing

def test_empty_em_gives_no_pairs():
    pairs = collect_paired_samples(wall_frame(), EnvironmentMap.empty(200, 100), DCAM)
    assert len(pairs) == 0


def test_reobserved_surface_pairs_every_reliable_pixel_with_valid_data():
    frame = wall_frame()
    em = EnvironmentMap.empty(2000, 1000)
    project_frame_to_em(frame, em, [0, 0, 0], DCAM)
    pairs = collect_paired_samples(frame, em, DCAM)
    # brute-force re-projection of each reliable pixel
    pts, ys, xs = backproject(frame, DCAM, frame.reliable)
    world = frame.pose.apply(pts)
    expected = 0
    for p in world:
        r = np.linalg.norm(p)
        u, v = dir_to_pixel(p / r, 2000, 1000)
        if em.valid[v, u] and abs(r - em.depth[v, u]) <= 0.01 and exposure_ok(em.rgb[v, u]):
            expected += 1
    assert len(pairs) == expected > 0.9 * frame.reliable.sum()


def test_depth_mismatch_over_one_centimetre_discarded():
    frame = RgbdFrame.empty(DCAM.width, DCAM.height, look_at([0, 0, 0], [0, 0, 1]))
    frame.depth[86, 112] = 2.0          # close to the optical axis
    frame.rgb[86, 112] = 0.5
    frame.has_colour[86, 112] = frame.reliable[86, 112] = True
    pts, _, _ = backproject(frame, DCAM, frame.reliable)
    p = frame.pose.apply(pts)[0]
    u, v = dir_to_pixel(p / np.linalg.norm(p), 2000, 1000)
    em = EnvironmentMap.empty(2000, 1000)
    em.valid[v, u] = True
    em.rgb[v, u] = 0.5
    em.depth[v, u] = np.linalg.norm(p) + 0.02
    assert len(collect_paired_samples(frame, em, DCAM)) == 0
    em.depth[v, u] = np.linalg.norm(p) + 0.005
    assert len(collect_paired_samples(frame, em, DCAM)) == 1


def test_badly_exposed_em_colour_discarded():
    frame = wall_frame()
    em = EnvironmentMap.empty(2000, 1000)
    project_frame_to_em(frame, em, [0, 0, 0], DCAM)
    em.rgb[:] = 0.99
    assert len(collect_paired_samples(frame, em, DCAM)) == 0


# ---------------------------------------------------------------- fitting

def test_identity_pairs_give_identity():
    c = diverse_colours(200)
    assert np.allclose(fit_correction_matrix(pairs_from(c, c)), np.eye(3), atol=1e-6)


def test_half_brightness_gives_diag_two():
    c = diverse_colours(200)
    m = fit_correction_matrix(pairs_from(0.5 * c, c))
    assert np.allclose(m, np.diag([2.0, 2.0, 2.0]), atol=1e-3)


def test_grey_samples_are_degenerate():
    g = np.linspace(0.1, 0.9, 100)[:, None] * np.ones(3)
    with pytest.raises(DegenerateSamplesError):
        fit_correction_matrix(pairs_from(g, g))


def test_too_few_samples():
    c = diverse_colours(29)
    with pytest.raises(InsufficientSamplesError):
        fit_correction_matrix(pairs_from(c, c))
    fit_correction_matrix(pairs_from(c, c), min_samples=10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(30, 400))
def test_fit_solves_damped_normal_equations(seed, n):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.0, 1.0, (n, 3))
    r = rng.uniform(0.0, 1.0, (n, 3))
    try:
        m = fit_correction_matrix(pairs_from(c, r))
    except DegenerateSamplesError:
        return
    grad = 2 * (c @ m.T - r).T @ c + 2e-6 * m
    assert np.linalg.norm(grad) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(100, 600))
def test_recovers_inverse_of_camera_matrix(seed, n):
    rng = np.random.default_rng(seed)
    g = np.eye(3) + rng.uniform(-0.2, 0.2, (3, 3))
    truth = rng.uniform(0.05, 0.9, (n, 3))
    m = fit_correction_matrix(pairs_from(truth @ g.T, truth))
    assert np.linalg.norm(m @ g - np.eye(3)) < 1e-2


# ---------------------------------------------------------------- gating

def test_zero_mse_accepted():
    c = diverse_colours(100)
    state = gate_matrix(np.eye(3), pairs_from(c, c), bootstrap_state())
    assert state.accepted_flag and state.project_enabled and state.mse == 0.0


def test_mse_above_threshold_rejected_keeps_previous_matrix():
    prev = CorrectionState(accepted=np.diag([1.1, 0.9, 1.0]), reference_defined=True)
    c = np.full((100, 3), 0.5)
    ref = c + np.sqrt(0.06)             # per-channel residual^2 = 0.06 everywhere
    pairs = pairs_from(c, ref)
    assert correction_mse(np.eye(3), pairs) == pytest.approx(0.06)
    state = gate_matrix(np.eye(3), pairs, prev)
    assert not state.accepted_flag and not state.project_enabled
    assert state.accepted is prev.accepted
    assert state.mse == pytest.approx(0.06)


def test_bootstrap_is_identity_with_projection():
    s = bootstrap_state()
    assert np.array_equal(s.accepted, np.eye(3)) and s.project_enabled and s.reference_defined


def test_keep_state_reuses_matrix():
    prev = CorrectionState(accepted=np.diag([2.0, 1.0, 1.0]), reference_defined=True)
    s = keep_state(prev, 12)
    assert s.accepted is prev.accepted and s.project_enabled and not s.refitted
    assert s.samples == 12


def test_gate_monotonicity_property():
    rng = np.random.default_rng(5)
    state = bootstrap_state()
    for _ in range(50):
        c = rng.uniform(0, 1, (60, 3))
        ref = c @ (np.eye(3) + rng.normal(0, 0.5, (3, 3))).T
        cand = rng.normal(size=(3, 3))
        new = gate_matrix(cand, pairs_from(c, ref), state)
        if not new.accepted_flag:
            assert new.accepted.tobytes() == state.accepted.tobytes()
        state = new


# ---------------------------------------------------------------- applying

def test_apply_correction():
    img = np.array([[[0.1, 0.2, 0.3]]])
    assert np.array_equal(apply_correction(img, np.eye(3)), img)
    assert np.allclose(apply_correction(img, 2 * np.eye(3)), [[[0.2, 0.4, 0.6]]])
    neg = apply_correction(img, -np.eye(3))
    assert np.all(neg == 0)


def test_apply_inverse_round_trip():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (20, 30, 3))
    m = np.array([[0.9, 0.05, 0.0], [0.0, 1.1, 0.05], [0.03, 0.0, 0.85]])
    # the matrix keeps these colours positive, so the clamp never engages
    back = apply_correction(apply_correction(img, m), np.linalg.inv(m))
    assert np.max(np.abs(back - img)) < 1e-5


def test_correction_log_csv(tmp_path):
    log = CorrectionLog()
    log.add(0.2, bootstrap_state())
    log.add(0.4, CorrectionState(accepted=np.diag([2.0, 1.0, 1.0]), mse=0.01))
    log.write(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0][:3] == ["timestamp", "mse", "accepted"] and len(rows[0]) == 14
    assert float(rows[2][5]) == 2.0 and rows[2][1] == "0.01"

import numpy as np
import pytest

from radslam import fileio, radiometric, synth
from radslam.imagecore import load_sequence
from radslam.se3 import Pose


def test_render_deterministic():
    cam = synth.default_camera()
    pose = synth.trajectory(3)[2]
    a_rad, a_depth = synth.render(cam, pose)
    b_rad, b_depth = synth.render(cam, pose)
    assert np.array_equal(a_rad, b_rad)
    assert np.array_equal(a_depth, b_depth)


def test_render_full_coverage_and_dynamic_range():
    cam = synth.default_camera()
    rad, depth = synth.render(cam, Pose.identity())
    assert np.all(depth > 0)
    assert np.all(rad > 0)
    assert rad.max() / rad.min() > 50.0


def test_render_translation_shifts_depth():
    cam = synth.default_camera()
    _, d0 = synth.render(cam, Pose.identity())
    step = Pose(np.eye(3), np.array([0.0, 0.0, 0.1]))
    _, d1 = synth.render(cam, step)
    cy, cx = cam.height // 2, cam.width // 2
    assert np.isclose(d0[cy, cx] - d1[cy, cx], 0.1, atol=1e-3)


def test_simulate_ldr_hits_anchor_level():
    curve = synth.true_response()
    anchor = curve.f_inv[0, 128]
    lum = np.full((4, 4, 3), anchor / 12.0)
    rng = np.random.default_rng(0)
    quiet = radiometric.NoiseModel(np.zeros(3), np.zeros(3), m=1.0)
    img = synth.simulate_ldr(lum, 12.0, curve, quiet, rng)
    assert np.all(np.abs(img.astype(int) - 128) <= 1)


def test_simulate_ldr_exposure_doubling_linearizes():
    curve = synth.true_response()
    rng = np.random.default_rng(1)
    lum = np.random.default_rng(2).uniform(2e3, 2e4, size=(16, 16, 3))
    quiet = radiometric.NoiseModel(np.zeros(3), np.zeros(3), m=1.0)
    i1 = synth.simulate_ldr(lum, 8.0, curve, quiet, rng)
    i2 = synth.simulate_ldr(lum, 16.0, curve, quiet, rng)
    ok = (i1 > 5) & (i1 < 250) & (i2 > 5) & (i2 < 250)
    r1 = curve.radiance(i1)[ok]
    r2 = curve.radiance(i2)[ok]
    step = np.diff(curve.f_inv[0]).max()
    assert np.abs(r2 - 2.0 * r1).max() <= 3.0 * step


def test_simulate_ldr_noise_matches_model():
    curve = synth.true_response()
    noise = synth.true_noise()
    lum = np.full((100, 100, 3), curve.f_inv[0, 170] / 12.0)
    rng = np.random.default_rng(3)
    stack = np.stack([synth.simulate_ldr(lum, 12.0, curve, noise, rng)
                      for _ in range(30)]).astype(np.float64)
    measured = stack.std(axis=0, ddof=1).mean()
    predicted = noise.intensity_noise_std(curve)[0, 170]
    assert abs(measured / predicted - 1.0) < 0.1


def test_flicker_schedule_membership_and_determinism():
    a = synth.flicker_schedule(200, seed=5)
    b = synth.flicker_schedule(200, seed=5)
    c = synth.flicker_schedule(200, seed=6)
    assert a == b
    assert a != c
    assert set(a) <= set(synth.FLICKER_LADDER_MS)


def test_flicker_schedule_frequencies():
    draws = synth.flicker_schedule(6000, seed=8)
    for v in synth.FLICKER_LADDER_MS:
        freq = draws.count(v) / 6000.0
        assert abs(freq - 1.0 / 6.0) < 0.05 * 1.0


def test_auto_exposure_formula():
    lum = np.full((240, 320, 3), 4.8e3)
    assert synth.auto_exposure_ms(lum) == pytest.approx(100.0)
    assert synth.auto_exposure_ms(lum * 2.0) == pytest.approx(50.0)
    assert synth.auto_exposure_ms(lum * 1e9) == 1.0
    assert synth.auto_exposure_ms(np.zeros((240, 320, 3))) == 200.0


def test_auto_exposure_patch_oracle():
    rng = np.random.default_rng(9)
    lum = rng.uniform(1e3, 1e5, size=(240, 320, 3))
    want = float(np.clip(synth.AE_TARGET / lum[115:125, 155:165].mean(),
                         1.0, 200.0))
    assert synth.auto_exposure_ms(lum) == pytest.approx(want)


def test_noisy_depth_stats_and_invalids():
    rng = np.random.default_rng(10)
    depth = np.full((200, 200), 2.0, dtype=np.float32)
    noisy = synth.noisy_depth(depth, rng)
    want = synth.DEPTH_NOISE_A + synth.DEPTH_NOISE_B * 4.0
    assert abs(float((noisy - 2.0).std()) / want - 1.0) < 0.1
    zeros = np.zeros((5, 5), dtype=np.float32)
    assert np.all(synth.noisy_depth(zeros, rng) == 0.0)


def test_trajectory_starts_at_identity_with_small_steps():
    poses = synth.trajectory(100)
    assert np.allclose(poses[0].rotation, np.eye(3), atol=1e-12)
    assert np.allclose(poses[0].translation, 0.0, atol=1e-12)
    for a, b in zip(poses, poses[1:]):
        delta = a.inverse().compose(b)
        assert np.linalg.norm(delta.translation) < 0.02
        assert delta.rotation_angle() < np.deg2rad(0.5)


def test_generate_and_load_roundtrip(tmp_path):
    d = tmp_path / "seq"
    synth.generate_sequence(d, mode="flicker", n_frames=4, seed=12,
                            depth_noise=False)
    seq = load_sequence(d)
    assert len(seq) == 4
    assert seq.camera.width == 320 and seq.camera.height == 240
    assert len(seq.groundtruth) == 4
    exps = [f.exposure_ms for f in seq.frames]
    assert set(exps) <= set(synth.FLICKER_LADDER_MS)
    assert seq.hdr_frame(2).shape == (240, 320, 3)
    for f in seq.frames:
        assert f.rgb.shape == (240, 320, 3)
        assert f.depth.shape == (240, 320)


def test_ldr_conversion_recovers_scaled_radiance(tmp_path):
    """Noise-free simulation then linearization lands on L * exposure."""
    cam = synth.default_camera()
    curve = synth.true_response()
    lum, depth = synth.render(cam, Pose.identity())
    quiet = radiometric.NoiseModel(np.zeros(3), np.zeros(3), m=1.0)
    rng = np.random.default_rng(13)
    img = synth.simulate_ldr(lum, 12.0, curve, quiet, rng)
    rec = curve.radiance(img)
    want = lum * 12.0
    ok = (img > 0) & (img < 255)
    for c in range(3):
        sel = ok[..., c]
        lev = img[..., c][sel].astype(int)
        q = curve.f_inv[c][np.minimum(lev + 1, 255)] - curve.f_inv[c][lev]
        assert np.all(np.abs(rec[..., c][sel] - want[..., c][sel]) <= q + 1e-6)

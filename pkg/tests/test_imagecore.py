import numpy as np
import pytest

from radslam import imagecore
from radslam.imagecore import (CameraModel, RadianceFrame, build_pyramid,
                               downsample_average, downsample_depth,
                               integral_stats, normalize_radiance)


def make_camera():
    return CameraModel(fx=260.0, fy=260.0, cx=159.5, cy=119.5,
                       width=320, height=240)


def make_frame(radiance, saturated=None, exposure_ms=12.0):
    h, w = radiance.shape[:2]
    if saturated is None:
        saturated = np.zeros((h, w), dtype=bool)
    return RadianceFrame(
        radiance=radiance.astype(np.float32),
        confidence=np.ones((h, w), dtype=np.float32),
        saturated=saturated,
        exposure_ms=exposure_ms,
        pcf_max=np.ones((h, w), dtype=np.float32),
    )


def test_project_unproject_roundtrip():
    cam = make_camera()
    rng = np.random.default_rng(0)
    u = rng.uniform(0, cam.width - 1, size=50)
    v = rng.uniform(0, cam.height - 1, size=50)
    d = rng.uniform(0.5, 3.0, size=50)
    pts = cam.unproject(u, v, d)
    uv = cam.project(pts)
    assert np.allclose(uv[:, 0], u, atol=1e-9)
    assert np.allclose(uv[:, 1], v, atol=1e-9)


def test_scaled_camera_maps_pixel_centers():
    cam = make_camera()
    half = cam.scaled(1)
    assert half.width == 160 and half.height == 120
    # the center of full-res pixel block (0,1)x(0,1) is half-res pixel (0.5,0.5) center
    pt = cam.unproject(np.array([0.5]), np.array([0.5]), np.array([2.0]))
    uv = half.project(pt)
    assert np.allclose(uv, [[0.0, 0.0]], atol=1e-9)


def test_integral_stats_matches_bruteforce():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 5, size=(18, 23)).astype(np.float32)
    r = 3
    mu, sigma = integral_stats(img, r)
    h, w = img.shape
    for y, x in [(0, 0), (5, 7), (17, 22), (9, 0)]:
        y0, y1 = max(0, y - r), min(h, y + r + 1)
        x0, x1 = max(0, x - r), min(w, x + r + 1)
        patch = img[y0:y1, x0:x1]
        assert np.isclose(mu[y, x], patch.mean(), atol=1e-5)
        assert np.isclose(sigma[y, x], patch.std(), atol=1e-4)


def test_normalize_radiance_matches_bruteforce_interior():
    rng = np.random.default_rng(2)
    rad = rng.uniform(0.5, 4.0, size=(40, 50, 3))
    frame = make_frame(rad)
    out = normalize_radiance(frame, radius=4)
    y, x, c = 20, 25, 1
    patch = rad[16:25, 21:30, c]
    want = (rad[y, x, c] - patch.mean()) / patch.std()
    assert np.isclose(out.nr[y, x, c], want, atol=1e-4)
    assert out.valid[y, x]


def test_normalize_radiance_exposure_invariant():
    rng = np.random.default_rng(3)
    rad = rng.uniform(0.5, 4.0, size=(30, 30, 3))
    a = normalize_radiance(make_frame(rad), radius=4)
    b = normalize_radiance(make_frame(rad * 7.5), radius=4)
    assert np.array_equal(a.valid, b.valid)
    assert np.allclose(a.nr[a.valid], b.nr[b.valid], atol=1e-4)


def test_normalize_radiance_flat_patch_invalid():
    rad = np.full((20, 20, 3), 2.0, dtype=np.float32)
    out = normalize_radiance(make_frame(rad), radius=3)
    assert not out.valid.any()
    assert np.all(out.nr == 0.0)


def test_normalize_radiance_gates_saturated_and_missing_depth():
    rng = np.random.default_rng(4)
    rad = rng.uniform(0.5, 4.0, size=(20, 20, 3))
    sat = np.zeros((20, 20), dtype=bool)
    sat[5, 5] = True
    depth = np.ones((20, 20), dtype=np.float32)
    depth[8, 8] = 0.0
    out = normalize_radiance(make_frame(rad, saturated=sat), radius=3,
                             depth=depth)
    assert not out.valid[5, 5]
    assert not out.valid[8, 8]
    assert out.valid[12, 12]


def test_downsample_average_oracle():
    img = np.arange(16, dtype=np.float32).reshape(4, 4)
    out = downsample_average(img)
    assert out.shape == (2, 2)
    assert np.isclose(out[0, 0], img[:2, :2].mean())
    assert np.isclose(out[1, 1], img[2:, 2:].mean())


def test_downsample_depth_keeps_first_valid():
    depth = np.zeros((2, 2), dtype=np.float32)
    depth[1, 1] = 2.5
    out = downsample_depth(depth)
    assert out.shape == (1, 1)
    assert out[0, 0] == 2.5
    assert downsample_depth(np.zeros((2, 2), dtype=np.float32))[0, 0] == 0.0


def test_build_pyramid_shapes():
    img = np.random.default_rng(5).uniform(size=(240, 320)).astype(np.float32)
    pyr = build_pyramid(img, 3)
    assert [p.shape for p in pyr] == [(240, 320), (120, 160), (60, 80)]


def test_radiance_frame_scaled():
    rad = np.ones((4, 4, 3), dtype=np.float32)
    frame = make_frame(rad)
    scaled = frame.scaled(0.25)
    assert np.allclose(scaled.radiance, 0.25)
    assert scaled.confidence is frame.confidence

import numpy as np
import pytest

from radslam import mapper, synth
from radslam.imagecore import RadianceFrame
from radslam.mapper import (ExposureEstimationError, MapperConfig, TsdfVolume,
                            weighted_running_mean)
from radslam.se3 import Pose


def small_cfg():
    return MapperConfig(dims=(64, 64, 64), extent_m=3.0,
                        origin=(-1.5, -1.5, -0.1))


def plane_volume(n_views=1):
    cfg = small_cfg()
    vol = TsdfVolume.create(cfg)
    camera = synth.default_camera()
    depth = np.full((camera.height, camera.width), 2.0, dtype=np.float32)
    for _ in range(n_views):
        mapper.integrate(vol, camera, Pose.identity(), depth, cfg=cfg)
    return vol, cfg, camera, depth


def test_running_mean_matches_closed_form_below_cap():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = rng.integers(2, 12)
        vals = rng.uniform(-5, 5, size=n)
        wts = rng.uniform(0.05, 1.0, size=n)
        value, weight = 0.0, 0.0
        for x, w in zip(vals, wts):
            value, weight = weighted_running_mean(value, weight, x, w, 128.0)
        assert np.isclose(value, np.average(vals, weights=wts), atol=1e-5)
        assert np.isclose(weight, wts.sum())


def test_running_mean_order_invariant_below_cap():
    rng = np.random.default_rng(1)
    vals = rng.uniform(size=8)
    wts = rng.uniform(0.1, 1.0, size=8)
    perm = rng.permutation(8)
    a, wa = 0.0, 0.0
    b, wb = 0.0, 0.0
    for i in range(8):
        a, wa = weighted_running_mean(a, wa, vals[i], wts[i], 128.0)
        b, wb = weighted_running_mean(b, wb, vals[perm[i]], wts[perm[i]], 128.0)
    assert np.isclose(a, b, atol=1e-9)


def test_running_mean_examples():
    v, w = weighted_running_mean(0.0, 0.0, 0.5, 1.0, 4.0)
    assert v == 0.5 and w == 1.0
    v, w = weighted_running_mean(v, w, -0.5, 3.0, 4.0)
    assert np.isclose(v, -0.25) and w == 4.0
    v, w = weighted_running_mean(v, w, 1.0, 2.0, 4.0)
    assert w == 4.0
    v2, w2 = weighted_running_mean(0.7, 2.0, 123.0, 0.0, 4.0)
    assert v2 == 0.7 and w2 == 2.0


def test_integrate_first_observation_stored_exactly():
    vol, cfg, camera, _ = plane_volume()
    i = ((np.array([0.0, 0.0, 2.0]) - vol.origin) / vol.voxel_size - 0.5)
    i = np.rint(i).astype(int)
    center_z = vol.origin[2] + (i[2] + 0.5) * vol.voxel_size
    want = min((2.0 - center_z) / vol.truncation, 1.0)
    assert np.isclose(vol.f[tuple(i)], want, atol=1e-5)
    assert 0.9 < vol.w_f[tuple(i)] <= 1.0


def test_integrate_sign_structure():
    vol, cfg, camera, _ = plane_volume()
    def vox(z):
        i = ((np.array([0.0, 0.0, z]) - vol.origin) / vol.voxel_size - 0.5)
        return tuple(np.rint(i).astype(int))
    front = vox(2.0 - 2 * vol.truncation)
    assert vol.f[front] == 1.0 and vol.w_f[front] > 0
    behind = vox(2.0 + 2 * vol.truncation)
    assert vol.w_f[behind] == 0 and vol.f[behind] == 1.0
    inside = vox(2.0 + 0.5 * vol.truncation)
    assert vol.w_f[inside] > 0 and vol.f[inside] < 0


def test_integrate_radiance_band_only():
    cfg = small_cfg()
    vol = TsdfVolume.create(cfg)
    camera = synth.default_camera()
    h, w = camera.height, camera.width
    depth = np.full((h, w), 2.0, dtype=np.float32)
    rf = RadianceFrame(
        radiance=np.broadcast_to(np.float32([0.2, 0.5, 0.8]), (h, w, 3)).copy(),
        confidence=np.full((h, w), 0.7, dtype=np.float32),
        saturated=np.zeros((h, w), dtype=bool),
        exposure_ms=12.0,
        pcf_max=np.ones((h, w), dtype=np.float32))
    mapper.integrate(vol, camera, Pose.identity(), depth, radiance_frame=rf,
                     cfg=cfg)
    i = ((np.array([0.0, 0.0, 2.0]) - vol.origin) / vol.voxel_size - 0.5)
    i = tuple(np.rint(i).astype(int))
    assert np.allclose(vol.radiance[i], [0.2, 0.5, 0.8], atol=1e-6)
    assert np.isclose(vol.w_r[i], 0.7, atol=1e-3)
    assert vol.obs_count[i] == 1
    far = (i[0], i[1], i[2] - 8)
    assert vol.w_r[far] == 0.0
    assert vol.w_f[far] > 0


def test_integrate_saturation_blocks_radiance():
    cfg = small_cfg()
    vol = TsdfVolume.create(cfg)
    camera = synth.default_camera()
    h, w = camera.height, camera.width
    depth = np.full((h, w), 2.0, dtype=np.float32)
    rf = RadianceFrame(
        radiance=np.ones((h, w, 3), dtype=np.float32),
        confidence=np.ones((h, w), dtype=np.float32),
        saturated=np.ones((h, w), dtype=bool),
        exposure_ms=12.0,
        pcf_max=np.ones((h, w), dtype=np.float32))
    mapper.integrate(vol, camera, Pose.identity(), depth, radiance_frame=rf,
                     cfg=cfg)
    assert vol.w_r.max() == 0.0
    assert vol.w_f.max() > 0.0


def test_depth_normals_plane():
    camera = synth.default_camera()
    depth = np.full((camera.height, camera.width), 2.0, dtype=np.float32)
    depth[50, 50] = 0.0
    n = mapper.depth_normals(depth, camera)
    interior = n[100:140, 140:180]
    assert np.abs(interior - np.array([0.0, 0.0, -1.0])).max() < 1e-6
    assert np.all(n[0] == 0) and np.all(n[:, -1] == 0)
    assert np.all(n[50, 49:52] == 0) and np.all(n[49, 50] == 0)


def test_raycast_plane_depth_and_normals():
    vol, cfg, camera, depth = plane_volume(n_views=3)
    pred = mapper.raycast(vol, camera, Pose.identity(), cfg=cfg)
    hit = pred.depth > 0
    assert hit.mean() > 0.95
    err = np.abs(pred.depth[hit] - 2.0)
    assert (err < vol.voxel_size).mean() > 0.95
    center = pred.normals[110:130, 150:170].reshape(-1, 3)
    ang = np.degrees(np.arccos(np.clip(-center[:, 2], -1, 1)))
    assert ang.max() < 2.0


def test_raycast_empty_volume_all_invalid():
    cfg = small_cfg()
    vol = TsdfVolume.create(cfg)
    pred = mapper.raycast(vol, synth.default_camera(), Pose.identity(), cfg=cfg)
    assert not np.any(pred.depth > 0)
    assert not np.any(pred.rad_valid)


def test_exposure_scale_identity_and_half():
    rng = np.random.default_rng(2)
    ref = rng.uniform(0.1, 1.0, size=(60, 80)).astype(np.float32)
    conf = np.ones_like(ref)
    valid = np.ones(ref.shape, dtype=bool)
    s = mapper.estimate_exposure_scale(ref, ref, conf, valid)
    assert np.isclose(s, 1.0, atol=1e-6)
    s = mapper.estimate_exposure_scale(ref, 0.5 * ref, conf, valid)
    assert np.isclose(s, 2.0, atol=1e-6)


def test_exposure_scale_noisy_ratio():
    rng = np.random.default_rng(3)
    ref = rng.uniform(0.2, 1.0, size=(120, 160))
    live = 0.5 * ref * (1.0 + rng.normal(scale=0.02, size=ref.shape))
    conf = rng.uniform(0.3, 1.0, size=ref.shape)
    s = mapper.estimate_exposure_scale(ref, live, conf,
                                       np.ones(ref.shape, dtype=bool))
    assert abs(s - 2.0) / 2.0 < 0.05


def test_exposure_scale_needs_pixels():
    ref = np.ones((20, 20))
    valid = np.zeros((20, 20), dtype=bool)
    valid[0, :5] = True
    with pytest.raises(ExposureEstimationError):
        mapper.estimate_exposure_scale(ref, ref, np.ones_like(ref), valid)


def test_volume_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    cfg = MapperConfig(dims=(12, 10, 8), extent_m=1.2, origin=(-0.6, -0.5, 0.0))
    vol = TsdfVolume.create(cfg)
    vol.f[:] = rng.uniform(-1, 1, size=vol.dims).astype(np.float32)
    vol.w_f[:] = rng.uniform(0, 10, size=vol.dims).astype(np.float32)
    vol.radiance[:] = rng.uniform(0, 2, size=vol.dims + (3,)).astype(np.float32)
    vol.nrad[:] = rng.uniform(0, 3, size=vol.dims + (3,)).astype(np.float32)
    vol.w_r[:] = rng.uniform(0, 5, size=vol.dims).astype(np.float32)
    path = tmp_path / "v.bin"
    mapper.save_volume(path, vol)
    back = mapper.load_volume(path)
    assert back.dims == vol.dims
    assert np.isclose(back.voxel_size, vol.voxel_size)
    assert np.allclose(back.origin, vol.origin)
    assert np.isclose(back.truncation, vol.truncation)
    for name in ("f", "w_f", "radiance", "nrad", "w_r"):
        assert np.array_equal(getattr(back, name), getattr(vol, name)), name


def test_export_pointcloud_plane(tmp_path):
    vol, cfg, camera, _ = plane_volume(n_views=2)
    pred = mapper.raycast(vol, camera, Pose.identity(), cfg=cfg)
    path = tmp_path / "c.ply"
    n = mapper.export_pointcloud(path, pred, camera, Pose.identity())
    assert n == int(np.count_nonzero(pred.depth > 0))
    from radslam import fileio
    data = fileio.read_ply(path)
    assert data.shape == (n, 9)
    err = np.abs(data[:, 2] - 2.0)
    assert np.quantile(err, 0.95) < vol.voxel_size

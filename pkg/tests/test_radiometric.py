import numpy as np
import pytest

from radslam import radiometric, synth
from radslam.imagecore import RgbdFrame
from radslam.radiometric import (CalibrationError, ConfidenceTable,
                                 NoiseModel, ResponseCurve, build_pcf,
                                 estimate_crf, estimate_noise, to_radiance)


def test_gamma_curve_forward_inverse_consistent():
    curve = ResponseCurve.gamma(2.2, r_max=1000.0)
    levels = np.arange(1, 255)
    back = curve.forward(curve.f_inv[0][levels], 0)
    assert np.abs(back - levels).max() <= 1.0


def test_quantize_linear_midpoint():
    curve = ResponseCurve.linear(r_max=255.0)
    img = curve.quantize(np.array([[[100.2, 0.0, 300.0]]]))
    assert img.dtype == np.uint8
    assert img[0, 0, 0] == 100
    assert img[0, 0, 1] == 0
    assert img[0, 0, 2] == 255


def test_normalized_anchors_mid_level():
    curve = ResponseCurve.gamma(2.2, r_max=4000.0).normalized()
    assert np.allclose(curve.f_inv[:, 128], 1.0)


def test_response_requires_monotone():
    f = np.tile(np.linspace(1.0, 100.0, 256), (3, 1))
    f[1, 40] = f[1, 39]
    with pytest.raises(ValueError):
        ResponseCurve(f, np.ones_like(f))


def test_estimate_crf_linear_stack():
    curve = ResponseCurve.linear(r_max=255.0)
    rng = np.random.default_rng(0)
    base = rng.uniform(0.02, 1.0, size=(60, 80, 3)) * 255.0
    exposures = [0.125 * 2 ** k for k in range(7)]
    images = [curve.quantize(base * (e / exposures[3])) for e in exposures]
    est = estimate_crf(images, exposures, seed=1).normalized()
    want = curve.normalized()
    lv = np.arange(10, 246)
    rel = np.abs(est.f_inv[:, lv] / want.f_inv[:, lv] - 1.0)
    assert rel.max() < 0.02


def test_estimate_crf_gamma_stack():
    images, exposures = synth.response_stack(seed=11, noise=False)
    est = estimate_crf(images, exposures).normalized()
    want = synth.true_response().normalized()
    lv = np.arange(10, 246)
    rel = np.abs(est.f_inv[:, lv] / want.f_inv[:, lv] - 1.0)
    assert rel.max() < 0.05


def test_estimate_crf_rejects_short_stack():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(CalibrationError):
        estimate_crf([img, img], [1.0, 2.0])
    with pytest.raises(CalibrationError):
        estimate_crf([img, img, img], [1.0, 2.0])


def test_estimate_noise_identifiable_regime():
    curve = ResponseCurve.linear(r_max=255.0)
    sigma_s, sigma_c = 0.6, 1.2
    rng = np.random.default_rng(2)
    base = rng.uniform(5.0, 200.0, size=(60, 80, 3))
    images = []
    for _ in range(60):
        noisy = base + rng.normal(size=base.shape) * np.sqrt(
            base * sigma_s ** 2 + sigma_c ** 2)
        images.append(curve.quantize(noisy))
    model = estimate_noise(images, curve)
    assert np.abs(model.sigma_s / sigma_s - 1.0).max() < 0.15
    assert np.abs(model.sigma_c / sigma_c - 1.0).max() < 0.15


def test_estimate_noise_needs_frames():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(CalibrationError):
        estimate_noise([img] * 5, ResponseCurve.linear())


def test_noise_model_intensity_std_oracle():
    curve = ResponseCurve.gamma(2.2, r_max=1000.0)
    model = NoiseModel(np.full(3, 0.5), np.full(3, 1.0), m=2.0)
    std = model.intensity_noise_std(curve)
    lv = 100
    want = curve.df[1, lv] * np.sqrt(curve.f_inv[1, lv] * 0.25 + 1.0)
    assert np.isclose(std[1, lv], want)


def test_build_pcf_oracle_and_clamp():
    curve = ResponseCurve.gamma(2.2, r_max=1000.0)
    model = NoiseModel(np.full(3, 0.5), np.full(3, 1.0), m=1.0)
    m = float(model.intensity_noise_std(curve).max())
    pcf = build_pcf(curve, NoiseModel(np.full(3, 0.5), np.full(3, 1.0), m=m))
    std = model.intensity_noise_std(curve)
    assert np.allclose(pcf.p, np.clip(std / m, 1e-3, 1.0))
    assert pcf.p.max() <= 1.0
    assert pcf.p.min() >= 1e-3


def test_confidence_variants():
    p = np.array([0.25, 0.81, 1.0])
    assert np.allclose(ConfidenceTable.variant(p, "p0"), 1.0)
    assert np.allclose(ConfidenceTable.variant(p, "p1"), np.sqrt(p))
    assert np.allclose(ConfidenceTable.variant(p, "p2"), p)
    assert np.allclose(ConfidenceTable.variant(p, "p3"), p ** 2)
    with pytest.raises(ValueError):
        ConfidenceTable.variant(p, "p4")


def test_to_radiance_elementwise_oracle():
    curve = ResponseCurve.gamma(2.2, r_max=500.0)
    pcf = ConfidenceTable(np.tile(np.linspace(0.2, 0.9, 256), (3, 1)))
    rng = np.random.default_rng(3)
    rgb = rng.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    rgb[0, 0] = (0, 120, 130)
    rgb[1, 1] = (255, 9, 77)
    frame = RgbdFrame(rgb=rgb, depth=np.ones((6, 7), dtype=np.float32),
                      exposure_ms=24.0, index=0)
    rf = to_radiance(frame, curve, pcf)
    y, x = 3, 4
    for c in range(3):
        assert np.isclose(rf.radiance[y, x, c], curve.f_inv[c][rgb[y, x, c]])
    per = pcf.p[np.arange(3), rgb[y, x]]
    assert np.isclose(rf.confidence[y, x], per.mean())
    assert np.isclose(rf.pcf_max[y, x], per.max())
    assert rf.saturated[0, 0] and rf.saturated[1, 1]
    assert not rf.saturated[y, x]
    assert rf.exposure_ms == 24.0


def test_calibration_roundtrip(tmp_path):
    curve = synth.true_response().normalized()
    noise = NoiseModel(np.full(3, 0.03), np.full(3, 0.002), m=2.5)
    pcf = build_pcf(curve, noise)
    path = tmp_path / "calib.json"
    radiometric.save_calibration(path, curve, noise, pcf)
    c2, n2, p2 = radiometric.load_calibration(path)
    assert np.allclose(c2.f_inv, curve.f_inv)
    assert np.allclose(c2.df, curve.df)
    assert np.allclose(n2.sigma_s, noise.sigma_s)
    assert np.isclose(n2.m, noise.m)
    assert np.allclose(p2.p, pcf.p)

"""Radiometric calibration: response curve, noise model, photometric confidence.

The response curve maps scene radiance (scaled by exposure time) to an 8-bit
intensity level. It is recovered from a static multi-exposure stack by a
log-domain least-squares solve, then projected to be monotone. The noise
model fits a signal-dependent plus constant variance in radiance units, and
the confidence table converts that into a per-level weight in (0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import isotonic_regression, nnls

from .imagecore import RadianceFrame, RgbdFrame

EPS_P = 1e-3
EPS_M = 1e-6
LEVELS = 256
ANCHOR_LEVEL = 128


class CalibrationError(RuntimeError):
    pass


def _hat_weights() -> np.ndarray:
    levels = np.arange(LEVELS, dtype=np.float64)
    return np.minimum(levels, 255.0 - levels)


@dataclass
class ResponseCurve:
    """Per-channel inverse response f_inv and its intensity derivative df.

    f_inv[c, I] is the radiance producing level I in channel c; it is
    strictly increasing in I. df[c, I] = dI/dR evaluated at f_inv[c, I],
    with df = 0 at the clipped end levels 0 and 255.
    """

    f_inv: np.ndarray  # (3, 256) float64
    df: np.ndarray     # (3, 256) float64

    def __post_init__(self):
        self.f_inv = np.asarray(self.f_inv, dtype=np.float64)
        self.df = np.asarray(self.df, dtype=np.float64)
        if self.f_inv.shape != (3, LEVELS) or self.df.shape != (3, LEVELS):
            raise ValueError("response tables must be 3x256")
        if np.any(np.diff(self.f_inv, axis=1) <= 0):
            raise ValueError("f_inv must be strictly increasing per channel")

    @staticmethod
    def linear(r_max: float = 255.0) -> "ResponseCurve":
        levels = np.arange(LEVELS, dtype=np.float64)
        f_inv = np.tile(r_max * levels / 255.0, (3, 1))
        df = np.full((3, LEVELS), 255.0 / r_max)
        df[:, 0] = 0.0
        df[:, -1] = 0.0
        return ResponseCurve(f_inv, df)

    @staticmethod
    def gamma(exponent: float = 2.2, r_max: float = 255.0) -> "ResponseCurve":
        """Radiance R maps to level 255 * (R / r_max)^(1/exponent)."""
        levels = np.arange(LEVELS, dtype=np.float64)
        frac = np.maximum(levels / 255.0, 1e-12)
        f_inv = np.tile(r_max * frac ** exponent, (3, 1))
        f_inv[:, 0] = 0.0
        # dI/dR = 255 / (r_max * exponent) * (R / r_max)^(1/exponent - 1)
        df = 255.0 / (r_max * exponent) * frac ** (1.0 - exponent)
        df = np.tile(df, (3, 1))
        df[:, 0] = 0.0
        df[:, -1] = 0.0
        return ResponseCurve(f_inv, df)

    def normalized(self) -> "ResponseCurve":
        """Rescale radiance units so f_inv(anchor level) = 1 per channel."""
        scale = 1.0 / self.f_inv[:, ANCHOR_LEVEL]
        return ResponseCurve(self.f_inv * scale[:, None], self.df / scale[:, None])

    def radiance(self, image: np.ndarray) -> np.ndarray:
        """Look up f_inv for a uint8 HxWx3 image."""
        out = np.empty(image.shape, dtype=np.float32)
        for c in range(3):
            out[..., c] = self.f_inv[c][image[..., c]]
        return out

    def forward(self, radiance: np.ndarray, channel: int) -> np.ndarray:
        """Continuous intensity for given radiance; clamps outside the range."""
        return np.interp(radiance, self.f_inv[channel], np.arange(LEVELS, dtype=np.float64))

    def quantize(self, radiance: np.ndarray) -> np.ndarray:
        """Radiance HxWx3 to the uint8 image the sensor would report."""
        out = np.empty(radiance.shape[:2] + (3,), dtype=np.uint8)
        for c in range(3):
            out[..., c] = np.clip(np.round(self.forward(radiance[..., c], c)), 0, 255)
        return out


@dataclass
class NoiseModel:
    """Radiance-domain noise: Var(R) = R * sigma_s^2 + sigma_c^2 per channel.

    `m` is the largest intensity-domain noise std over all channels and
    levels for the curve the model was fitted against; it normalizes the
    confidence table.
    """

    sigma_s: np.ndarray  # (3,)
    sigma_c: np.ndarray  # (3,)
    m: float

    def __post_init__(self):
        self.sigma_s = np.asarray(self.sigma_s, dtype=np.float64).reshape(3)
        self.sigma_c = np.asarray(self.sigma_c, dtype=np.float64).reshape(3)
        if np.any(self.sigma_s < 0) or np.any(self.sigma_c < 0):
            raise ValueError("noise parameters must be non-negative")
        if self.m <= 0:
            raise ValueError("m must be positive")

    def intensity_noise_std(self, curve: ResponseCurve) -> np.ndarray:
        """(3, 256) noise std in intensity units: df * sqrt(R s^2 + c^2)."""
        var_rad = (curve.f_inv * self.sigma_s[:, None] ** 2
                   + self.sigma_c[:, None] ** 2)
        return curve.df * np.sqrt(np.clip(var_rad, 0.0, None))

    def rescaled(self, scale: np.ndarray) -> "NoiseModel":
        """Parameters after radiance units are multiplied by `scale` per channel."""
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
        return NoiseModel(self.sigma_s * np.sqrt(scale), self.sigma_c * scale, self.m)


@dataclass
class ConfidenceTable:
    """Per-level photometric confidence p in (0, 1], 3x256."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.shape != (3, LEVELS):
            raise ValueError("confidence table must be 3x256")
        if np.any(self.p <= 0) or np.any(self.p > 1):
            raise ValueError("confidence must lie in (0, 1]")

    def per_channel(self, image: np.ndarray) -> np.ndarray:
        out = np.empty(image.shape, dtype=np.float32)
        for c in range(3):
            out[..., c] = self.p[c][image[..., c]]
        return out

    @staticmethod
    def variant(values: np.ndarray, name: str) -> np.ndarray:
        """Weighting variants: p0 ignores confidence, p3 trusts it most."""
        if name == "p0":
            return np.ones_like(values)
        if name == "p1":
            return np.sqrt(values)
        if name == "p2":
            return values
        if name == "p3":
            return values * values
        raise ValueError(f"unknown confidence variant {name!r}")


def estimate_crf(images: list[np.ndarray], exposures_ms: list[float],
                 smoothness: float = 20.0, sample_sites: int = 300,
                 seed: int = 0) -> ResponseCurve:
    """Recover the inverse response from a static multi-exposure stack.

    Solves for log f_inv on a grid of sample sites with hat-weighted
    observations, a smoothness prior on second differences, and
    log f_inv(128) = 0, then projects the result to be strictly increasing.
    """
    if len(images) < 3:
        raise CalibrationError("need at least 3 exposures to recover the response")
    if len(images) != len(exposures_ms):
        raise CalibrationError("images and exposures must align")
    shape = images[0].shape
    for im in images:
        if im.shape != shape or im.dtype != np.uint8:
            raise CalibrationError("stack images must share shape and be uint8")
    exposures = np.asarray(exposures_ms, dtype=np.float64)
    if np.any(exposures <= 0):
        raise CalibrationError("exposures must be positive")
    log_t = np.log(exposures)

    h, w = shape[:2]
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h, size=sample_sites)
    xs = rng.integers(0, w, size=sample_sites)
    stack = np.stack(images)               # (J, H, W, 3)
    samples = stack[:, ys, xs, :]          # (J, S, 3)

    weights = _hat_weights()
    f_inv = np.empty((3, LEVELS))
    for c in range(3):
        z = samples[..., c]                # (J, S)
        wz = weights[z]
        usable = wz.sum(axis=0) > 0
        if not np.any(usable):
            raise CalibrationError("every sample site is clipped")
        z = z[:, usable]
        wz = wz[:, usable]
        n_sites = z.shape[1]
        n_obs = int(np.count_nonzero(wz))

        n_rows = n_obs + 1 + (LEVELS - 2)
        n_cols = LEVELS + n_sites
        A = np.zeros((n_rows, n_cols))
        b = np.zeros(n_rows)
        j_idx, s_idx = np.nonzero(wz)
        rows = np.arange(n_obs)
        wv = wz[j_idx, s_idx]
        A[rows, z[j_idx, s_idx]] = wv
        A[rows, LEVELS + s_idx] = -wv
        b[rows] = wv * log_t[j_idx]

        A[n_obs, ANCHOR_LEVEL] = 1.0

        lam = smoothness * weights[1:-1]
        sm = np.arange(n_obs + 1, n_rows)
        A[sm, np.arange(0, LEVELS - 2)] = lam
        A[sm, np.arange(1, LEVELS - 1)] = -2.0 * lam
        A[sm, np.arange(2, LEVELS)] = lam

        sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        if rank < n_cols:
            raise CalibrationError("response solve is rank deficient; "
                                   "stack lacks level coverage")
        g = sol[:LEVELS]
        g = isotonic_regression(g).x
        for i in range(1, LEVELS):
            if g[i] <= g[i - 1]:
                g[i] = g[i - 1] + 1e-6
        g = g - g[ANCHOR_LEVEL]
        f_inv[c] = np.exp(g)

    # isotonic plateaus would explode 1/gradient; differentiate a smoothed
    # log curve instead and keep a slope floor as a backstop
    log_f = np.log(f_inv)
    pad = np.pad(log_f, ((0, 0), (3, 3)), mode="reflect", reflect_type="odd")
    kernel = np.ones(7) / 7.0
    smooth = np.stack([np.convolve(p, kernel, mode="valid") for p in pad])
    grad = np.gradient(np.exp(smooth), axis=1)
    floor = 0.02 * (f_inv[:, -1] - f_inv[:, 0]) / (LEVELS - 1)
    df = 1.0 / np.maximum(grad, floor[:, None])
    df[:, 0] = 0.0
    df[:, -1] = 0.0
    return ResponseCurve(f_inv, df)


def estimate_noise(images: list[np.ndarray], curve: ResponseCurve,
                   min_levels: int = 16, min_pixels_per_level: int = 20) -> NoiseModel:
    """Fit the radiance-domain noise law from a static same-exposure stack.

    Pools the temporal per-pixel variance by rounded mean level, maps it to
    radiance units through df, and solves Var = R s^2 + c^2 by non-negative
    least squares per channel.
    """
    if len(images) < 10:
        raise CalibrationError("need at least 10 frames to estimate noise")
    stack = np.stack(images).astype(np.float64)   # (N, H, W, 3)
    mean_i = stack.mean(axis=0)
    var_i = stack.var(axis=0, ddof=1)

    sigma_s = np.zeros(3)
    sigma_c = np.zeros(3)
    for c in range(3):
        level = np.rint(mean_i[..., c]).astype(np.int64).ravel()
        var = var_i[..., c].ravel()
        keep = (level >= 2) & (level <= 253)
        level = level[keep]
        var = var[keep]
        counts = np.bincount(level, minlength=LEVELS)
        var_sum = np.bincount(level, weights=var, minlength=LEVELS)
        present = counts >= min_pixels_per_level
        lv = np.nonzero(present)[0]
        if len(lv) < min_levels:
            raise CalibrationError(
                f"channel {c}: only {len(lv)} usable levels, need {min_levels}")
        pooled = var_sum[lv] / counts[lv]
        dfl = curve.df[c][lv]
        ok = dfl > 0
        var_rad = pooled[ok] / dfl[ok] ** 2
        radiances = curve.f_inv[c][lv][ok]
        design = np.stack([radiances, np.ones_like(radiances)], axis=1)
        coeffs, _ = nnls(design, var_rad)
        sigma_s[c] = np.sqrt(coeffs[0])
        sigma_c[c] = np.sqrt(coeffs[1])

    model = NoiseModel(sigma_s, sigma_c, m=1.0)
    # normalize over levels the curve fit can be trusted on; df artifacts at
    # the extremes would deflate every other confidence entry
    m = float(model.intensity_noise_std(curve)[:, 16:241].max())
    return NoiseModel(sigma_s, sigma_c, m=max(m, EPS_M))


def build_pcf(curve: ResponseCurve, noise: NoiseModel) -> ConfidenceTable:
    """Confidence p(I) = intensity noise std over its maximum, clamped to (0, 1]."""
    p = noise.intensity_noise_std(curve) / noise.m
    return ConfidenceTable(np.clip(p, EPS_P, 1.0))


def to_radiance(frame: RgbdFrame, curve: ResponseCurve,
                pcf: ConfidenceTable) -> RadianceFrame:
    """Convert an LDR frame to radiance with per-pixel confidence.

    Saturated means any channel at level 0 or 255; those pixels keep their
    table radiance but are flagged so later stages can exclude them.
    """
    radiance = curve.radiance(frame.rgb)
    per_ch = pcf.per_channel(frame.rgb)
    saturated = np.any((frame.rgb == 0) | (frame.rgb == 255), axis=2)
    return RadianceFrame(
        radiance=radiance,
        confidence=per_ch.mean(axis=2).astype(np.float32),
        saturated=saturated,
        exposure_ms=frame.exposure_ms,
        pcf_max=per_ch.max(axis=2).astype(np.float32),
    )


def save_calibration(path, curve: ResponseCurve, noise: NoiseModel,
                     pcf: ConfidenceTable) -> None:
    payload = {
        "f_inv": curve.f_inv.tolist(),
        "df": curve.df.tolist(),
        "pcf": pcf.p.tolist(),
        "sigma_s": noise.sigma_s.tolist(),
        "sigma_c": noise.sigma_c.tolist(),
        "m": noise.m,
    }
    Path(path).write_text(json.dumps(payload))


def load_calibration(path):
    data = json.loads(Path(path).read_text())
    curve = ResponseCurve(np.array(data["f_inv"]), np.array(data["df"]))
    noise = NoiseModel(np.array(data["sigma_s"]), np.array(data["sigma_c"]),
                       float(data["m"]))
    pcf = ConfidenceTable(np.array(data["pcf"]))
    return curve, noise, pcf

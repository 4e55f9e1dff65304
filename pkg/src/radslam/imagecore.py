"""Frame containers, image pyramids and patchwise radiance normalization.

The normalized radiance map subtracts a local mean and divides by a local
standard deviation computed over a square patch, which cancels any global
exposure scale applied to the underlying radiance image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio

SIGMA_FLOOR = 1e-4
DEFAULT_PATCH_RADIUS = 8


@dataclass
class CameraModel:
    """Pinhole intrinsics, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def scaled(self, level: int) -> "CameraModel":
        """Intrinsics for pyramid level `level` (level 0 is full resolution).

        Uses the pixel-center convention: cx' = (cx + 0.5) / 2 - 0.5.
        """
        s = 2 ** level
        return CameraModel(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // s,
            height=self.height // s,
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points to (N, 2) pixel coordinates."""
        points = np.asarray(points)
        z = points[..., 2]
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def unproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        return np.stack([x, y, depth], axis=-1)


@dataclass
class RgbdFrame:
    rgb: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray        # (H, W) float32 meters, 0 where invalid
    exposure_ms: float
    index: int = 0

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.rgb.dtype != np.uint8:
            raise ValueError("rgb must be uint8 HxWx3")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError("depth shape must match rgb")
        if self.exposure_ms <= 0:
            raise ValueError("exposure must be positive")


@dataclass
class RadianceFrame:
    """LDR frame mapped through the inverse response into radiance units.

    `confidence` is the mean per-channel photometric confidence, `pcf_max`
    the max over channels; both come from the confidence table of the
    calibration used for the conversion.
    """

    radiance: np.ndarray     # (H, W, 3) float32
    confidence: np.ndarray   # (H, W) float32
    saturated: np.ndarray    # (H, W) bool, any channel clipped
    exposure_ms: float
    pcf_max: np.ndarray      # (H, W) float32

    def scaled(self, s: float) -> "RadianceFrame":
        return RadianceFrame(
            radiance=self.radiance * np.float32(s),
            confidence=self.confidence,
            saturated=self.saturated,
            exposure_ms=self.exposure_ms,
            pcf_max=self.pcf_max,
        )


@dataclass
class NormalizedRadianceFrame:
    nr: np.ndarray           # (H, W, 3) float32, zero where invalid
    mu: np.ndarray           # (H, W, 3) float32
    sigma: np.ndarray        # (H, W, 3) float32
    valid: np.ndarray        # (H, W) bool
    patch_radius: int

    def mean_channel(self) -> np.ndarray:
        return self.nr.mean(axis=2)


def integral_stats(image: np.ndarray, radius: int):
    """Local mean and standard deviation over (2r+1)^2 patches, borders clipped.

    Uses summed-area tables of the values and their squares; one pass over
    the image regardless of the radius.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[:2]
    sat = np.zeros((h + 1, w + 1) + x.shape[2:], dtype=np.float64)
    sat2 = np.zeros_like(sat)
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=sat[1:, 1:])
    np.cumsum(np.cumsum(x * x, axis=0), axis=1, out=sat2[1:, 1:])

    ys = np.arange(h)
    xs = np.arange(w)
    y0 = np.clip(ys - radius, 0, h)
    y1 = np.clip(ys + radius + 1, 0, h)
    x0 = np.clip(xs - radius, 0, w)
    x1 = np.clip(xs + radius + 1, 0, w)

    def window_sum(table):
        a = table[y1[:, None], x1[None, :]]
        b = table[y0[:, None], x1[None, :]]
        c = table[y1[:, None], x0[None, :]]
        d = table[y0[:, None], x0[None, :]]
        return a - b - c + d

    count = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)
    if x.ndim == 3:
        count = count[..., None]
    mu = window_sum(sat) / count
    var = window_sum(sat2) / count - mu * mu
    sigma = np.sqrt(np.clip(var, 0.0, None))
    return mu, sigma


def normalize_radiance(frame: RadianceFrame, radius: int = DEFAULT_PATCH_RADIUS,
                       depth: np.ndarray | None = None) -> NormalizedRadianceFrame:
    """Standardize radiance against its local patch statistics.

    A pixel is valid when every channel has patch sigma >= SIGMA_FLOOR, the
    pixel is not saturated, and (when depth is given) it has a depth sample.
    """
    mu, sigma = integral_stats(frame.radiance, radius)
    mu = mu.astype(np.float32)
    sigma = sigma.astype(np.float32)
    textured = np.all(sigma >= SIGMA_FLOOR, axis=2)
    valid = textured & ~frame.saturated
    if depth is not None:
        valid &= depth > 0
    safe_sigma = np.where(sigma >= SIGMA_FLOOR, sigma, np.float32(1.0))
    nr = (frame.radiance.astype(np.float32) - mu) / safe_sigma
    nr[~valid] = 0.0
    return NormalizedRadianceFrame(nr=nr, mu=mu, sigma=sigma, valid=valid,
                                   patch_radius=radius)


def downsample_average(image: np.ndarray) -> np.ndarray:
    """2x2 box average; trailing odd row/column is dropped."""
    h, w = image.shape[:2]
    x = image[: h - h % 2, : w - w % 2].astype(np.float64)
    out = 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])
    return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)


def downsample_depth(depth: np.ndarray) -> np.ndarray:
    """2x2 subsample keeping the first valid (> 0) sample in scan order.

    Averaging depth across an occlusion boundary invents geometry, so the
    reduction selects instead of blending.
    """
    h, w = depth.shape
    d = depth[: h - h % 2, : w - w % 2]
    candidates = (d[0::2, 0::2], d[0::2, 1::2], d[1::2, 0::2], d[1::2, 1::2])
    out = candidates[0].copy()
    for c in candidates[1:]:
        out = np.where(out > 0, out, c)
    return out


def build_pyramid(image: np.ndarray, levels: int, kind: str = "average") -> list[np.ndarray]:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if 2 ** (levels - 1) > min(image.shape[:2]):
        raise ValueError("too many pyramid levels for image size")
    reduce = downsample_depth if kind == "depth" else downsample_average
    pyr = [np.asarray(image)]
    for _ in range(levels - 1):
        pyr.append(reduce(pyr[-1]))
    return pyr


@dataclass
class Sequence:
    """An on-disk RGB-D sequence with exposure metadata."""

    camera: CameraModel
    frames: list[RgbdFrame] = field(default_factory=list)
    groundtruth: list | None = None
    hdr_dir: Path | None = None

    def __len__(self):
        return len(self.frames)

    def hdr_frame(self, index: int) -> np.ndarray:
        if self.hdr_dir is None:
            raise FileNotFoundError("sequence has no HDR ground truth")
        return fileio.read_pfm(self.hdr_dir / f"{index:06d}.pfm")


def load_sequence(seq_dir) -> Sequence:
    seq_dir = Path(seq_dir)
    cam_info = fileio.read_camera_json(seq_dir / "camera.json")
    camera = CameraModel(**cam_info)
    exposures = fileio.read_exposures(seq_dir / "exposure.csv")
    frames = []
    for i, exp in enumerate(exposures):
        rgb = fileio.read_png_rgb(seq_dir / "rgb" / f"{i:06d}.png")
        depth = fileio.read_png_depth16(seq_dir / "depth" / f"{i:06d}.png")
        frames.append(RgbdFrame(rgb=rgb, depth=depth, exposure_ms=exp, index=i))
    gt_path = seq_dir / "groundtruth.txt"
    groundtruth = None
    if gt_path.exists():
        _, groundtruth = fileio.read_trajectory(gt_path)
    hdr_dir = seq_dir / "hdr"
    return Sequence(camera=camera, frames=frames, groundtruth=groundtruth,
                    hdr_dir=hdr_dir if hdr_dir.exists() else None)

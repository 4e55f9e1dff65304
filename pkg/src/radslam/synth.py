"""Synthetic RGB-D sequence generator with a controlled imaging model.

A closed room with smoothly textured walls, a box obstacle and two high
contrast posters is ray traced in scene radiance, then pushed through a
known response curve and noise law to produce 8-bit frames. Exposure can
be held fixed, cycled through a flicker ladder, or driven by a smooth
auto-exposure rule. Ground-truth poses, HDR maps and depth are emitted
alongside, with a quadratic-in-distance depth noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import fileio
from .imagecore import CameraModel, RgbdFrame, Sequence
from .radiometric import ConfidenceTable, NoiseModel, ResponseCurve, build_pcf

R_MAX = 1.2e6
TRUE_GAMMA = 2.2
TRUE_SIGMA_S = 15.0
TRUE_SIGMA_C = 2.0

FLICKER_LADDER_MS = (3.0, 6.0, 12.0, 24.0, 48.0, 96.0)
AE_TARGET = 4.8e5        # exposure_ms = AE_TARGET / mean center luminance
AE_CLAMP_MS = (1.0, 200.0)
AE_PATCH = 10

DEPTH_NOISE_A = 0.0012   # meters
DEPTH_NOISE_B = 0.0019   # meters per meter^2


def default_camera() -> CameraModel:
    return CameraModel(fx=260.0, fy=260.0, cx=159.5, cy=119.5, width=320, height=240)


def true_response() -> ResponseCurve:
    return ResponseCurve.gamma(TRUE_GAMMA, R_MAX)


def true_noise() -> NoiseModel:
    model = NoiseModel(np.full(3, TRUE_SIGMA_S), np.full(3, TRUE_SIGMA_C), m=1.0)
    m = float(model.intensity_noise_std(true_response()).max())
    return NoiseModel(model.sigma_s, model.sigma_c, m=m)


def true_confidence() -> ConfidenceTable:
    return build_pcf(true_response(), true_noise())


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class _Rect:
    """Axis-aligned rectangle: coordinate `axis` fixed at `value`.

    `u_axis`/`v_axis` span the rectangle; `base` is per-channel radiance,
    modulated by a smooth multi-octave texture with per-surface phases.
    `bumps` are feathered multiplicative patches (posters, a window);
    everything stays C1 so images are band-limited after area sampling.
    """

    axis: int
    value: float
    u_axis: int
    v_axis: int
    u_range: tuple
    v_range: tuple
    base: tuple
    phases: tuple
    bumps: tuple = ()   # (u0, u1, v0, v1, gain, feather_m) each

    def radiance(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        p = self.phases
        field = (0.45 * np.sin(3.1 * u + p[0]) * np.sin(2.7 * v + p[1])
                 + 0.25 * np.sin(9.3 * u + p[2]) * np.sin(8.1 * v + p[3])
                 + 0.12 * np.sin(23.0 * u + p[4]) * np.sin(19.0 * v + p[5]))
        tex = np.exp(field)
        for (u0, u1, v0, v1, gain, feather) in self.bumps:
            mask = (_smoothstep((u - u0) / feather) * _smoothstep((u1 - u) / feather)
                    * _smoothstep((v - v0) / feather) * _smoothstep((v1 - v) / feather))
            tex = tex * (1.0 + (gain - 1.0) * mask)
        return np.stack([b * tex for b in self.base], axis=-1)


def _room_surfaces() -> list[_Rect]:
    # interior: x in [-1.35, 1.35], y in [-1.05, 1.05] (y points down),
    # z in [-0.2, 2.75]; the walls sit a full truncation band inside the
    # default mapping volume. Adjacent faces keep base ratios mild so creases
    # are no harsher than the in-face texture swing; the posters carry the
    # dynamic range
    rng = np.random.default_rng(20240511)
    ph = lambda: tuple(rng.uniform(0, 2 * np.pi, size=6))
    bright = (-0.7, 0.1, 1.9, 2.6, 17.0, 0.12)    # window stand-in, right wall
    dark = (-0.9, -0.2, -0.5, 0.3, 0.13, 0.10)    # dim poster, back wall
    surfaces = [
        _Rect(2, 2.75, 0, 1, (-1.35, 1.35), (-1.05, 1.05), (7700.0, 7000.0, 6100.0), ph(),
              bumps=(dark,)),
        _Rect(1, 1.05, 0, 2, (-1.35, 1.35), (-0.2, 2.75), (4200.0, 4000.0, 3550.0), ph()),
        _Rect(1, -1.05, 0, 2, (-1.35, 1.35), (-0.2, 2.75), (9400.0, 10000.0, 10900.0), ph()),
        _Rect(0, -1.35, 1, 2, (-1.05, 1.05), (-0.2, 2.75), (4300.0, 4000.0, 3500.0), ph()),
        _Rect(0, 1.35, 1, 2, (-1.05, 1.05), (-0.2, 2.75), (12800.0, 14000.0, 15500.0), ph(),
              bumps=(bright,)),
        _Rect(2, -0.2, 0, 1, (-1.35, 1.35), (-1.05, 1.05), (4400.0, 4000.0, 3500.0), ph()),
    ]
    # box obstacle on the floor in the left half of the room
    bx = (-0.70, -0.25)
    by = (0.70, 1.05)
    bz = (1.60, 2.05)
    base = (5500.0, 5000.0, 4300.0)
    surfaces += [
        _Rect(1, by[0], 0, 2, bx, bz, base, ph()),           # top (y points down)
        _Rect(0, bx[0], 1, 2, by, bz, base, ph()),
        _Rect(0, bx[1], 1, 2, by, bz, base, ph()),
        _Rect(2, bz[0], 0, 1, bx, by, base, ph()),
        _Rect(2, bz[1], 0, 1, bx, by, base, ph()),
    ]
    return surfaces


_SURFACES = _room_surfaces()


def _trace(camera: CameraModel, pose, du: float, dv: float):
    """One ray per pixel through offset (du, dv); returns radiance and depth."""
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64) + du,
                         np.arange(h, dtype=np.float64) + dv)
    dirs_cam = np.stack([(us - camera.cx) / camera.fx,
                         (vs - camera.cy) / camera.fy,
                         np.ones_like(us)], axis=-1)
    # with this parameterization the ray parameter equals camera-frame depth
    dirs = dirs_cam.reshape(-1, 3) @ np.asarray(pose.rotation).T
    origin = np.asarray(pose.translation, dtype=np.float64)

    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_sid = np.full(n, -1, dtype=np.int64)
    for sid, s in enumerate(_SURFACES):
        dk = dirs[:, s.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (s.value - origin[s.axis]) / dk
        pu = origin[s.u_axis] + t * dirs[:, s.u_axis]
        pv = origin[s.v_axis] + t * dirs[:, s.v_axis]
        hit = ((t > 1e-6) & np.isfinite(t)
               & (pu >= s.u_range[0]) & (pu <= s.u_range[1])
               & (pv >= s.v_range[0]) & (pv <= s.v_range[1])
               & (t < best_t))
        best_t[hit] = t[hit]
        best_sid[hit] = sid

    radiance = np.zeros((n, 3))
    for sid, s in enumerate(_SURFACES):
        sel = best_sid == sid
        if not np.any(sel):
            continue
        t = best_t[sel]
        pu = origin[s.u_axis] + t * dirs[sel, s.u_axis]
        pv = origin[s.v_axis] + t * dirs[sel, s.v_axis]
        radiance[sel] = s.radiance(pu, pv)

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return radiance.reshape(h, w, 3), depth.reshape(h, w)


def render(camera: CameraModel, pose, supersample: int = 3):
    """Ray trace the room seen from `pose` (camera-to-world).

    Radiance is area sampled with a `supersample` x `supersample` subpixel
    grid, standing in for sensor integration; depth comes from the central
    ray so silhouettes stay crisp. Returns (radiance HxWx3 float64 per unit
    exposure, depth HxW float64 meters along the optical axis).
    """
    _, depth = _trace(camera, pose, 0.0, 0.0)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    acc = None
    for dv in offsets:
        for du in offsets:
            rad, _ = _trace(camera, pose, du, dv)
            acc = rad if acc is None else acc + rad
    return acc / supersample ** 2, depth


def simulate_ldr(radiance: np.ndarray, exposure_ms: float, curve: ResponseCurve,
                 noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Scale by exposure, add shot and read noise, quantize through the curve."""
    r = radiance * exposure_ms
    shot = rng.standard_normal(r.shape) * np.sqrt(np.clip(r, 0.0, None)) * noise.sigma_s
    read = rng.standard_normal(r.shape) * noise.sigma_c
    return curve.quantize(r + shot + read)


def noisy_depth(depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sigma = DEPTH_NOISE_A + DEPTH_NOISE_B * depth ** 2
    noisy = depth + rng.standard_normal(depth.shape) * sigma
    return np.where(depth > 0, np.clip(noisy, 1e-3, None), 0.0).astype(np.float32)


def trajectory(n_frames: int) -> list:
    """Smooth sinusoidal sweep with rotation, starting at the identity."""
    from .se3 import Pose

    poses = []
    for i in range(n_frames):
        s = i / 100.0
        t = np.array([0.22 * np.sin(2 * np.pi * 1.0 * s),
                      0.12 * np.sin(2 * np.pi * 0.7 * s),
                      0.16 * np.sin(2 * np.pi * 0.5 * s)])
        yaw = np.deg2rad(6.0) * np.sin(2 * np.pi * 0.8 * s)
        pitch = np.deg2rad(3.0) * np.sin(2 * np.pi * 0.6 * s)
        roll = np.deg2rad(2.0) * np.sin(2 * np.pi * 0.9 * s)
        R = Rotation.from_euler("yxz", [yaw, pitch, roll]).as_matrix()
        poses.append(Pose(R, t))
    base = poses[0].inverse()
    return [p @ base for p in poses]


def auto_exposure_ms(radiance: np.ndarray) -> float:
    h, w = radiance.shape[:2]
    y0 = h // 2 - AE_PATCH // 2
    x0 = w // 2 - AE_PATCH // 2
    patch = radiance[y0:y0 + AE_PATCH, x0:x0 + AE_PATCH]
    mean_lum = float(patch.mean())
    return float(np.clip(AE_TARGET / max(mean_lum, 1e-9), *AE_CLAMP_MS))


def flicker_schedule(n_frames: int, seed: int) -> list[float]:
    """Seeded i.i.d. draws from the discrete exposure ladder."""
    rng = np.random.default_rng(seed)
    return [float(v) for v in rng.choice(FLICKER_LADDER_MS, size=n_frames)]


def exposure_for_frame(mode: str, index: int, radiance: np.ndarray,
                       schedule=None) -> float:
    if mode == "constant":
        return 12.0
    if mode == "flicker":
        return schedule[index]
    if mode == "smooth":
        return auto_exposure_ms(radiance)
    raise ValueError(f"unknown exposure mode {mode!r}")


def generate_sequence(out_dir, mode: str = "smooth", n_frames: int = 100,
                      seed: int = 0, camera: CameraModel | None = None,
                      depth_noise: bool = True, write_hdr: bool = True) -> Sequence:
    """Render, expose and write a sequence; returns it loaded from disk."""
    out_dir = Path(out_dir)
    (out_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    if write_hdr:
        (out_dir / "hdr").mkdir(parents=True, exist_ok=True)

    camera = camera or default_camera()
    curve = true_response()
    noise = true_noise()
    rng = np.random.default_rng(seed)
    poses = trajectory(n_frames)
    schedule = flicker_schedule(n_frames, seed) if mode == "flicker" else None

    exposures = []
    for i, pose in enumerate(poses):
        radiance, depth = render(camera, pose)
        exp = exposure_for_frame(mode, i, radiance, schedule)
        exposures.append(exp)
        rgb = simulate_ldr(radiance, exp, curve, noise, rng)
        fileio.write_png_rgb(out_dir / "rgb" / f"{i:06d}.png", rgb)
        d = noisy_depth(depth, rng) if depth_noise else depth.astype(np.float32)
        fileio.write_png_depth16(out_dir / "depth" / f"{i:06d}.png", d)
        if write_hdr:
            fileio.write_pfm(out_dir / "hdr" / f"{i:06d}.pfm", radiance.astype(np.float32))

    fileio.write_exposures(out_dir / "exposure.csv", exposures)
    fileio.write_camera_json(out_dir / "camera.json", camera)
    fileio.write_trajectory(out_dir / "groundtruth.txt",
                            [i / 30.0 for i in range(n_frames)], poses)
    return load_generated(out_dir)


def load_generated(out_dir) -> Sequence:
    from .imagecore import load_sequence

    return load_sequence(out_dir)


def response_stack(exposures_ms=None, camera: CameraModel | None = None,
                   seed: int = 11, noise: bool = True):
    """Static multi-exposure stack from the first trajectory pose."""
    from .se3 import Pose

    if exposures_ms is None:
        exposures_ms = [0.25 * 2 ** k for k in range(11)]
    camera = camera or default_camera()
    curve = true_response()
    nm = true_noise()
    rng = np.random.default_rng(seed)
    radiance, _ = render(camera, Pose.identity())
    images = []
    for e in exposures_ms:
        if noise:
            images.append(simulate_ldr(radiance, e, curve, nm, rng))
        else:
            images.append(curve.quantize(radiance * e))
    return images, list(exposures_ms)


def noise_stack(n_frames: int = 40, exposure_ms: float = 12.0,
                camera: CameraModel | None = None, seed: int = 13):
    """Static same-exposure stack for the noise fit."""
    from .se3 import Pose

    camera = camera or default_camera()
    curve = true_response()
    nm = true_noise()
    rng = np.random.default_rng(seed)
    radiance, _ = render(camera, Pose.identity())
    return [simulate_ldr(radiance, exposure_ms, curve, nm, rng)
            for _ in range(n_frames)]

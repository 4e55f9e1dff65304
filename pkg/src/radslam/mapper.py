"""HDR volumetric map: TSDF fusion of radiance and normalized radiance.

Every voxel keeps a truncated signed distance with its weight, plus fused
radiance and normalized radiance with a shared photometric weight. Updates
are weighted running means with a weight cap, so fusion is permutation
invariant until the cap engages. Geometry weights come from the live depth
normals (view-alignment), photometric admission requires confident,
unsaturated pixels seen head-on enough.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .imagecore import CameraModel
from .se3 import Pose

TAU_CONFIDENCE = 0.2     # min per-pixel max-channel confidence for radiance
TAU_VIEW = 0.17          # min |normal . view| for any integration
DEFAULT_WEIGHT_CAP = 128.0
MIN_SCALE_PIXELS = 200
RADIANCE_FLOOR = 1e-6


class ExposureEstimationError(RuntimeError):
    pass


def weighted_running_mean(value, weight, new_value, new_weight, cap):
    """One fusion step: running mean of `value`, weights summed and capped.

    Shapes broadcast; dtype follows the inputs. With zero incoming weight
    the state is unchanged.
    """
    w_new = weight + new_weight
    safe = np.where(w_new > 0, w_new, 1)
    out = (weight * value + new_weight * new_value) / safe
    out = np.where(w_new > 0, out, value)
    return out, np.minimum(w_new, cap)


@dataclass
class MapperConfig:
    dims: tuple = (128, 128, 128)
    extent_m: float = 3.0
    origin: tuple = (-1.5, -1.5, -0.1)
    truncation_voxels: float = 4.0
    weight_cap: float = DEFAULT_WEIGHT_CAP
    tau_confidence: float = TAU_CONFIDENCE
    tau_view: float = TAU_VIEW
    min_ray_depth: float = 0.3

    @property
    def voxel_size(self) -> float:
        return self.extent_m / self.dims[0]

    @property
    def truncation(self) -> float:
        return self.truncation_voxels * self.voxel_size


@dataclass
class TsdfVolume:
    voxel_size: float
    origin: np.ndarray
    truncation: float
    weight_cap: float
    f: np.ndarray        # (nx, ny, nz) float32, 1 where unobserved
    w_f: np.ndarray
    radiance: np.ndarray     # (nx, ny, nz, 3)
    nrad: np.ndarray         # (nx, ny, nz, 3)
    w_r: np.ndarray
    obs_count: np.ndarray    # (nx, ny, nz) uint32, radiance admissions

    @staticmethod
    def create(cfg: MapperConfig) -> "TsdfVolume":
        dims = tuple(cfg.dims)
        return TsdfVolume(
            voxel_size=cfg.voxel_size,
            origin=np.asarray(cfg.origin, dtype=np.float64),
            truncation=cfg.truncation,
            weight_cap=cfg.weight_cap,
            f=np.ones(dims, dtype=np.float32),
            w_f=np.zeros(dims, dtype=np.float32),
            radiance=np.zeros(dims + (3,), dtype=np.float32),
            nrad=np.zeros(dims + (3,), dtype=np.float32),
            w_r=np.zeros(dims, dtype=np.float32),
            obs_count=np.zeros(dims, dtype=np.uint32),
        )

    @property
    def dims(self):
        return self.f.shape

    def voxel_centers_flat(self) -> np.ndarray:
        cached = getattr(self, "_centers", None)
        if cached is None:
            nx, ny, nz = self.dims
            ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                     indexing="ij")
            ijk = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
            cached = self.origin + (ijk + 0.5) * self.voxel_size
            object.__setattr__(self, "_centers", cached)
        return cached


def depth_normals(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-pixel unit normals from central differences of unprojected depth.

    Zero where depth (or a needed neighbor) is missing. Normals are oriented
    toward the camera.
    """
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pts = camera.unproject(us, vs, depth.astype(np.float64))
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    dv[1:-1, :] = pts[2:, :] - pts[:-2, :]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)
    ok = depth > 0
    ok[:, (0, -1)] = False
    ok[(0, -1), :] = False
    ok[:, 1:-1] &= (depth[:, 2:] > 0) & (depth[:, :-2] > 0)
    ok[1:-1, :] &= (depth[2:, :] > 0) & (depth[:-2, :] > 0)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    # orient against the viewing ray so n . view is negative
    view = pts / np.linalg.norm(pts, axis=2, keepdims=True).clip(1e-12)
    flip = (n * view).sum(axis=2) > 0
    n[flip] *= -1.0
    return n


def integrate(volume: TsdfVolume, camera: CameraModel, T_cw: Pose,
              depth: np.ndarray, radiance_frame=None, normalized=None,
              cfg: MapperConfig | None = None) -> None:
    """Fuse one frame into the volume (gather style over voxels).

    `T_cw` maps world points into the camera frame. Geometry updates use
    voxels down to -truncation in front of the surface; photometric updates
    are confined to the +/-truncation band and gated by confidence and view
    alignment.
    """
    cfg = cfg or MapperConfig()
    delta = volume.truncation
    h, w = depth.shape

    centers = volume.voxel_centers_flat()
    x_c = centers @ np.asarray(T_cw.rotation).T + T_cw.translation
    z = x_c[:, 2]
    near = z > 1e-6
    idx = np.nonzero(near)[0]
    xs = x_c[idx]
    u = np.rint(camera.fx * xs[:, 0] / xs[:, 2] + camera.cx).astype(np.int64)
    v = np.rint(camera.fy * xs[:, 1] / xs[:, 2] + camera.cy).astype(np.int64)
    inb = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = idx[inb]
    u = u[inb]
    v = v[inb]
    xs = xs[inb]

    d_px = depth[v, u].astype(np.float64)
    has_depth = d_px > 0
    sdf = d_px - xs[:, 2]
    geo = has_depth & (sdf >= -delta)

    normals = depth_normals(depth, camera)
    n_px = normals[v, u]
    view = xs / np.linalg.norm(xs, axis=1, keepdims=True).clip(1e-12)
    n_dot_v = np.abs((n_px * view).sum(axis=1))
    geo &= n_dot_v > cfg.tau_view

    gi = idx[geo]
    f_new = np.minimum(sdf[geo] / delta, 1.0).astype(np.float32)
    w_new = n_dot_v[geo].astype(np.float32)

    flat = np.unravel_index(gi, volume.dims)
    f_old = volume.f[flat]
    wf_old = volume.w_f[flat]
    f_upd, wf_upd = weighted_running_mean(f_old, wf_old, f_new, w_new,
                                          volume.weight_cap)
    volume.f[flat] = f_upd
    volume.w_f[flat] = wf_upd

    if radiance_frame is None:
        return

    band = geo & (np.abs(sdf) <= delta)
    conf_max = radiance_frame.pcf_max[v, u]
    conf_mean = radiance_frame.confidence[v, u]
    sat = radiance_frame.saturated[v, u]
    admit = band & (conf_max > cfg.tau_confidence) & ~sat
    if normalized is not None:
        admit &= normalized.valid[v, u]

    ri = idx[admit]
    flat_r = np.unravel_index(ri, volume.dims)
    wr_new = conf_mean[admit].astype(np.float32)
    rad_new = radiance_frame.radiance[v[admit], u[admit]]
    wr_old = volume.w_r[flat_r]
    rad_old = volume.radiance[flat_r]
    rad_upd, wr_upd = weighted_running_mean(
        rad_old, wr_old[:, None], rad_new, wr_new[:, None], volume.weight_cap)
    volume.radiance[flat_r] = rad_upd
    if normalized is not None:
        nr_new = normalized.nr[v[admit], u[admit]]
        nr_old = volume.nrad[flat_r]
        nr_upd, _ = weighted_running_mean(
            nr_old, wr_old[:, None], nr_new, wr_new[:, None], volume.weight_cap)
        volume.nrad[flat_r] = nr_upd
    volume.w_r[flat_r] = wr_upd[:, 0]
    volume.obs_count[flat_r] += 1


@dataclass
class Prediction:
    """Raycast of the model from one camera pose."""

    depth: np.ndarray        # (H, W) float32, 0 where no surface
    radiance: np.ndarray     # (H, W, 3) float32
    nrad: np.ndarray         # (H, W, 3) float32, fused normalized radiance
    normals: np.ndarray      # (H, W, 3) float32, world frame
    obs_count: np.ndarray    # (H, W) int32
    rad_valid: np.ndarray    # (H, W) bool, fused radiance present at the hit


def _trilinear(volume_arr, valid, p):
    """Trilinear sample of `volume_arr` at voxel-grid coords `p` (N, 3).

    Returns (values, ok); ok requires all 8 corners valid. `volume_arr` may
    be (nx,ny,nz) or (nx,ny,nz,C).
    """
    nx, ny, nz = volume_arr.shape[:3]
    i0 = np.floor(p).astype(np.int64)
    ok = np.all(i0 >= 0, axis=1) & (i0[:, 0] < nx - 1) & (i0[:, 1] < ny - 1) \
        & (i0[:, 2] < nz - 1)
    i0c = np.clip(i0, 0, [nx - 2, ny - 2, nz - 2])
    f = p - i0c
    channels = volume_arr.shape[3:]
    acc = np.zeros((len(p),) + channels, dtype=np.float64)
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                wgt = wx * wy * wz
                ii = (i0c[:, 0] + dx, i0c[:, 1] + dy, i0c[:, 2] + dz)
                ok &= valid[ii]
                vals = volume_arr[ii]
                acc += (wgt[:, None] if channels else wgt) * vals
    return acc, ok


def _weighted_trilinear(volume_arr, weights, p, min_support: float = 0.0):
    """Trilinear sample ignoring empty corners, renormalized by live weight.

    `min_support` is the interpolation weight the present corners must carry
    for the sample to count as valid.
    """
    nx, ny, nz = volume_arr.shape[:3]
    i0 = np.clip(np.floor(p).astype(np.int64), 0, [nx - 2, ny - 2, nz - 2])
    f = p - i0
    channels = volume_arr.shape[3:]
    flat_arr = volume_arr.reshape((-1,) + channels)
    flat_w = weights.ravel()
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    acc = np.zeros((len(p),) + channels, dtype=np.float64)
    wsum = np.zeros(len(p), dtype=np.float64)
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                ii = base + (dx * ny + dy) * nz + dz
                wgt = wx * wy * wz * (flat_w[ii] > 0)
                acc += (wgt[:, None] if channels else wgt) * flat_arr[ii]
                wsum += wgt
    safe = np.where(wsum > 0, wsum, 1.0)
    ok = wsum > max(min_support, 1e-12)
    return acc / (safe[:, None] if channels else safe), ok


def raycast(volume: TsdfVolume, camera: CameraModel, T_wc: Pose,
            cfg: MapperConfig | None = None) -> Prediction:
    """March each pixel ray to the first +/- TSDF zero crossing.

    Steps are half a truncation distance; the crossing is refined by linear
    interpolation and attributes are sampled trilinearly there.
    """
    cfg = cfg or MapperConfig()
    h, w = camera.height, camera.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(us - camera.cx) / camera.fx,
                         (vs - camera.cy) / camera.fy,
                         np.ones_like(us)], axis=-1).reshape(-1, 3)
    R = np.asarray(T_wc.rotation)
    dirs = dirs_cam @ R.T               # ray parameter equals camera depth
    origin = np.asarray(T_wc.translation, dtype=np.float64)

    dims = np.array(volume.dims)
    lo = volume.origin + 0.5 * volume.voxel_size
    hi = volume.origin + (dims - 0.5) * volume.voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    t_near = np.maximum(t_near, cfg.min_ray_depth)

    n = len(dirs)
    inv_len = 1.0 / np.linalg.norm(dirs, axis=1)
    step = 0.5 * volume.truncation * inv_len
    observed = volume.w_f > 0
    dmax = dims - 1

    # coarse pass: one truncation-length step, nearest-voxel occupancy only,
    # to find where each ray first meets observed space
    coarse = volume.truncation * inv_len
    span = np.where(t_far > t_near, t_far - t_near, 0.0)
    n_coarse = int(np.ceil((span / np.where(coarse > 0, coarse, 1.0)).max())) + 1
    tc = t_near[:, None] + np.arange(n_coarse)[None, :] * coarse[:, None]
    in_range = tc <= t_far[:, None]
    occ = np.zeros(tc.shape, dtype=bool)
    gi = np.empty(tc.shape, dtype=np.int64)
    for a in range(3):
        np.clip(np.rint((origin[a] + tc * dirs[:, a][:, None] - volume.origin[a])
                        / volume.voxel_size - 0.5).astype(np.int64),
                0, dmax[a], out=gi)
        if a == 0:
            flat = gi * (dims[1] * dims[2])
        elif a == 1:
            flat += gi * dims[2]
        else:
            flat += gi
    occ = observed.ravel()[flat] & in_range
    has_obs = occ.any(axis=1)
    first = occ.argmax(axis=1)
    t_start = np.maximum(t_near, t_near + (first - 1) * coarse)

    hit_t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = has_obs & (t_start < t_far)
    t = t_start.copy()
    f_prev = np.full(n, np.nan)
    t_prev = t.copy()

    w_f_mask = volume.w_f
    while np.any(alive):
        ai = np.nonzero(alive)[0]
        pts = origin + t[ai, None] * dirs[ai]
        g = (pts - volume.origin) / volume.voxel_size - 0.5
        gn = np.clip(np.rint(g).astype(np.int64), 0, dmax)
        near_obs = observed[gn[:, 0], gn[:, 1], gn[:, 2]]
        adv = np.where(near_obs, step[ai], 2.0 * step[ai])
        if np.any(near_obs):
            sub = np.nonzero(near_obs)[0]
            f_val, ok_sub = _weighted_trilinear(volume.f, w_f_mask, g[sub],
                                                min_support=0.25)
            si = ai[sub]
            crossed = ok_sub & (f_prev[si] > 0) & (f_val <= 0)
            ci = si[crossed]
            if len(ci) > 0:
                fp = f_prev[ci]
                fc = f_val[crossed]
                frac = fp / (fp - fc)
                hit_t[ci] = t_prev[ci] + frac * (t[ci] - t_prev[ci])
                hit[ci] = True
                alive[ci] = False

            # remember the last valid sample only, bridging unobserved gaps
            vi = si[ok_sub]
            f_prev[vi] = f_val[ok_sub]
            t_prev[vi] = t[vi]
            # far from the surface the field itself bounds the safe step
            ahead = ok_sub & (f_val > 0.3)
            adv[sub[ahead]] = np.maximum(adv[sub[ahead]],
                                         1.6 * step[si[ahead]] * f_val[ahead])
        t[ai] = t[ai] + adv
        alive &= t <= t_far

    depth = np.zeros(n, dtype=np.float32)
    radiance = np.zeros((n, 3), dtype=np.float32)
    nrad = np.zeros((n, 3), dtype=np.float32)
    normals = np.zeros((n, 3), dtype=np.float32)
    obs = np.zeros(n, dtype=np.int32)
    rvalid = np.zeros(n, dtype=bool)

    hi_idx = np.nonzero(hit)[0]
    if len(hi_idx) > 0:
        th = hit_t[hi_idx]
        pts = origin + th[:, None] * dirs[hi_idx]
        depth[hi_idx] = th.astype(np.float32)

        g = (pts - volume.origin) / volume.voxel_size - 0.5
        rad, rok = _weighted_trilinear(volume.radiance, volume.w_r, g)
        nr, _ = _weighted_trilinear(volume.nrad, volume.w_r, g)
        radiance[hi_idx] = np.where(rok[:, None], rad, 0.0).astype(np.float32)
        nrad[hi_idx] = np.where(rok[:, None], nr, 0.0).astype(np.float32)
        rvalid[hi_idx] = rok

        # central-difference TSDF gradient in world units
        e = volume.voxel_size
        grad = np.zeros((len(pts), 3))
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = e
            gp = (pts + dp - volume.origin) / volume.voxel_size - 0.5
            gm = (pts - dp - volume.origin) / volume.voxel_size - 0.5
            fp_, okp = _trilinear(volume.f, observed, gp)
            fm_, okm = _trilinear(volume.f, observed, gm)
            grad[:, a] = np.where(okp & okm, fp_ - fm_, 0.0)
        nn = np.linalg.norm(grad, axis=1)
        good = nn > 1e-12
        grad[good] /= nn[good, None]
        toward = (grad * dirs[hi_idx]).sum(axis=1) > 0
        grad[toward] *= -1.0
        normals[hi_idx] = grad.astype(np.float32)

        vox = np.clip(np.rint(g).astype(np.int64), 0, dims - 1)
        obs[hi_idx] = volume.obs_count[vox[:, 0], vox[:, 1], vox[:, 2]].astype(np.int32)

    return Prediction(
        depth=depth.reshape(h, w),
        radiance=radiance.reshape(h, w, 3),
        nrad=nrad.reshape(h, w, 3),
        normals=normals.reshape(h, w, 3),
        obs_count=obs.reshape(h, w),
        rad_valid=rvalid.reshape(h, w),
    )


def estimate_exposure_scale(ref_radiance: np.ndarray, live_radiance: np.ndarray,
                            confidence: np.ndarray, valid: np.ndarray,
                            normalized_weights: bool = True,
                            min_pixels: int = MIN_SCALE_PIXELS) -> float:
    """Scale s with ref ~ s * live, a confidence-weighted mean of ratios.

    Luminance is the channel mean. With `normalized_weights` the weights sum
    to one; otherwise the plain pixel-count mean of weighted ratios is used.
    """
    ref_l = ref_radiance.mean(axis=-1) if ref_radiance.ndim == 3 else ref_radiance
    live_l = live_radiance.mean(axis=-1) if live_radiance.ndim == 3 else live_radiance
    ok = (valid & (ref_l > RADIANCE_FLOOR) & (live_l > RADIANCE_FLOOR)
          & np.isfinite(ref_l) & np.isfinite(live_l))
    if np.count_nonzero(ok) < min_pixels:
        raise ExposureEstimationError(
            f"{np.count_nonzero(ok)} usable pixels, need {min_pixels}")
    ratios = ref_l[ok] / live_l[ok]
    weights = confidence[ok].astype(np.float64)
    if normalized_weights:
        wsum = weights.sum()
        if wsum <= 0:
            raise ExposureEstimationError("zero total confidence")
        return float((weights * ratios).sum() / wsum)
    return float((weights * ratios).mean())


def save_volume(path, volume: TsdfVolume) -> None:
    """Binary snapshot: header, then per-voxel F, w_F, R, nR, w_R (x fastest)."""
    header = fileio.pack_volume_header(volume.dims, volume.voxel_size,
                                       volume.origin, volume.truncation)
    fields = [volume.f, volume.w_f,
              volume.radiance[..., 0], volume.radiance[..., 1], volume.radiance[..., 2],
              volume.nrad[..., 0], volume.nrad[..., 1], volume.nrad[..., 2],
              volume.w_r]
    with open(path, "wb") as f:
        f.write(header)
        for arr in fields:
            f.write(arr.astype("<f4").ravel(order="F").tobytes())


def load_volume(path, weight_cap: float = DEFAULT_WEIGHT_CAP) -> TsdfVolume:
    blob = Path(path).read_bytes()
    dims, voxel_size, origin, truncation = fileio.unpack_volume_header(
        blob[:fileio.VOLUME_HEADER_SIZE])
    count = dims[0] * dims[1] * dims[2]
    data = np.frombuffer(blob[fileio.VOLUME_HEADER_SIZE:], dtype="<f4")
    if len(data) != count * 9:
        raise ValueError("volume snapshot has wrong size")
    planes = [data[i * count:(i + 1) * count].reshape(dims, order="F")
              for i in range(9)]
    return TsdfVolume(
        voxel_size=voxel_size, origin=origin, truncation=truncation,
        weight_cap=weight_cap,
        f=planes[0].copy(), w_f=planes[1].copy(),
        radiance=np.stack(planes[2:5], axis=-1),
        nrad=np.stack(planes[5:8], axis=-1),
        w_r=planes[8].copy(),
        obs_count=np.zeros(dims, dtype=np.uint32),
    )


def export_pointcloud(path, prediction: Prediction, camera: CameraModel,
                      T_wc: Pose) -> int:
    """Unproject a raycast prediction to a world-frame PLY; returns the count."""
    h, w = prediction.depth.shape
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    ok = prediction.depth > 0
    pts_c = camera.unproject(us[ok], vs[ok], prediction.depth[ok].astype(np.float64))
    pts_w = T_wc.apply(pts_c)
    fileio.write_ply(path, pts_w, prediction.normals[ok], prediction.radiance[ok])
    return int(np.count_nonzero(ok))

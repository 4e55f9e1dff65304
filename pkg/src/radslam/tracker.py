"""Direct RGB-D pose tracking over image pyramids.

Forward-compositional Gauss-Newton on an SE(3) twist, with four photometric
objectives sharing one warp:

  raw_intensity   plain 8-bit intensity difference
  ncc             patchwise normalized cross-correlation
  comp_radiance   radiance difference with an alternating global scale
  norm_radiance   locally standardized radiance weighted by photometric
                  confidence

Residuals are formed at reference pixels with depth, warped into the live
frame and sampled bilinearly; gradients are the exact derivatives of the
bilinear interpolant so finite differences of the cost match the analytic
Jacobian under a frozen correspondence mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import CameraModel, build_pyramid
from .radiometric import ConfidenceTable
from .se3 import Pose

OBJECTIVES = ("raw_intensity", "ncc", "comp_radiance", "norm_radiance")
AXES = ("rx", "ry", "rz", "tx", "ty", "tz")


class InsufficientOverlap(RuntimeError):
    pass


@dataclass
class TrackerConfig:
    objective: str = "norm_radiance"
    pcf_variant: str = "p2"
    levels: int = 3
    iterations: tuple = (10, 7, 5)      # per pyramid level, fine to coarse
    ncc_radius: int = 3
    min_overlap: float = 0.1
    step_tol: float = 1e-6
    depth_gate_m: float = 0.1
    min_depth_m: float = 0.05

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if len(self.iterations) < self.levels:
            raise ValueError("need an iteration count per level")


@dataclass
class TrackingView:
    """Per-frame pyramids of the tracked channel, weights, depth, validity."""

    cameras: list
    channel: list
    weight: list
    depth: list
    valid: list

    @property
    def levels(self) -> int:
        return len(self.channel)


def prepare_view(camera: CameraModel, depth: np.ndarray, cfg: TrackerConfig,
                 rgb: np.ndarray | None = None, radiance=None,
                 normalized=None) -> TrackingView:
    """Build the pyramids an objective needs from whichever inputs it uses."""
    obj = cfg.objective
    weight = None
    if obj in ("raw_intensity", "ncc"):
        if rgb is None:
            raise ValueError(f"{obj} needs an 8-bit image")
        channel = rgb.astype(np.float32).mean(axis=2) / 255.0
        valid = depth > 0
    elif obj == "comp_radiance":
        if radiance is None:
            raise ValueError("comp_radiance needs a radiance frame")
        channel = radiance.radiance.astype(np.float32).mean(axis=2)
        valid = (depth > 0) & ~radiance.saturated
    elif obj == "norm_radiance":
        if normalized is None or radiance is None:
            raise ValueError("norm_radiance needs normalized radiance and confidence")
        channel = normalized.mean_channel().astype(np.float32)
        valid = normalized.valid & (depth > 0)
        weight = ConfidenceTable.variant(
            radiance.confidence.astype(np.float32), cfg.pcf_variant)
        weight = np.where(valid, weight, np.float32(0.0))
    else:  # pragma: no cover
        raise ValueError(obj)

    return view_from_channel(camera, channel, depth, valid, cfg, weight)


def view_from_channel(camera: CameraModel, channel: np.ndarray,
                      depth: np.ndarray, valid: np.ndarray,
                      cfg: TrackerConfig,
                      weight: np.ndarray | None = None) -> TrackingView:
    """Assemble tracking pyramids from an already-chosen scalar channel."""
    if weight is None:
        weight = np.ones_like(channel)
    weight = np.where(valid, weight, np.float32(0.0))
    lv = cfg.levels
    return TrackingView(
        cameras=[camera.scaled(k) for k in range(lv)],
        channel=build_pyramid(channel, lv),
        weight=build_pyramid(weight, lv),
        depth=build_pyramid(depth.astype(np.float32), lv, kind="depth"),
        valid=[p >= 0.999 for p in build_pyramid(valid.astype(np.float32), lv)],
    )


def bilinear_sample_with_grad(img: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Values and exact interpolant derivatives at continuous coordinates.

    Coordinates are clamped to the last valid cell, which keeps the function
    defined (and piecewise linear) under tiny perturbations at the border.
    """
    h, w = img.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fx = u - x0
    fy = v - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    gx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    gy = bot - top
    return val, gx, gy


@dataclass
class _Warp:
    """Masked correspondences of one evaluation, plus projection Jacobians."""

    idx: np.ndarray        # indices into the ref-valid pixel list
    a: np.ndarray          # reference channel values
    u: np.ndarray          # live coordinates
    v: np.ndarray
    duv_dxi: np.ndarray    # (N, 2, 6)
    n_ref: int             # size of the ref-valid pixel list


def _ref_points(ref: TrackingView, level: int):
    cam = ref.cameras[level]
    depth = ref.depth[level]
    mask = ref.valid[level] & (depth > 0)
    vs, us = np.nonzero(mask)
    z = depth[vs, us].astype(np.float64)
    pts = cam.unproject(us.astype(np.float64), vs.astype(np.float64), z)
    return us, vs, pts


def _warp(ref: TrackingView, live: TrackingView, level: int, T: Pose,
          cfg: TrackerConfig, margin: float, mask_idx: np.ndarray | None):
    cam = live.cameras[level]
    us, vs, pts = _ref_points(ref, level)
    n_ref = len(us)
    if n_ref == 0:
        raise InsufficientOverlap("reference view has no usable pixels")

    R = np.asarray(T.rotation)
    x_l = pts @ R.T + T.translation
    z = x_l[:, 2]

    if mask_idx is None:
        h, w = live.channel[level].shape
        safe_z = np.where(z > cfg.min_depth_m, z, 1.0)
        u = cam.fx * x_l[:, 0] / safe_z + cam.cx
        v = cam.fy * x_l[:, 1] / safe_z + cam.cy
        ok = ((z > cfg.min_depth_m)
              & (u >= margin) & (u <= w - 1 - margin)
              & (v >= margin) & (v <= h - 1 - margin))
        ui = np.clip(np.rint(u), 0, w - 1).astype(np.int64)
        vi = np.clip(np.rint(v), 0, h - 1).astype(np.int64)
        ok &= live.valid[level][vi, ui]
        d_live = live.depth[level][vi, ui]
        ok &= (d_live > 0) & (np.abs(z - d_live) <= cfg.depth_gate_m)
        idx = np.nonzero(ok)[0]
        if len(idx) < cfg.min_overlap * n_ref:
            raise InsufficientOverlap(
                f"{len(idx)}/{n_ref} correspondences at level {level}")
    else:
        idx = mask_idx

    xs = x_l[idx]
    z = xs[:, 2]
    u = cam.fx * xs[:, 0] / z + cam.cx
    v = cam.fy * xs[:, 1] / z + cam.cy

    # d(u,v)/d(live point), then chain through X(xi) = T exp(xi) X_ref
    inv_z = 1.0 / z
    du_dx = np.zeros((len(idx), 2, 3))
    du_dx[:, 0, 0] = cam.fx * inv_z
    du_dx[:, 0, 2] = -cam.fx * xs[:, 0] * inv_z * inv_z
    du_dx[:, 1, 1] = cam.fy * inv_z
    du_dx[:, 1, 2] = -cam.fy * xs[:, 1] * inv_z * inv_z

    p = pts[idx]
    dx_dxi = np.zeros((len(idx), 3, 6))
    # -R [p]_x for the rotation block, R for translation
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    hat_p = np.zeros((len(idx), 3, 3))
    hat_p[:, 0, 1] = -pz
    hat_p[:, 0, 2] = py
    hat_p[:, 1, 0] = pz
    hat_p[:, 1, 2] = -px
    hat_p[:, 2, 0] = -py
    hat_p[:, 2, 1] = px
    dx_dxi[:, :, :3] = -np.einsum("ab,nbc->nac", R, hat_p)
    dx_dxi[:, :, 3:] = R

    a = ref.channel[level][vs[idx], us[idx]].astype(np.float64)
    duv_dxi = np.einsum("nab,nbc->nac", du_dx, dx_dxi)
    return _Warp(idx=idx, a=a, u=u, v=v, duv_dxi=duv_dxi, n_ref=n_ref)


def _pointwise_terms(ref: TrackingView, live: TrackingView, level: int,
                     T: Pose, cfg: TrackerConfig, mask_idx=None):
    wp = _warp(ref, live, level, T, cfg, margin=1.0, mask_idx=mask_idx)
    b, gx, gy = bilinear_sample_with_grad(
        live.channel[level].astype(np.float64), wp.u, wp.v)

    if cfg.objective == "norm_radiance":
        wv, wgx, wgy = bilinear_sample_with_grad(
            live.weight[level].astype(np.float64), wp.u, wp.v)
    else:
        wv = np.ones_like(b)
        wgx = wgy = np.zeros_like(b)

    if cfg.objective == "comp_radiance":
        denom = float(np.dot(b, b))
        scale = float(np.dot(wp.a, b) / denom) if denom > 0 else 1.0
    else:
        scale = 1.0

    r = (wp.a - scale * b) * wv
    # dr = (-scale * grad(b) * w + (a - scale b) * grad(w)) . duv_dxi
    dr_du = -scale * gx * wv + (wp.a - scale * b) * wgx
    dr_dv = -scale * gy * wv + (wp.a - scale * b) * wgy
    J = (dr_du[:, None] * wp.duv_dxi[:, 0, :]
         + dr_dv[:, None] * wp.duv_dxi[:, 1, :])
    return wp, r, J, scale


def _ncc_terms(ref: TrackingView, live: TrackingView, level: int,
               T: Pose, cfg: TrackerConfig, mask_idx=None):
    rad = cfg.ncc_radius
    wp = _warp(ref, live, level, T, cfg, margin=rad + 1.0, mask_idx=mask_idx)
    A = ref.channel[level].astype(np.float64)
    B = live.channel[level].astype(np.float64)
    us, vs, _ = _ref_points(ref, level)
    cu = us[wp.idx]
    cv = vs[wp.idx]
    h, w = A.shape
    # patches that would leave the reference image are dropped via clamping
    # the center; such centers are rare because of the warp margin
    cu = np.clip(cu, rad, w - 1 - rad)
    cv = np.clip(cv, rad, h - 1 - rad)

    offsets = [(dy, dx) for dy in range(-rad, rad + 1)
               for dx in range(-rad, rad + 1)]
    n = len(wp.idx)
    m = len(offsets)
    av = np.empty((n, m))
    bv = np.empty((n, m))
    bgx = np.empty((n, m))
    bgy = np.empty((n, m))
    for j, (dy, dx) in enumerate(offsets):
        av[:, j] = A[cv + dy, cu + dx]
        val, gx, gy = bilinear_sample_with_grad(B, wp.u + dx, wp.v + dy)
        bv[:, j] = val
        bgx[:, j] = gx
        bgy[:, j] = gy

    am = av.mean(axis=1, keepdims=True)
    bm = bv.mean(axis=1, keepdims=True)
    da = av - am
    db = bv - bm
    sa = np.sqrt((da * da).mean(axis=1))
    sb = np.sqrt((db * db).mean(axis=1))
    good = (sa > 1e-6) & (sb > 1e-6)
    sa = np.where(good, sa, 1.0)
    sb = np.where(good, sb, 1.0)
    corr = (da * db).mean(axis=1) / (sa * sb)
    corr = np.clip(corr, -1.0, 1.0) * good

    r = np.sqrt(np.clip(1.0 - corr * corr, 0.0, None))
    # treat patch means and sigmas as locally constant
    dc_db = (da / sa[:, None] - corr[:, None] * db / sb[:, None]) / (m * sb[:, None])
    dc_du = (dc_db * bgx).sum(axis=1)
    dc_dv = (dc_db * bgy).sum(axis=1)
    dr_dc = -corr / np.maximum(r, 1e-3)
    J = (dr_dc * dc_du)[:, None] * wp.duv_dxi[:, 0, :] \
        + (dr_dc * dc_dv)[:, None] * wp.duv_dxi[:, 1, :]
    return wp, r, J, 1.0


def evaluate(ref: TrackingView, live: TrackingView, level: int, T: Pose,
             cfg: TrackerConfig, mask_idx=None):
    """Cost, residuals, Jacobian and the correspondence mask at pose T."""
    terms = _ncc_terms if cfg.objective == "ncc" else _pointwise_terms
    wp, r, J, scale = terms(ref, live, level, T, cfg, mask_idx)
    cost = float(np.mean(r * r))
    return cost, r, J, wp, scale


def objective_cost(ref: TrackingView, live: TrackingView, level: int, T: Pose,
                   cfg: TrackerConfig, mask_idx=None) -> float:
    return evaluate(ref, live, level, T, cfg, mask_idx)[0]


def objective_gradient(ref: TrackingView, live: TrackingView, level: int,
                       T: Pose, cfg: TrackerConfig, mask_idx=None) -> np.ndarray:
    """Gradient of the mean squared residual with respect to the twist."""
    _, r, J, _, _ = evaluate(ref, live, level, T, cfg, mask_idx)
    return 2.0 / len(r) * (J.T @ r)


@dataclass
class TrackingResult:
    pose: Pose                      # live-from-reference transform
    converged: bool
    cost: float = np.inf
    iterations: int = 0
    level_costs: list = field(default_factory=list)


def track_frame(ref: TrackingView, live: TrackingView, cfg: TrackerConfig,
                init: Pose | None = None) -> TrackingResult:
    """Coarse-to-fine Gauss-Newton; keeps the best-cost pose per level."""
    T = init if init is not None else Pose.identity()
    total_iters = 0
    level_costs = []
    try:
        for level in range(min(cfg.levels, ref.levels) - 1, -1, -1):
            n_iter = cfg.iterations[level]
            best_cost = np.inf
            best_T = T
            for _ in range(n_iter):
                cost, r, J, wp, scale = evaluate(ref, live, level, T, cfg)
                if not np.isfinite(cost):
                    return TrackingResult(pose=init or Pose.identity(),
                                          converged=False)
                if cost < best_cost:
                    best_cost = cost
                    best_T = T
                H = J.T @ J
                g = J.T @ r
                damp = 1e-9 * max(np.trace(H), 1e-12)
                try:
                    delta = np.linalg.solve(H + damp * np.eye(6), -g)
                except np.linalg.LinAlgError:
                    return TrackingResult(pose=init or Pose.identity(),
                                          converged=False)
                if not np.all(np.isfinite(delta)):
                    return TrackingResult(pose=init or Pose.identity(),
                                          converged=False)
                T = T @ Pose.exp(delta)
                total_iters += 1
                if np.linalg.norm(delta) < cfg.step_tol:
                    break
            final_cost = objective_cost(ref, live, level, T, cfg)
            if final_cost <= best_cost:
                best_cost = final_cost
            else:
                T = best_T
            level_costs.append(best_cost)
    except InsufficientOverlap:
        return TrackingResult(pose=init or Pose.identity(), converged=False)
    return TrackingResult(pose=T, converged=True, cost=level_costs[-1],
                          iterations=total_iters, level_costs=level_costs)


def error_surface(ref: TrackingView, live: TrackingView, center: Pose,
                  axis: str, offsets: np.ndarray, cfg: TrackerConfig,
                  level: int = 0) -> np.ndarray:
    """Objective sweep along one twist axis around a center pose."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    e = np.zeros(6)
    e[AXES.index(axis)] = 1.0
    costs = np.empty(len(offsets))
    for i, off in enumerate(offsets):
        costs[i] = objective_cost(ref, live, level,
                                  center @ Pose.exp(off * e), cfg)
    return costs


def write_error_surface_csv(path, offsets, costs, objective: str, axis: str) -> None:
    with open(path, "w") as f:
        f.write(f"# objective={objective} axis={axis}\n")
        f.write("offset,cost\n")
        for o, c in zip(offsets, costs):
            f.write(f"{o:.9g},{c:.9g}\n")

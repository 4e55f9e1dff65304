"""Frame-to-model tracking and fusion over auto-exposure RGB-D sequences.

The first frame seeds the volume at the identity pose; each later frame is
converted, tracked against the latest surface prediction, exposure
compensated, fused, and a fresh prediction is rendered from its pose.
"""

from dataclasses import dataclass, field

import numpy as np

from . import mapper, radiometric, tracker
from .imagecore import CameraModel, RadianceFrame, normalize_radiance
from .mapper import MapperConfig, Prediction, TsdfVolume
from .se3 import Pose
from .tracker import TrackerConfig, bilinear_sample_with_grad

RADIANCE_OBJECTIVES = ("comp_radiance", "norm_radiance")


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    frame_to_frame: bool = False
    estimate_exposure: bool = True
    snapshot_every: int = 0          # keep a prediction copy every N frames


@dataclass
class FrameRecord:
    index: int
    pose: Pose                       # camera-to-world
    converged: bool
    integrated: bool
    exposure_scale: float
    cost: float


@dataclass
class PipelineResult:
    poses: list
    records: list
    volume: TsdfVolume
    prediction: Prediction | None    # rendered from the final pose
    snapshots: dict
    diverged: bool


def uses_radiance(objective: str) -> bool:
    return objective in RADIANCE_OBJECTIVES


def _intensity_frame(frame) -> RadianceFrame:
    """Wrap raw intensities so intensity baselines flow through fusion."""
    shape = frame.depth.shape
    return RadianceFrame(
        radiance=frame.rgb.astype(np.float32) / 255.0,
        confidence=np.ones(shape, np.float32),
        saturated=np.any((frame.rgb == 0) | (frame.rgb == 255), axis=2),
        exposure_ms=frame.exposure_ms,
        pcf_max=np.ones(shape, np.float32),
    )


def _live_state(camera, frame, cfg: PipelineConfig, curve, pcf):
    """Radiance conversion (per objective) plus the live tracking view."""
    if not uses_radiance(cfg.tracker.objective):
        rf = _intensity_frame(frame)
        view = tracker.prepare_view(camera, frame.depth, cfg.tracker,
                                    rgb=frame.rgb)
        return rf, None, view
    rf = radiometric.to_radiance(frame, curve, pcf)
    normalized = normalize_radiance(rf, depth=frame.depth)
    view = tracker.prepare_view(camera, frame.depth, cfg.tracker,
                                radiance=rf, normalized=normalized)
    return rf, normalized, view


def _model_state(camera, pred: Prediction, cfg: PipelineConfig):
    """Reference tracking view rendered out of the fused model."""
    obj = cfg.tracker.objective
    depth = pred.depth
    if obj == "norm_radiance":
        channel = pred.nrad.mean(axis=2).astype(np.float32)
    else:
        channel = pred.radiance.mean(axis=2).astype(np.float32)
    valid = (depth > 0) & pred.rad_valid
    return tracker.view_from_channel(camera, channel, depth, valid,
                                     cfg.tracker)


def _compensate_exposure(camera: CameraModel, pred: Prediction,
                         live_rf: RadianceFrame, live_depth, T_lr: Pose,
                         depth_gate: float, fallback: float) -> float:
    """Scale relating model radiance to the live frame along the solved pose."""
    ok = pred.rad_valid & (pred.depth > 0)
    vs, us = np.nonzero(ok)
    if len(vs) == 0:
        return fallback
    x_ref = camera.unproject(us.astype(np.float64), vs.astype(np.float64),
                             pred.depth[ok].astype(np.float64))
    x_live = x_ref @ np.asarray(T_lr.rotation).T + T_lr.translation
    z = x_live[:, 2]
    front = z > 1e-6
    uv = camera.project(x_live[front])
    u, v = uv[:, 0], uv[:, 1]
    h, w = live_depth.shape
    inb = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    lum_live = live_rf.radiance.mean(axis=2)
    samp_lum = bilinear_sample_with_grad(lum_live, u[inb], v[inb])[0]
    samp_conf = bilinear_sample_with_grad(
        live_rf.confidence.astype(np.float32), u[inb], v[inb])[0]
    ui = np.clip(np.rint(u[inb]).astype(np.int64), 0, w - 1)
    vi = np.clip(np.rint(v[inb]).astype(np.int64), 0, h - 1)
    d_live = live_depth[vi, ui]
    usable = ((d_live > 0)
              & (np.abs(d_live - z[front][inb]) <= depth_gate)
              & ~live_rf.saturated[vi, ui])

    ref_lum = pred.radiance.mean(axis=2)[ok][front][inb]
    try:
        return mapper.estimate_exposure_scale(
            ref_lum[usable], samp_lum[usable], samp_conf[usable],
            np.ones(np.count_nonzero(usable), dtype=bool))
    except mapper.ExposureEstimationError:
        return fallback


def run_sequence(seq, cfg: PipelineConfig | None = None, curve=None,
                 pcf=None, progress=None) -> PipelineResult:
    """Track and fuse every frame of a loaded sequence.

    `curve` and `pcf` (a calibration) are required for the radiance
    objectives and ignored by the intensity baselines.
    """
    cfg = cfg or PipelineConfig()
    radiance_mode = uses_radiance(cfg.tracker.objective)
    if radiance_mode and (curve is None or pcf is None):
        raise ValueError("radiance objectives need a response curve and "
                         "confidence table")
    if len(seq) == 0:
        raise ValueError("empty sequence")

    camera = seq.camera
    volume = TsdfVolume.create(cfg.mapper)
    poses = []
    records = []
    snapshots = {}
    diverged = False
    pred = None
    ref_view = None
    scale = 1.0

    for i, frame in enumerate(seq.frames):
        rf, normalized, live_view = _live_state(camera, frame, cfg, curve, pcf)

        if i == 0:
            pose = Pose.identity()
            converged = True
            cost = 0.0
            scale = 1.0
        else:
            init = Pose.identity()
            result = tracker.track_frame(ref_view, live_view, cfg.tracker,
                                         init=init)
            converged = result.converged
            cost = result.cost
            if converged:
                t_lr = result.pose
                pose = poses[-1].compose(t_lr.inverse())
            else:
                pose = poses[-1]
                diverged = True

        integrated = False
        if converged:
            if i > 0 and radiance_mode and cfg.estimate_exposure \
                    and not cfg.frame_to_frame:
                scale = _compensate_exposure(
                    camera, pred, rf, frame.depth, result.pose,
                    cfg.tracker.depth_gate_m, fallback=scale)
            rf_fused = rf.scaled(scale) if scale != 1.0 else rf
            mapper.integrate(volume, camera, pose.inverse(), frame.depth,
                             radiance_frame=rf_fused, normalized=normalized,
                             cfg=cfg.mapper)
            integrated = True

        poses.append(pose)

        if cfg.frame_to_frame:
            ref_view = live_view
            last = i == len(seq.frames) - 1
            if last or (cfg.snapshot_every
                        and i % cfg.snapshot_every == 0):
                pred = mapper.raycast(volume, camera, pose, cfg=cfg.mapper)
        elif integrated or pred is None:
            pred = mapper.raycast(volume, camera, pose, cfg=cfg.mapper)
            ref_view = _model_state(camera, pred, cfg)

        if cfg.snapshot_every and i % cfg.snapshot_every == 0:
            snapshots[i] = pred

        record = FrameRecord(index=i, pose=pose, converged=converged,
                             integrated=integrated, exposure_scale=scale,
                             cost=cost)
        records.append(record)
        if progress is not None:
            progress(record)

    return PipelineResult(poses=poses, records=records, volume=volume,
                          prediction=pred, snapshots=snapshots,
                          diverged=diverged)

"""Trajectory and reconstruction quality metrics."""

import json

import numpy as np

from .se3 import Pose

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def align_first_pose(estimated, reference):
    """Map estimated poses into the reference frame via the first pose pair."""
    if len(estimated) == 0 or len(estimated) != len(reference):
        raise ValueError("trajectories must be equal length and non-empty")
    t_align = reference[0].compose(estimated[0].inverse())
    return [t_align.compose(p) for p in estimated]


def trajectory_errors(estimated, reference):
    """Per-frame rotation (deg) and translation (m) errors after alignment.

    Returns (rot_deg, trans_m) arrays of length n.
    """
    aligned = align_first_pose(estimated, reference)
    rot = np.empty(len(aligned))
    trans = np.empty(len(aligned))
    for i, (a, b) in enumerate(zip(aligned, reference)):
        delta = a.inverse().compose(b)
        rot[i] = np.degrees(delta.rotation_angle())
        trans[i] = np.linalg.norm(a.translation - b.translation)
    return rot, trans


def ate_rmse(estimated, reference) -> float:
    _, trans = trajectory_errors(estimated, reference)
    return float(np.sqrt(np.mean(trans ** 2)))


def summarize(estimated, reference) -> dict:
    rot, trans = trajectory_errors(estimated, reference)
    return {
        "n_frames": len(trans),
        "ate_rmse_m": float(np.sqrt(np.mean(trans ** 2))),
        "max_trans_err_m": float(trans.max()),
        "final_drift_m": float(trans[-1]),
        "mean_rot_err_deg": float(rot.mean()),
        "max_rot_err_deg": float(rot.max()),
    }


def write_error_report(csv_path, json_path, estimated, reference):
    rot, trans = trajectory_errors(estimated, reference)
    with open(csv_path, "w") as fh:
        fh.write("frame,rot_err_deg,trans_err_m\n")
        for i in range(len(rot)):
            fh.write("%d,%.6f,%.6f\n" % (i, rot[i], trans[i]))
    with open(json_path, "w") as fh:
        json.dump(summarize(estimated, reference), fh, indent=2)
        fh.write("\n")


def luminance(rgb):
    return rgb @ LUMA_WEIGHTS


def tone_map(radiance, key: float = 0.18):
    """Global photographic operator; returns a displayable uint8 image."""
    lum = luminance(radiance)
    pos = lum > 0
    if not np.any(pos):
        return np.zeros(radiance.shape, dtype=np.uint8)
    log_mean = np.exp(np.mean(np.log(lum[pos] + 1e-12)))
    scaled = key / log_mean * lum
    mapped = scaled / (1.0 + scaled)
    gain = np.where(lum > 0, mapped / np.maximum(lum, 1e-12), 0.0)
    out = np.clip(radiance * gain[..., None], 0.0, 1.0)
    return np.round(255.0 * out ** (1.0 / 2.2)).astype(np.uint8)


def fit_scale(estimated, reference) -> float:
    """Least-squares global scale s so that s * estimated matches reference."""
    denom = float(np.sum(estimated * estimated))
    if denom <= 0:
        raise ValueError("estimated radiance is identically zero")
    return float(np.sum(estimated * reference) / denom)


def radiance_error(estimated, reference, mask=None):
    """Relative RMS residual after one global scale fit.

    Returns (rel_rms, scale). `mask` selects pixels; channels of selected
    pixels all contribute.
    """
    if mask is not None:
        estimated = estimated[mask]
        reference = reference[mask]
    est = np.asarray(estimated, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.size == 0:
        raise ValueError("no pixels selected")
    s = fit_scale(est, ref)
    rms = np.sqrt(np.mean((s * est - ref) ** 2))
    ref_rms = np.sqrt(np.mean(ref ** 2))
    return float(rms / max(ref_rms, 1e-12)), s

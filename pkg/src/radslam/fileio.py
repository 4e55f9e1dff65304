"""File-format primitives shared across modules.

PNG for LDR color and 16-bit millimeter depth, PFM for HDR maps, ASCII PLY
for point clouds, plain text for trajectories (timestamp tx ty tz qx qy qz qw,
camera-to-world).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .se3 import Pose


def write_png_rgb(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected uint8 HxWx3 image")
    Image.fromarray(image, mode="RGB").save(path)


def read_png_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_png_depth16(path, depth_m: np.ndarray) -> None:
    """Depth in meters stored as 16-bit millimeters (0 = invalid)."""
    mm = np.clip(np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_png_depth16(path) -> np.ndarray:
    with Image.open(path) as img:
        mm = np.asarray(img, dtype=np.float64)
    return (mm / 1000.0).astype(np.float32)


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM, color (PF) or grayscale (Pf); rows stored bottom-up."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf\n"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError("PFM supports HxW or HxWx3 float images")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(image[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1]).astype(np.float32)


def write_ply(path, positions: np.ndarray, normals: np.ndarray, radiance: np.ndarray) -> None:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    radiance = np.asarray(radiance, dtype=np.float64).reshape(-1, 3)
    if not (len(positions) == len(normals) == len(radiance)):
        raise ValueError("positions, normals and radiance must have equal length")
    n = len(positions)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz",
                     "radiance_r", "radiance_g", "radiance_b"):
            f.write(f"property float {name}\n")
        f.write("end_header\n")
        rows = np.hstack([positions, normals, radiance])
        for row in rows:
            f.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def read_ply(path) -> np.ndarray:
    """Return the vertex data block as an (N, 9) float array."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError("not a PLY file")
        n = None
        while True:
            line = f.readline().strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        rows = [[float(v) for v in f.readline().split()] for _ in range(n)]
    return np.array(rows, dtype=np.float64)


def write_trajectory(path, timestamps, poses) -> None:
    """Camera-to-world poses, one 'timestamp tx ty tz qx qy qz qw' line each."""
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # (x, y, z, w)
            t = pose.translation
            f.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_trajectory(path):
    timestamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValueError(f"bad trajectory line: {line!r}")
            timestamps.append(vals[0])
            R = Rotation.from_quat(vals[4:8]).as_matrix()
            poses.append(Pose(R, np.array(vals[1:4])))
    return timestamps, poses


def write_exposures(path, exposures_ms) -> None:
    with open(path, "w") as f:
        f.write("index,exposure_ms\n")
        for i, e in enumerate(exposures_ms):
            f.write(f"{i},{e:.6f}\n")


def read_exposures(path) -> list[float]:
    exposures = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("index"):
            raise ValueError("exposure file missing header")
        for line in f:
            line = line.strip()
            if line:
                exposures.append(float(line.split(",")[1]))
    return exposures


def write_camera_json(path, cam) -> None:
    payload = {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def read_camera_json(path) -> dict:
    return json.loads(Path(path).read_text())


def pack_volume_header(dims, voxel_size, origin, truncation) -> bytes:
    return struct.pack(
        "<3I f 3f f",
        int(dims[0]), int(dims[1]), int(dims[2]),
        float(voxel_size),
        float(origin[0]), float(origin[1]), float(origin[2]),
        float(truncation),
    )


def unpack_volume_header(blob: bytes):
    vals = struct.unpack("<3I f 3f f", blob)
    return (vals[0], vals[1], vals[2]), vals[3], np.array(vals[4:7]), vals[7]


VOLUME_HEADER_SIZE = struct.calcsize("<3I f 3f f")

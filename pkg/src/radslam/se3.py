"""Rigid-body transforms and the twist parameterization used by the tracker.

Twist layout is rotation-first: xi = (wx, wy, wz, vx, vy, vz).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    S = hat(w)
    if theta < 1e-8:
        # second-order Taylor keeps the result orthonormal to machine precision
        return np.eye(3) + S + 0.5 * (S @ S)
    return (
        np.eye(3)
        + S * (np.sin(theta) / theta)
        + (S @ S) * ((1.0 - np.cos(theta)) / theta**2)
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if theta > np.pi - 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from R + I
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        axis = A[:, k] / max(axis[k], _EPS)
        axis /= max(np.linalg.norm(axis), _EPS)
        return theta * axis
    return (
        np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        * 0.5
        * theta
        / np.sin(theta)
    )


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    S = hat(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    return (
        np.eye(3)
        + S * ((1.0 - np.cos(theta)) / theta**2)
        + (S @ S) * ((theta - np.sin(theta)) / theta**3)
    )


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    S = hat(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * S + (S @ S) / 12.0
    return (
        np.eye(3)
        - 0.5 * S
        + (S @ S) * (1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
    )


@dataclass
class Pose:
    """Rigid transform x_out = R @ x_in + t.

    In the tracker it maps reference-frame points into the live frame; in the
    mapper and trajectory files it is used both ways (camera-to-world and its
    inverse), always with the same composition semantics.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def exp(twist: np.ndarray) -> "Pose":
        """SE(3) exponential of a twist (w, v)."""
        twist = np.asarray(twist, dtype=np.float64).reshape(6)
        w, v = twist[:3], twist[3:]
        return Pose(so3_exp(w), _left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        w = so3_log(self.rotation)
        v = _left_jacobian_inv(w) @ self.translation
        return np.concatenate([w, v])

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other)(x) = self(other(x))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or a single 3-vector."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        return float(np.linalg.norm(so3_log(self.rotation)))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, float(np.linalg.det(U @ Vt))])
    return U @ D @ Vt

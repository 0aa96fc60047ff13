"""Rigid transforms, pinhole projection, rays and pose-error metrics.

Camera frame follows the OpenCV convention: x right, y down, z forward.
Poses are camera-to-world; ``translation`` is the camera center.
Continuous pixel coordinates put the center of pixel ``(u, v)`` at
``(u + 0.5, v + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import EmptyInput, NonPositiveDepth, OutOfBounds

_DEPTH_EPS = 1e-12


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = A[np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform.

    ``rotation`` is a scalar-first unit quaternion, ``translation`` the
    camera center in world coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("rotation quaternion must be nonzero and finite")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t.copy())
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "CameraPose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_world_to_camera(cls, R_wc: np.ndarray, t_wc: np.ndarray) -> "CameraPose":
        R = np.asarray(R_wc).T
        return cls.from_matrix(R, -R @ np.asarray(t_wc))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_matrix(np.stack([x, y, z], axis=1), eye)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        R = self.R
        return R.T, -R.T @ self.translation

    def inverse(self) -> "CameraPose":
        R_wc, t_wc = self.world_to_camera()
        return CameraPose.from_matrix(R_wc, t_wc)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other`` as transforms: apply ``other`` first."""
        R = self.R @ other.R
        t = self.R @ other.translation + self.translation
        return CameraPose.from_matrix(R, t)

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.translation

    def perturbed(self, tangent: np.ndarray) -> "CameraPose":
        """Right-multiply by the exponential of a (rotation, translation) tangent."""
        tangent = np.asarray(tangent, dtype=np.float64)
        delta = CameraPose.from_matrix(so3_exp(tangent[:3]), tangent[3:])
        return self.compose(delta)

    def almost_equal(self, other: "CameraPose", tol: float = 1e-9) -> bool:
        t_err, r_err = pose_errors(self, other)
        return t_err <= tol and np.deg2rad(r_err) <= tol

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"CameraPose(q=[{q}], t=[{t}])"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
        )

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        p = np.asarray(pixels)
        return (p[..., 0] >= 0) & (p[..., 0] < self.width) & (p[..., 1] >= 0) & (p[..., 1] < self.height)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: np.ndarray

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def project_points(points: np.ndarray, pose: CameraPose, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(pixels, depths)``; no depth check."""
    R_wc, t_wc = pose.world_to_camera()
    pc = np.asarray(points, dtype=np.float64) @ R_wc.T + t_wc
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[..., 0] / z + K.cx
        v = K.fy * pc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project(point: Sequence[float], pose: CameraPose, K: CameraIntrinsics) -> np.ndarray:
    pixels, z = project_points(np.asarray(point, dtype=np.float64)[None], pose, K)
    if z[0] <= _DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {z[0]:.3g} is not positive")
    return pixels[0]


def pixel_directions(pixels: np.ndarray, pose: CameraPose, K: CameraIntrinsics) -> np.ndarray:
    """Unit world-frame directions through continuous pixel coordinates."""
    p = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(p[..., 0] - K.cx) / K.fx, (p[..., 1] - K.cy) / K.fy, np.ones(p.shape[:-1])], axis=-1)
    d = d_cam @ pose.R.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(pixel: Sequence[float], pose: CameraPose, K: CameraIntrinsics) -> Ray:
    p = np.asarray(pixel, dtype=np.float64).reshape(2)
    if not K.contains(p):
        raise OutOfBounds(f"pixel {tuple(p)} outside {K.width}x{K.height} image")
    return Ray(pose.center.copy(), pixel_directions(p, pose, K), p)


def patch_centers(K: CameraIntrinsics, stride: int) -> np.ndarray:
    """Row-major ``(H/stride * W/stride, 2)`` continuous pixel coordinates of patch centers."""
    xs = np.arange(K.width // stride) * stride + stride / 2.0
    ys = np.arange(K.height // stride) * stride + stride / 2.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def pose_errors(estimate: CameraPose, truth: CameraPose) -> tuple[float, float]:
    """Camera-center distance and relative rotation angle in degrees."""
    t_err = float(np.linalg.norm(estimate.center - truth.center))
    R_rel = estimate.R.T @ truth.R
    # atan2 of the skew and trace parts keeps precision near zero, where arccos bottoms out at ~1e-6 deg
    sin = 0.5 * np.linalg.norm([R_rel[2, 1] - R_rel[1, 2], R_rel[0, 2] - R_rel[2, 0], R_rel[1, 0] - R_rel[0, 1]])
    cos = (np.trace(R_rel) - 1.0) / 2.0
    return t_err, float(np.degrees(np.arctan2(sin, cos)))


def recall(errors: Iterable[tuple[float, float]], t_thresh: float, r_thresh: float) -> float:
    errs = np.asarray(list(errors), dtype=np.float64).reshape(-1, 2)
    if len(errs) == 0:
        raise EmptyInput("recall needs at least one error entry")
    if t_thresh <= 0 or r_thresh <= 0:
        raise ValueError("thresholds must be positive")
    ok = (errs[:, 0] < t_thresh) & (errs[:, 1] < r_thresh)
    return float(ok.mean())


# -- torch helpers for differentiable pose updates ---------------------------

def so3_exp_torch(omega: torch.Tensor) -> torch.Tensor:
    theta2 = (omega * omega).sum()
    zero = torch.zeros((), dtype=omega.dtype)
    K = torch.stack([
        torch.stack([zero, -omega[2], omega[1]]),
        torch.stack([omega[2], zero, -omega[0]]),
        torch.stack([-omega[1], omega[0], zero]),
    ])
    eye = torch.eye(3, dtype=omega.dtype)
    if theta2 < 1e-12:
        # Taylor terms keep the derivative exact at the origin
        return eye + K + 0.5 * K @ K
    theta = torch.sqrt(theta2)
    return eye + torch.sin(theta) / theta * K + (1 - torch.cos(theta)) / theta2 * K @ K


def perturbed_pose_torch(pose: CameraPose, tangent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Camera-to-world ``(R, t)`` of ``pose * exp(tangent)`` as differentiable tensors."""
    R0 = torch.tensor(pose.R, dtype=tangent.dtype)
    t0 = torch.tensor(np.array(pose.translation), dtype=tangent.dtype)
    dR = so3_exp_torch(tangent[:3])
    return R0 @ dR, R0 @ tangent[3:] + t0

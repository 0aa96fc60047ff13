"""Absolute pose from 2D-3D correspondences: P3P inside RANSAC with a Gauss-Newton polish."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus, TooFewMatches
from .geometry import CameraIntrinsics, CameraPose, so3_exp


@dataclass
class RansacConfig:
    reproj_threshold_px: float = 3.0
    max_iterations: int = 1000
    confidence: float = 0.999
    min_inliers: int = 6
    seed: int = 0
    refine_iterations: int = 10

    def __post_init__(self):
        if self.reproj_threshold_px <= 0:
            raise ValueError("reprojection threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class PoseEstimate:
    pose: CameraPose
    inliers: np.ndarray
    mean_reprojection_error: float
    iterations: int


def bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    b = np.stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy, np.ones(len(p))], -1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _check_degenerate(X: np.ndarray) -> None:
    edges = [np.linalg.norm(X[1] - X[0]), np.linalg.norm(X[2] - X[0]), np.linalg.norm(X[2] - X[1])]
    scale = max(edges)
    if min(edges) <= 1e-9 * max(scale, 1.0):
        raise DegenerateConfiguration("coincident 3D points")
    area2 = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    if area2 <= 1e-9 * scale * scale:
        raise DegenerateConfiguration("collinear 3D points")


def _absolute_orientation(P_cam: np.ndarray, P_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``R, t`` with ``P_cam ~= R @ P_world + t`` (Kabsch)."""
    mc, mw = P_cam.mean(0), P_world.mean(0)
    H = (P_world - mw).T @ (P_cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mc - R @ mw


def _real_roots(coeffs: np.ndarray) -> np.ndarray:
    roots = np.roots(coeffs)
    real = roots[np.abs(roots.imag) < 1e-6 * np.maximum(1.0, np.abs(roots.real))].real
    # Newton polish on the quartic
    dcoeffs = np.polyder(coeffs)
    for _ in range(5):
        d = np.polyval(dcoeffs, real)
        ok = np.abs(d) > 1e-14
        real[ok] -= np.polyval(coeffs, real[ok]) / d[ok]
    return real


def p3p(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics) -> list[CameraPose]:
    """Grunert's solution: up to four camera-to-world poses from three correspondences."""
    X = np.asarray(points, dtype=np.float64).reshape(3, 3)
    _check_degenerate(X)
    f = bearings(np.asarray(pixels).reshape(3, 2), K)

    a = np.linalg.norm(X[1] - X[2])
    b = np.linalg.norm(X[0] - X[2])
    c = np.linalg.norm(X[0] - X[1])
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]
    a2, b2, c2 = a * a, b * b, c * c
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2

    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca * ca
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb)
    A2 = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg * cg

    poses = []
    for v in _real_roots(np.array([A4, A3, A2, A1, A0])):
        if v <= 0:
            continue
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1_sq = c2 / (1 + u * u - 2 * u * cg)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        P_cam = np.stack([s1 * f[0], u * s1 * f[1], v * s1 * f[2]])
        R, t = _absolute_orientation(P_cam, X)
        poses.append(CameraPose.from_world_to_camera(R, t))
    # six residuals, six unknowns: Gauss-Newton converges to the exact root
    pix = np.asarray(pixels, dtype=np.float64).reshape(3, 2)
    polished = []
    for pose in poses:
        pose = refine_pose(pose, pix, X, K, iterations=5, tol=0.0)
        if reprojection_errors(pose, pix, X, K).max() < 1e-6:
            polished.append(pose)
    return polished


def reprojection_errors(pose: CameraPose, pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixel errors; points behind the camera get ``inf``."""
    R, t = pose.world_to_camera()
    pc = points @ R.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(z > 1e-9, err, np.inf)


def refine_pose(pose: CameraPose, pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics,
                iterations: int = 10, tol: float = 1e-10) -> CameraPose:
    """Gauss-Newton on reprojection residuals with a left (rotation, translation) update."""
    R, t = pose.world_to_camera()
    for _ in range(iterations):
        pc = points @ R.T + t
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        if (z <= 1e-9).any():
            break
        r = np.concatenate([K.fx * x / z + K.cx - pixels[:, 0], K.fy * y / z + K.cy - pixels[:, 1]])
        n = len(z)
        J = np.zeros((2 * n, 6))
        # d(pc)/d(omega) = -[pc]_x, d(pc)/d(v) = I
        du = np.stack([K.fx / z, np.zeros(n), -K.fx * x / z**2], -1)
        dv = np.stack([np.zeros(n), K.fy / z, -K.fy * y / z**2], -1)
        for rows, dp in ((slice(0, n), du), (slice(n, 2 * n), dv)):
            J[rows, 3:] = dp
            J[rows, :3] = np.cross(pc, dp)
        H = J.T @ J
        g = J.T @ r
        try:
            step = -np.linalg.solve(H + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        dR = so3_exp(step[:3])
        R = dR @ R
        t = dR @ t + step[3:]
        if np.linalg.norm(step) < tol:
            break
    return CameraPose.from_world_to_camera(R, t)


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    w = inlier_ratio ** sample_size
    if w <= 0:
        return math.inf
    if w >= 1:
        return 1
    return math.log(1 - confidence) / math.log(1 - w)


def ransac_pnp(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics, config: RansacConfig | None = None) -> PoseEstimate:
    cfg = config or RansacConfig()
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pixels)
    if n < 4:
        raise TooFewMatches(f"{n} matches; need at least 4")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.reproj_threshold_px
    best_count, best_err, best_pose = -1, math.inf, None
    limit = cfg.max_iterations
    it = 0
    while it < limit:
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            candidates = p3p(pixels[idx], points[idx], K)
        except DegenerateConfiguration:
            continue
        for cand in candidates:
            err = reprojection_errors(cand, pixels, points, K)
            inl = err < thr
            count = int(inl.sum())
            mean_err = float(err[inl].mean()) if count else math.inf
            if count > best_count or (count == best_count and mean_err < best_err):
                best_count, best_err, best_pose = count, mean_err, cand
                limit = min(cfg.max_iterations, max(it, math.ceil(_required_iterations(count / n, cfg.confidence))))
    if best_pose is None or best_count < cfg.min_inliers:
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} inliers; need {cfg.min_inliers}")

    pose = best_pose
    inliers = np.flatnonzero(reprojection_errors(pose, pixels, points, K) < thr)
    for _ in range(3):
        refined = refine_pose(pose, pixels[inliers], points[inliers], K, cfg.refine_iterations)
        new_inliers = np.flatnonzero(reprojection_errors(refined, pixels, points, K) < thr)
        if len(new_inliers) < cfg.min_inliers:
            break
        pose = refined
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    err = reprojection_errors(pose, pixels, points, K)
    inliers = np.flatnonzero(err < thr)
    if len(inliers) < cfg.min_inliers:
        raise NoConsensus(f"{len(inliers)} inliers after refit; need {cfg.min_inliers}")
    return PoseEstimate(pose, inliers, float(err[inliers].mean()), it)

"""Pose refinement: iterative re-matching and photometric optimization through a frozen field."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateConfiguration, LowOpacityScene, NoConsensus, TooFewMatches
from .field import SceneField
from .geometry import CameraIntrinsics, CameraPose, patch_centers, perturbed_pose_torch, pose_errors
from .matcher import MatchSet, NerfMatcher, encode_image, prepare_scene_features
from .pose_solver import PoseEstimate, RansacConfig, ransac_pnp
from .rendering import render_rays

log = logging.getLogger(__name__)

MODES = ("iterative", "optimize-then-match", "off")


@dataclass
class RefineConfig:
    mode: str = "iterative"
    rounds: int = 1
    opt_steps_per_round: int = 10
    lr_full: float = 1e-5
    lr_mini: float = 1e-3
    lr_decay: float = 0.9
    rays_for_photometric: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rounds < 0 or self.opt_steps_per_round < 0:
            raise ValueError("rounds and opt_steps_per_round must be >= 0")
        if self.lr_full <= 0 or self.lr_mini <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.rays_for_photometric < 1:
            raise ValueError("rays_for_photometric must be >= 1")

    def lr_for(self, variant: str) -> float:
        return self.lr_full if variant == "full" else self.lr_mini


def default_mode(variant: str) -> str:
    """Iterative re-matching for the full matcher, optimize-then-match for the mini one."""
    return "iterative" if variant == "full" else "optimize-then-match"


@dataclass
class RefinementTrace:
    """Pose after each round (index 0 is the initial pose)."""

    poses: list[CameraPose] = field(default_factory=list)
    errors: list[tuple[float, float]] | None = None
    losses: list[float] = field(default_factory=list)
    status: list[str] = field(default_factory=list)

    def record(self, pose: CameraPose, status: str, truth: CameraPose | None = None) -> None:
        self.poses.append(pose)
        self.status.append(status)
        if truth is not None:
            if self.errors is None:
                self.errors = []
            self.errors.append(pose_errors(pose, truth))

    def to_dict(self) -> dict:
        return {
            "poses": [[*p.rotation.tolist(), *p.translation.tolist()] for p in self.poses],
            "errors": None if self.errors is None else [list(e) for e in self.errors],
            "losses": list(self.losses),
            "status": list(self.status),
        }


@dataclass
class MatchOutcome:
    estimate: PoseEstimate | None
    matches: MatchSet
    n_points: int
    failure: str | None = None


def ransac_for(matcher: NerfMatcher, base: RansacConfig | None) -> RansacConfig:
    """Coarse-only matches sit on patch centers, so their inlier threshold grows with the stride."""
    cfg = base or RansacConfig()
    if matcher.fine is None:
        thr = max(cfg.reproj_threshold_px, float(matcher.config.stride))
        cfg = RansacConfig(thr, cfg.max_iterations, cfg.confidence, cfg.min_inliers, cfg.seed, cfg.refine_iterations)
    return cfg


def match_and_solve(query_image, K: CameraIntrinsics, reference: CameraPose, field_: SceneField,
                    matcher: NerfMatcher, ransac: RansacConfig | None = None, appearance_id=None,
                    pyramid=None) -> MatchOutcome:
    """Render scene points at ``reference``, match the query against them and solve PnP."""
    mc = matcher.config
    try:
        pts = prepare_scene_features(reference, K, field_, mc.feature_source, mc.stride, mc.opacity_threshold,
                                     appearance_id=appearance_id)
    except LowOpacityScene as exc:
        return MatchOutcome(None, MatchSet.empty(), 0, f"LowOpacityScene: {exc}")
    with torch.no_grad():
        pyr = pyramid if pyramid is not None else encode_image(query_image, matcher.encoder)
        matches = matcher.match_pyramid(pyr, pts)
    try:
        est = ransac_pnp(matches.pixels, matches.points3d, K, ransac_for(matcher, ransac))
    except (TooFewMatches, NoConsensus, DegenerateConfiguration) as exc:
        return MatchOutcome(None, matches, len(pts), f"{type(exc).__name__}: {exc}")
    return MatchOutcome(est, matches, len(pts))


def refine_iterative(initial: CameraPose, query_image, K: CameraIntrinsics, field_: SceneField, matcher: NerfMatcher,
                     rounds: int = 1, ransac: RansacConfig | None = None, appearance_id=None,
                     truth: CameraPose | None = None) -> tuple[CameraPose, RefinementTrace]:
    """Re-render at the latest estimate and re-match; a failed round keeps the previous pose."""
    trace = RefinementTrace()
    trace.record(initial, "initial", truth)
    pose = initial
    with torch.no_grad():
        pyr = encode_image(query_image, matcher.encoder)
    for _ in range(rounds):
        out = match_and_solve(query_image, K, pose, field_, matcher, ransac, appearance_id, pyr)
        if out.estimate is None:
            trace.record(pose, f"kept ({out.failure})", truth)
        else:
            pose = out.estimate.pose
            trace.record(pose, f"matched {len(out.estimate.inliers)} inliers", truth)
    return pose, trace


def _image_float(image) -> np.ndarray:
    arr = np.asarray(image)
    return arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)


def photometric_loss_at(pose: CameraPose, query_image, K: CameraIntrinsics, field_: SceneField,
                        stride: int = 2, appearance_id=None, mask=None) -> float:
    """Deterministic masked MSE between rendered and query colors on a regular pixel grid."""
    img = _image_float(query_image)
    pix = patch_centers(K, stride)
    cols = np.floor(pix[:, 0]).astype(int)
    rows = np.floor(pix[:, 1]).astype(int)
    target = img[rows, cols]
    keep = np.ones(len(pix), bool) if mask is None else ~np.asarray(mask, bool)[rows, cols]
    dtype = next(field_.parameters()).dtype
    with torch.no_grad():
        R, t = perturbed_pose_torch(pose, torch.zeros(6, dtype=dtype))
        rgb = _render_pixels(field_, R, t, pix[keep], K, appearance_id, None)
    return float(((rgb.double().numpy() - target[keep]) ** 2).mean())


def _render_pixels(field_: SceneField, R: torch.Tensor, t: torch.Tensor, pixels: np.ndarray, K: CameraIntrinsics,
                   appearance_id, generator) -> torch.Tensor:
    d_cam = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], -1)
    d_cam = torch.as_tensor(d_cam / np.linalg.norm(d_cam, axis=1, keepdims=True), dtype=R.dtype)
    dirs = d_cam @ R.T
    origins = t.expand_as(dirs)
    return render_rays(field_, origins, dirs, appearance_id=appearance_id, generator=generator).color


def refine_photometric(initial: CameraPose, query_image, K: CameraIntrinsics, field_: SceneField, steps: int = 10,
                       lr: float = 1e-3, lr_decay: float = 0.9, rays: int = 1024, seed: int = 0, appearance_id=None,
                       mask=None) -> tuple[CameraPose, list[float]]:
    """Adam on a right-multiplied (rotation, translation) tangent through the frozen field.

    Returns the optimized pose and the per-step loss on that step's ray subset.
    """
    img = _image_float(query_image)
    H, W = img.shape[:2]
    valid = np.ones((H, W), bool) if mask is None else ~np.asarray(mask, bool)
    flat = np.flatnonzero(valid.reshape(-1))
    params = list(field_.parameters())
    dtype = params[0].dtype
    was_training, flags = field_.training, [p.requires_grad for p in params]
    field_.eval()
    field_.requires_grad_(False)
    tangent = torch.zeros(6, dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([tangent], lr=lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=lr_decay)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    try:
        for _ in range(steps):
            sel = rng.choice(flat, min(rays, len(flat)), replace=False)
            r, c = np.divmod(sel, W)
            pix = np.stack([c + 0.5, r + 0.5], -1)
            target = torch.as_tensor(img[r, c], dtype=dtype)
            R, t = perturbed_pose_torch(initial, tangent)
            rgb = _render_pixels(field_, R, t, pix, K, appearance_id, gen)
            loss = ((rgb - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
        field_.train(was_training)
    return initial.perturbed(tangent.detach().double().numpy()), losses


def refine(initial: CameraPose, query_image, K: CameraIntrinsics, field_: SceneField, matcher: NerfMatcher,
           config: RefineConfig | None = None, ransac: RansacConfig | None = None, appearance_id=None,
           truth: CameraPose | None = None) -> tuple[CameraPose, RefinementTrace]:
    """Dispatch on ``config.mode``; optimize-then-match ends each round with one match and PnP."""
    cfg = config or RefineConfig(mode=default_mode(matcher.config.variant))
    if cfg.mode == "off" or cfg.rounds == 0:
        trace = RefinementTrace()
        trace.record(initial, "initial", truth)
        return initial, trace
    if cfg.mode == "iterative":
        return refine_iterative(initial, query_image, K, field_, matcher, cfg.rounds, ransac, appearance_id, truth)

    trace = RefinementTrace()
    trace.record(initial, "initial", truth)
    pose = initial
    with torch.no_grad():
        pyr = encode_image(query_image, matcher.encoder)
    for rnd in range(cfg.rounds):
        optimized, losses = refine_photometric(
            pose, query_image, K, field_, cfg.opt_steps_per_round, cfg.lr_for(matcher.config.variant), cfg.lr_decay,
            cfg.rays_for_photometric, cfg.seed + rnd, appearance_id,
        )
        trace.losses.extend(losses)
        out = match_and_solve(query_image, K, optimized, field_, matcher, ransac, appearance_id, pyr)
        if out.estimate is None:
            # matching failed at the optimized reference: fall back to the optimized pose itself
            pose = optimized
            trace.record(pose, f"optimized only ({out.failure})", truth)
        else:
            pose = out.estimate.pose
            trace.record(pose, f"optimized then matched {len(out.estimate.inliers)} inliers", truth)
    return pose, trace

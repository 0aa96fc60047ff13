"""Query localization: retrieve a reference pose, match against rendered scene points, solve, refine."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import AllEmpty, EmptyInput, DegenerateConfiguration, EmptyAfterFilter, LowOpacityScene, NoConsensus, TooFewMatches
from .field import SceneField
from .geometry import CameraIntrinsics, CameraPose, pose_errors, recall
from .matcher import NerfMatcher, encode_image, prepare_scene_features
from .pose_solver import RansacConfig, ransac_pnp
from .refinement import RefineConfig, RefinementTrace, match_and_solve, ransac_for, refine
from .retrieval import ReferenceDatabase, describe, merge_3d, merge_matches, topk

MERGE_MODES = ("none", "match", "3d")


@dataclass
class LocalizerConfig:
    topk: int = 1
    merge: str = "none"
    covis_min: int = 2
    # False: a failed initial solve is reported as a failure instead of continuing from the retrieved pose
    fallback_to_retrieval: bool = True
    refine: RefineConfig = field(default_factory=RefineConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.merge not in MERGE_MODES:
            raise ValueError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")


@dataclass
class LocalizationResult:
    query_id: str
    pose: CameraPose
    status: str
    references: list[str]
    n_matches: int
    n_inliers: int
    timings: dict[str, float]
    trace: RefinementTrace
    errors: tuple[float, float] | None = None
    initial_errors: tuple[float, float] | None = None
    localized: bool = True

    def to_record(self) -> dict:
        return {
            "query": self.query_id,
            "pose": [*self.pose.rotation.tolist(), *self.pose.translation.tolist()],
            "status": self.status,
            "localized": self.localized,
            "references": self.references,
            "n_matches": self.n_matches,
            "n_inliers": self.n_inliers,
            "timings": self.timings,
            "trace": self.trace.to_dict(),
            "t_err": None if self.errors is None else self.errors[0],
            "r_err": None if self.errors is None else self.errors[1],
            "init_t_err": None if self.initial_errors is None else self.initial_errors[0],
            "init_r_err": None if self.initial_errors is None else self.initial_errors[1],
        }


def _initial_estimate(image, K: CameraIntrinsics, refs: list[CameraPose], field_: SceneField, matcher: NerfMatcher,
                      cfg: LocalizerConfig, appearance_id, diameter: float):
    """Pose from matching against one reference or a merged set; returns ``(estimate, n_matches, failure)``."""
    with torch.no_grad():
        pyr = encode_image(image, matcher.encoder)
    if cfg.merge == "none" or len(refs) == 1:
        out = match_and_solve(image, K, refs[0], field_, matcher, cfg.ransac, appearance_id, pyr)
        return out.estimate, len(out.matches), out.failure
    mc = matcher.config
    sets = []
    for ref in refs:
        try:
            sets.append(prepare_scene_features(ref, K, field_, mc.feature_source, mc.stride, mc.opacity_threshold,
                                               appearance_id=appearance_id))
        except LowOpacityScene:
            continue
    try:
        if cfg.merge == "match":
            with torch.no_grad():
                matches = merge_matches([matcher.match_pyramid(pyr, pts) for pts in sets])
        else:
            covis = min(cfg.covis_min, len(sets))
            if not sets:
                raise EmptyAfterFilter("no reference produced opaque points")
            merged = merge_3d(sets, diameter, covis)
            with torch.no_grad():
                matches = matcher.match_pyramid(pyr, merged)
        est = ransac_pnp(matches.pixels, matches.points3d, K, ransac_for(matcher, cfg.ransac))
    except (AllEmpty, EmptyAfterFilter, TooFewMatches, NoConsensus, DegenerateConfiguration) as exc:
        return None, 0, f"{type(exc).__name__}: {exc}"
    return est, len(matches), None


def localize_query(query_id: str, image, K: CameraIntrinsics, db: ReferenceDatabase, field_: SceneField,
                   matcher: NerfMatcher, config: LocalizerConfig | None = None, appearance_id=None,
                   truth: CameraPose | None = None, diameter: float = 1.0) -> LocalizationResult:
    """Retrieval, matching and PnP, then optional refinement.

    A failed initial solve falls back to the top retrieved pose, from which
    refinement may still recover.
    """
    cfg = config or LocalizerConfig()
    timings = {}
    t0 = time.perf_counter()
    ranked = topk(describe(image, matcher), db, min(cfg.topk, len(db)))
    refs = [e.pose for e, _ in ranked]
    timings["retrieval"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    est, n_matches, failure = _initial_estimate(image, K, refs, field_, matcher, cfg, appearance_id, diameter)
    timings["matching"] = time.perf_counter() - t0
    if est is None and not cfg.fallback_to_retrieval:
        trace = RefinementTrace()
        trace.record(refs[0], f"failed ({failure})")
        fail = (math.inf, math.inf) if truth is not None else None
        return LocalizationResult(query_id, refs[0], f"failed ({failure})", [e.name for e, _ in ranked], n_matches, 0,
                                  timings, trace, fail, fail, localized=False)
    if est is None:
        initial, status, n_inl = refs[0], f"retrieval only ({failure})", 0
    else:
        initial, status, n_inl = est.pose, "matched", len(est.inliers)

    t0 = time.perf_counter()
    pose, trace = refine(initial, image, K, field_, matcher, cfg.refine, cfg.ransac, appearance_id, truth)
    timings["refinement"] = time.perf_counter() - t0
    return LocalizationResult(
        query_id, pose, status, [e.name for e, _ in ranked], n_matches, n_inl, timings, trace,
        errors=None if truth is None else pose_errors(pose, truth),
        initial_errors=None if truth is None else pose_errors(initial, truth),
    )


def summarize(errors: list[tuple[float, float]], t_thresh: float, r_thresh: float) -> dict[str, float]:
    """Median translation and rotation errors plus recall at ``(t_thresh, r_thresh)``."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if len(e) == 0:
        raise EmptyInput("no errors to summarize")
    return {"median_t": float(np.median(e[:, 0])), "median_r": float(np.median(e[:, 1])),
            "recall": recall(e, t_thresh, r_thresh), "n": int(len(e))}

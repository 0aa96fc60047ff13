"""Matcher training on covisible image pairs with rendered scene points."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import LowOpacityScene, MissingPairs, NoGroundTruth
from .field import SceneField, encoded_dim
from .matcher import (MatcherConfig, NerfMatcher, ScenePointSet, encode_batch, gt_associations, image_tensor,
                      pair_loss, prepare_scene_features, source_layer)
from .scene_data import SceneDataset, covisibility_pairs

log = logging.getLogger(__name__)

DEFAULT_LR = {"mini": 8e-4, "full": 4e-4}


@dataclass
class MatcherTrainConfig:
    epochs: int = 30
    pairs_per_epoch: int = 10000
    batch_size: int = 16
    # None picks the variant default (8e-4 mini, 4e-4 full)
    lr: float | None = None
    top_n: int = 20
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0 or self.pairs_per_epoch < 1 or self.batch_size < 1 or self.top_n < 1:
            raise ValueError("epochs >= 0, pairs_per_epoch, batch_size and top_n >= 1 required")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainingScene:
    """A dataset with its trained field; ``pairs`` overrides covisibility-derived pairs."""

    name: str
    dataset: SceneDataset
    field: SceneField
    pairs: list[tuple[str, str]] | None = None


@dataclass
class MatcherEpochLog:
    epoch: int
    coarse: float
    fine: float | None
    n_pairs: int


@dataclass
class MatcherTrainResult:
    matcher: NerfMatcher
    log: list[MatcherEpochLog] = field(default_factory=list)


def point_dim_for(source: str, field_: SceneField) -> int:
    """Width of the raw per-point feature for ``source`` on ``field_``."""
    if source_layer(source) is not None:
        return field_.config.feature_dim
    if source == "pe3d":
        return encoded_dim(3, field_.config.pe_x_bands)
    return 3


def matcher_config_for(field_: SceneField, variant: str = "mini", source: str = "f3", **overrides) -> MatcherConfig:
    """Matcher config whose dimensions fit the field's features."""
    source = source.lower()
    pdim = point_dim_for(source, field_)
    coarse = overrides.pop("coarse_dim", pdim if source_layer(source) is not None else 256)
    return MatcherConfig(variant=variant, feature_source=source, point_dim=pdim, coarse_dim=coarse, **overrides)


def scene_point_cache(scene: TrainingScene, cfg: MatcherConfig, ids: list[str]) -> dict[str, ScenePointSet]:
    """Rendered scene points per reference view; views below the opacity floor are skipped."""
    cache = {}
    ds = scene.dataset
    for i in ids:
        try:
            cache[i] = prepare_scene_features(
                ds.poses[i], ds.intrinsics[i], scene.field, cfg.feature_source, cfg.stride,
                cfg.opacity_threshold, appearance_id=ds.sequence_index(i),
            )
        except LowOpacityScene:
            log.warning("scene %s view %s: too few opaque points, skipped as reference", scene.name, i)
    return cache


def pair_pool(scene: TrainingScene, top_n: int) -> list[tuple[str, str]]:
    """``(query, reference)`` pairs from supplied pairs or per-image top covisible neighbors."""
    if scene.pairs is not None:
        pool = [(q, r) for q, r in scene.pairs if q != r]
    else:
        pool = [(q, r) for q, nbrs in covisibility_pairs(scene.dataset, top_n).items() for r, _ in nbrs]
    known = set(scene.dataset.poses)
    return [(q, r) for q, r in pool if q in known and r in known]


def sample_epoch_pairs(pools: list[list], n: int, mode: str, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Indices ``(scene, pair)`` for one epoch.

    ``per-scene`` draws up to ``n`` pairs without replacement from one pool.
    ``multi-scene`` draws exactly ``n`` per scene (with replacement when a
    pool is smaller) so every scene carries equal weight.
    """
    out = []
    for s, pool in enumerate(pools):
        if mode == "per-scene":
            idx = rng.permutation(len(pool))[:n]
        else:
            idx = rng.choice(len(pool), n, replace=len(pool) < n)
        out.extend((s, int(k)) for k in idx)
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def train_matcher(scenes: list[TrainingScene], variant: str = "mini", mode: str = "per-scene",
                  config: MatcherTrainConfig | None = None, seed: int = 0,
                  matcher_config: MatcherConfig | None = None) -> MatcherTrainResult:
    """Train a matcher; the mini variant sees the coarse loss only, the full one coarse plus fine."""
    cfg = config or MatcherTrainConfig()
    if mode not in ("per-scene", "multi-scene"):
        raise ValueError(f"mode must be 'per-scene' or 'multi-scene', got {mode!r}")
    if not scenes:
        raise ValueError("no training scenes")
    if mode == "per-scene" and len(scenes) != 1:
        raise ValueError("per-scene mode trains on exactly one scene")
    mcfg = matcher_config or matcher_config_for(scenes[0].field, variant)
    if mcfg.variant != variant:
        raise ValueError(f"matcher config variant {mcfg.variant!r} differs from {variant!r}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    matcher = NerfMatcher(mcfg)
    for sc in scenes:
        sc.field.requires_grad_(False)

    pools, caches, images = [], [], []
    for sc in scenes:
        pool = pair_pool(sc, cfg.top_n)
        refs = sorted({r for _, r in pool})
        cache = scene_point_cache(sc, mcfg, refs)
        pool = [(q, r) for q, r in pool if r in cache]
        if not pool:
            raise MissingPairs(f"scene {sc.name}: no usable training pairs")
        pools.append(pool)
        caches.append(cache)
        images.append({q: image_tensor(sc.dataset.images[q])[0] for q in sorted({q for q, _ in pool})})

    result = MatcherTrainResult(matcher)
    if cfg.epochs == 0:
        return result
    lr = cfg.lr if cfg.lr is not None else DEFAULT_LR[variant]
    opt = torch.optim.Adam([p for p in matcher.parameters() if p.requires_grad], lr=lr)
    per_epoch = sum(min(len(p), cfg.pairs_per_epoch) if mode == "per-scene" else cfg.pairs_per_epoch for p in pools)
    total = cfg.epochs * max(1, math.ceil(per_epoch / cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total, eta_min=0.0) if cfg.schedule == "cosine" else None

    matcher.train()
    for epoch in range(1, cfg.epochs + 1):
        chosen = sample_epoch_pairs(pools, cfg.pairs_per_epoch, mode, rng)
        sums = {"coarse": 0.0, "fine": 0.0}
        counted = 0
        for b in range(0, len(chosen), cfg.batch_size):
            batch = chosen[b:b + cfg.batch_size]
            pairs = [(s, *pools[s][k]) for s, k in batch]
            pyrs = encode_batch(matcher.encoder, torch.stack([images[s][q] for s, q, _ in pairs]))
            losses = []
            for (s, q, r), pyr in zip(pairs, pyrs):
                ds = scenes[s].dataset
                pts = caches[s][r]
                gt = gt_associations(pts, ds.poses[q], ds.intrinsics[q], mcfg.stride)
                try:
                    loss, parts = pair_loss(matcher, pyr, pts, gt)
                except NoGroundTruth:
                    continue
                losses.append(loss)
                sums["coarse"] += parts["coarse"]
                sums["fine"] += parts.get("fine", 0.0)
                counted += 1
            if not losses:
                continue
            opt.zero_grad(set_to_none=True)
            torch.stack(losses).mean().backward()
            opt.step()
            if sched is not None:
                sched.step()
        n = max(counted, 1)
        entry = MatcherEpochLog(epoch, sums["coarse"] / n, sums["fine"] / n if variant == "full" else None, counted)
        result.log.append(entry)
        log.info("epoch %d coarse %.4f fine %s pairs %d", epoch, entry.coarse, entry.fine, counted)
    matcher.eval()
    return result

"""Coarse localization by global-descriptor retrieval and multi-reference merging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllEmpty, EmptyAfterFilter, KTooLarge
from .field import SceneField
from .geometry import CameraIntrinsics, CameraPose
from .matcher import MatchSet, NerfMatcher, ScenePointSet
from .rendering import render_view
from .scene_data import SceneDataset

MAX_MERGED_POINTS = 3600


@dataclass
class GlobalDescriptor:
    vector: np.ndarray
    image_id: str | None = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("descriptor vector is zero")
        self.vector = v / n


@dataclass
class ReferenceEntry:
    name: str
    pose: CameraPose
    descriptor: GlobalDescriptor
    source: str


@dataclass
class ReferenceDatabase:
    entries: list[ReferenceEntry]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("reference database is empty")

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.stack([e.descriptor.vector for e in self.entries])


def describe(image, matcher: NerfMatcher, image_id: str | None = None) -> GlobalDescriptor:
    return GlobalDescriptor(matcher.describe(image), image_id)


def build_database(dataset: SceneDataset, matcher: NerfMatcher, ids: list[str] | None = None, source: str = "real",
                   field_: SceneField | None = None) -> ReferenceDatabase:
    """Descriptors of training images (``real``) or of field renders at the same poses (``synthesized``)."""
    ids = list(dataset.train_ids) if ids is None else list(ids)
    if source not in ("real", "synthesized"):
        raise ValueError(f"source must be 'real' or 'synthesized', got {source!r}")
    if source == "synthesized" and field_ is None:
        raise ValueError("a synthesized database needs a trained field")
    entries = []
    for i in ids:
        pose, K = dataset.poses[i], dataset.intrinsics[i]
        if source == "real":
            image = dataset.images[i]
        else:
            image = synthesize_view(pose, K, field_, dataset.sequence_index(i))
        entries.append(ReferenceEntry(i, pose, describe(image, matcher, i), source))
    return ReferenceDatabase(entries)


def synthesize_view(pose: CameraPose, K: CameraIntrinsics, field_: SceneField, appearance_id=None) -> np.ndarray:
    view = render_view(pose, K, 1, field_, appearance_id=appearance_id)
    return np.clip(view.image(), 0.0, 1.0).astype(np.float32)


def topk(query: GlobalDescriptor, db: ReferenceDatabase, k: int = 1) -> list[tuple[ReferenceEntry, float]]:
    """``k`` entries by descending cosine similarity; equal scores keep database order."""
    if not 1 <= k <= len(db):
        raise KTooLarge(f"k={k} outside [1, {len(db)}]")
    sims = db.matrix() @ query.vector
    order = sorted(range(len(db)), key=lambda i: (-sims[i], i))[:k]
    return [(db.entries[i], float(sims[i])) for i in order]


def merge_matches(sets: list[MatchSet]) -> MatchSet:
    """Union of correspondences; a repeated (pixel, 3D point) pair keeps its highest score."""
    nonempty = [m for m in sets if len(m)]
    if not nonempty:
        raise AllEmpty("every reference produced an empty match set")
    best: dict[tuple, tuple[float, int, int]] = {}
    for s, m in enumerate(nonempty):
        for k in range(len(m)):
            key = (*np.round(m.pixels[k], 6).tolist(), *np.round(m.points3d[k], 9).tolist())
            if key not in best or m.scores[k] > best[key][0]:
                best[key] = (float(m.scores[k]), s, k)
    picks = sorted(((s, k) for _, s, k in best.values()))
    with_var = all(m.variances is not None for m in nonempty)
    cat = lambda f: np.array([getattr(nonempty[s], f)[k] for s, k in picks])  # noqa: E731
    return MatchSet(
        image_idx=cat("image_idx").astype(np.int64),
        point_idx=np.arange(len(picks), dtype=np.int64),
        scores=cat("scores").astype(np.float64),
        pixels=cat("pixels").reshape(-1, 2),
        points3d=cat("points3d").reshape(-1, 3),
        variances=cat("variances") if with_var else None,
        stage=nonempty[0].stage,
    )


def merge_3d(sets: list[ScenePointSet], diameter: float, covis_min: int = 2, cap: int = MAX_MERGED_POINTS,
             seed: int = 0) -> ScenePointSet:
    """Voxel-cluster points from several references; keep clusters seen by ``covis_min`` references.

    Cluster position, feature and opacity are means over member points.
    """
    if covis_min < 1:
        raise ValueError("covis_min must be >= 1")
    if covis_min > len(sets):
        raise ValueError(f"covis_min={covis_min} needs at least that many references, got {len(sets)}")
    voxel = diameter / 256.0
    pts = np.concatenate([s.points for s in sets])
    feats = np.concatenate([s.features for s in sets])
    opac = np.concatenate([s.opacities for s in sets])
    owner = np.concatenate([np.full(len(s), k) for k, s in enumerate(sets)])
    keys = np.floor(pts / voxel).astype(np.int64)
    _, cluster, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    cluster = cluster.reshape(-1)
    n_clusters = len(counts)
    seen = np.zeros((n_clusters, len(sets)), bool)
    seen[cluster, owner] = True
    keep = np.flatnonzero(seen.sum(1) >= covis_min)
    if len(keep) == 0:
        raise EmptyAfterFilter(f"no voxel observed by >= {covis_min} references")
    if len(keep) > cap:
        keep = np.sort(np.random.default_rng(seed).choice(keep, cap, replace=False))

    def mean(x):
        out = np.zeros((n_clusters, *x.shape[1:]))
        np.add.at(out, cluster, x)
        return out / counts.reshape(-1, *([1] * (x.ndim - 1)))

    return ScenePointSet(mean(pts)[keep], mean(feats)[keep], mean(opac)[keep], sets[0].source)

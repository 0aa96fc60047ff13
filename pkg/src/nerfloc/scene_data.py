"""Scene datasets: synthetic generation, on-disk layout, covisibility pairs.

On-disk layout::

    images/<id>.png
    poses.txt            id qw qx qy qz tx ty tz   (camera-to-world)
    intrinsics.txt       id fx fy cx cy w h        (or one shared "* ..." line)
    masks/<id>.png       optional, nonzero = excluded from training
    sequences.txt        id sequence
    splits/train.txt     one id per line
    splits/test.txt
    meta.txt             near far diameter
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MalformedLine, MissingPoses
from .geometry import CameraIntrinsics, CameraPose, patch_centers, pixel_directions, project_points


@dataclass
class SceneDataset:
    ids: list[str]
    images: dict[str, np.ndarray]
    poses: dict[str, CameraPose]
    intrinsics: dict[str, CameraIntrinsics]
    sequences: dict[str, str]
    train_ids: list[str]
    test_ids: list[str]
    near: float
    far: float
    diameter: float
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    # analytic depth maps, only present for generated scenes
    depths: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        missing = [i for i in self.ids if i not in self.poses]
        if missing:
            raise MissingPoses(f"no pose for image ids {missing[:5]}")
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test splits overlap")

    def image_float(self, image_id: str) -> np.ndarray:
        return self.images[image_id].astype(np.float32) / 255.0

    def sequence_names(self) -> list[str]:
        return sorted(set(self.sequences.values()))

    def sequence_index(self, image_id: str) -> int:
        """Index into the appearance table; -1 for ids without a sequence."""
        names = self.sequence_names()
        seq = self.sequences.get(image_id)
        return names.index(seq) if seq in names else -1

    def mask(self, image_id: str) -> np.ndarray | None:
        return self.masks.get(image_id)


# -- synthetic scenes --------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_objects: int = 12
    n_train_views: int = 20
    n_test_views: int = 10
    image_size: int = 96
    fov_deg: float = 60.0
    orbit_center: tuple[float, float] = (0.5, 0.5)
    orbit_radius: float = 0.32
    orbit_height: tuple[float, float] = (0.42, 0.55)
    azimuth_range_deg: tuple[float, float] = (0.0, 180.0)
    target_radius: float = 0.12
    target_height: float = 0.18
    test_jitter_deg: float = 2.0


_LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
_AMBIENT = 0.4


@dataclass
class _Surface:
    base: np.ndarray
    waves: np.ndarray  # (k, 3) wave vectors in cycles per unit
    phases: np.ndarray  # (k,)
    mix: np.ndarray  # (k, 3) per-channel amplitude

    def albedo(self, p: np.ndarray) -> np.ndarray:
        s = np.sin(2 * np.pi * (p @ self.waves.T) + self.phases)
        return np.clip(self.base + s @ self.mix, 0.0, 1.0)


class SyntheticScene:
    """Textured box room in the unit cube with boxes and spheres on the floor.

    Rendering is exact ray-primitive intersection; it shares no code with
    the neural renderer and serves as ground truth for it.
    """

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.walls = [self._surface(rng, 3.0, 8.0, 0.2) for _ in range(6)]
        self.boxes: list[tuple[np.ndarray, np.ndarray]] = []
        self.spheres: list[tuple[np.ndarray, float]] = []
        self.object_surfaces: list[_Surface] = []
        cx, cy = spec.orbit_center
        for k in range(spec.n_objects):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.0, 0.3) if k % 3 else rng.uniform(0.36, 0.42)
            center = np.array([cx + rad * np.cos(ang), cy + rad * np.sin(ang)])
            if k % 2 == 0:
                half = rng.uniform(0.03, 0.07, size=3)
                half[2] = rng.uniform(0.04, 0.12)
                lo = np.array([center[0] - half[0], center[1] - half[1], 0.0])
                self.boxes.append((lo, lo + 2 * half))
            else:
                r = rng.uniform(0.03, 0.07)
                self.spheres.append((np.array([center[0], center[1], r]), r))
            self.object_surfaces.append(self._surface(rng, 4.0, 10.0, 0.15))

    @staticmethod
    def _surface(rng, f_lo, f_hi, amp) -> _Surface:
        k = 3
        dirs = rng.normal(size=(k, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return _Surface(
            base=rng.uniform(0.25, 0.75, size=3),
            waves=dirs * rng.uniform(f_lo, f_hi, size=(k, 1)),
            phases=rng.uniform(0, 2 * np.pi, size=k),
            mix=rng.uniform(-amp, amp, size=(k, 3)),
        )

    @property
    def diameter(self) -> float:
        return float(np.sqrt(3.0))

    def intrinsics(self) -> CameraIntrinsics:
        s = self.spec.image_size
        f = 0.5 * s / np.tan(np.radians(self.spec.fov_deg) / 2)
        return CameraIntrinsics(f, f, s / 2.0, s / 2.0, s, s)

    def camera(self, azimuth_deg: float, height: float) -> CameraPose:
        sp = self.spec
        a = np.radians(azimuth_deg)
        cx, cy = sp.orbit_center
        eye = [cx + sp.orbit_radius * np.cos(a), cy + sp.orbit_radius * np.sin(a), height]
        target = [cx - sp.target_radius * np.cos(a), cy - sp.target_radius * np.sin(a), sp.target_height]
        return CameraPose.look_at(eye, target)

    def trace(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest hit per ray: ``(t, normal, surface_index)``; room walls are 0..5."""
        n = len(dirs)
        inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        # room interior: exit distance along each axis
        t_exit = np.where(dirs > 0, (1.0 - origins) * inv, -origins * inv)
        axis = np.argmin(t_exit, axis=1)
        best_t = t_exit[np.arange(n), axis]
        positive = dirs[np.arange(n), axis] > 0
        surf = 2 * axis + positive.astype(int)
        normal = np.zeros((n, 3))
        normal[np.arange(n), axis] = np.where(positive, -1.0, 1.0)

        for b, (lo, hi) in enumerate(self.boxes):
            t0 = (lo - origins) * inv
            t1 = (hi - origins) * inv
            tmin = np.minimum(t0, t1)
            tnear = tmin.max(axis=1)
            tfar = np.maximum(t0, t1).min(axis=1)
            hit = (tnear <= tfar) & (tnear > 1e-9) & (tnear < best_t)
            if hit.any():
                ax = np.argmax(tmin[hit], axis=1)
                nrm = np.zeros((hit.sum(), 3))
                nrm[np.arange(len(ax)), ax] = -np.sign(dirs[hit][np.arange(len(ax)), ax])
                best_t[hit] = tnear[hit]
                normal[hit] = nrm
                surf[hit] = 6 + self._object_index("box", b)
        for s, (c, r) in enumerate(self.spheres):
            oc = origins - c
            bq = np.einsum("ij,ij->i", oc, dirs)
            cq = np.einsum("ij,ij->i", oc, oc) - r * r
            disc = bq * bq - cq
            ok = disc >= 0
            t = np.where(ok, -bq - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
            hit = ok & (t > 1e-9) & (t < best_t)
            if hit.any():
                best_t[hit] = t[hit]
                p = origins[hit] + t[hit, None] * dirs[hit]
                normal[hit] = (p - c) / r
                surf[hit] = 6 + self._object_index("sphere", s)
        return best_t, normal, surf

    def _object_index(self, kind: str, k: int) -> int:
        # objects alternate box, sphere, box, ...
        return 2 * k if kind == "box" else 2 * k + 1

    def shade(self, points: np.ndarray, normals: np.ndarray, surf: np.ndarray) -> np.ndarray:
        out = np.zeros((len(points), 3))
        surfaces = self.walls + self.object_surfaces
        for s in np.unique(surf):
            m = surf == s
            out[m] = surfaces[s].albedo(points[m])
        lambert = np.clip(normals @ _LIGHT, 0.0, 1.0)
        return np.clip(out * (_AMBIENT + (1 - _AMBIENT) * lambert)[:, None], 0.0, 1.0)

    def render(self, pose: CameraPose, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
        """Float RGB image and camera-frame z-depth map."""
        pixels = patch_centers(K, 1)
        dirs = pixel_directions(pixels, pose, K)
        origins = np.broadcast_to(pose.center, dirs.shape)
        t, normal, surf = self.trace(origins, dirs)
        pts = origins + t[:, None] * dirs
        rgb = self.shade(pts, normal, surf)
        z = t * (dirs @ pose.R[:, 2])
        return rgb.reshape(K.height, K.width, 3), z.reshape(K.height, K.width)

    def max_depth(self) -> float:
        """Upper bound on ray length from any camera on the orbit."""
        sp = self.spec
        cx, cy = sp.orbit_center
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        # farthest point of the orbit cylinder from any corner
        worst = 0.0
        for a in np.linspace(0, 2 * np.pi, 73):
            for h in sp.orbit_height:
                eye = np.array([cx + sp.orbit_radius * np.cos(a), cy + sp.orbit_radius * np.sin(a), h])
                worst = max(worst, float(np.linalg.norm(corners - eye, axis=1).max()))
        return worst


def _view_schedule(spec: SyntheticSceneSpec, rng) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    a0, a1 = spec.azimuth_range_deg
    h0, h1 = spec.orbit_height
    n = spec.n_train_views
    train_az = np.linspace(a0, a1, n)
    train = [(float(a), float(h0 + (h1 - h0) * (0.5 + 0.5 * np.sin(1.7 * i)))) for i, a in enumerate(train_az)]
    test = []
    step = (a1 - a0) / max(n - 1, 1)
    slots = np.linspace(0, n - 2, spec.n_test_views).round().astype(int) if n > 1 else np.zeros(spec.n_test_views, int)
    for k, slot in enumerate(slots):
        az = train_az[slot] + step * rng.uniform(0.3, 0.7)
        az += rng.uniform(-spec.test_jitter_deg, spec.test_jitter_deg)
        test.append((float(az), float(rng.uniform(h0, h1))))
    return train, test


def generate_synthetic(spec: SyntheticSceneSpec | None = None) -> tuple[SceneDataset, SyntheticScene]:
    """Render a synthetic scene; deterministic in ``spec.seed``."""
    spec = spec or SyntheticSceneSpec()
    scene = SyntheticScene(spec)
    rng = np.random.default_rng(spec.seed + 7919)
    K = scene.intrinsics()
    train, test = _view_schedule(spec, rng)
    ids, images, poses, depths = [], {}, {}, {}
    for prefix, views in (("train", train), ("test", test)):
        for k, (az, h) in enumerate(views):
            image_id = f"{prefix}_{k:03d}"
            pose = scene.camera(az, h)
            rgb, z = scene.render(pose, K)
            ids.append(image_id)
            images[image_id] = np.round(rgb * 255.0).astype(np.uint8)
            poses[image_id] = pose
            depths[image_id] = z
    ds = SceneDataset(
        ids=ids,
        images=images,
        poses=poses,
        intrinsics={i: K for i in ids},
        sequences={i: "seq0" for i in ids},
        train_ids=[i for i in ids if i.startswith("train")],
        test_ids=[i for i in ids if i.startswith("test")],
        near=0.02,
        far=round(scene.max_depth() + 0.05, 3),
        diameter=scene.diameter,
        depths=depths,
    )
    return ds, scene


# -- disk layout -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: SceneDataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    for i in ds.ids:
        Image.fromarray(ds.images[i]).save(root / "images" / f"{i}.png")
    with open(root / "poses.txt", "w") as fh:
        for i in ds.ids:
            p = ds.poses[i]
            fh.write(" ".join([i, *map(_fmt, p.rotation), *map(_fmt, p.translation)]) + "\n")
    Ks = {ds.intrinsics[i] for i in ds.ids}
    with open(root / "intrinsics.txt", "w") as fh:
        if len(Ks) == 1:
            K = next(iter(Ks))
            fh.write(f"* {_fmt(K.fx)} {_fmt(K.fy)} {_fmt(K.cx)} {_fmt(K.cy)} {K.width} {K.height}\n")
        else:
            for i in ds.ids:
                K = ds.intrinsics[i]
                fh.write(f"{i} {_fmt(K.fx)} {_fmt(K.fy)} {_fmt(K.cx)} {_fmt(K.cy)} {K.width} {K.height}\n")
    if ds.masks:
        (root / "masks").mkdir(exist_ok=True)
        for i, m in ds.masks.items():
            Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255).save(root / "masks" / f"{i}.png")
    with open(root / "sequences.txt", "w") as fh:
        for i in ds.ids:
            if i in ds.sequences:
                fh.write(f"{i} {ds.sequences[i]}\n")
    (root / "splits" / "train.txt").write_text("".join(f"{i}\n" for i in ds.train_ids))
    (root / "splits" / "test.txt").write_text("".join(f"{i}\n" for i in ds.test_ids))
    (root / "meta.txt").write_text(f"{_fmt(ds.near)} {_fmt(ds.far)} {_fmt(ds.diameter)}\n")
    return root


def _lines(path: Path):
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip() and not line.lstrip().startswith("#"):
                yield n, line.split()


def _floats(path, n, parts, line):
    try:
        return [float(v) for v in parts]
    except ValueError:
        raise MalformedLine(path, n, line) from None


def load_dataset(root: str | Path) -> SceneDataset:
    root = Path(root)
    pose_path = root / "poses.txt"
    if not pose_path.exists():
        raise MissingPoses(f"{pose_path} not found")
    poses: dict[str, CameraPose] = {}
    ids: list[str] = []
    for n, parts in _lines(pose_path):
        if len(parts) != 8:
            raise MalformedLine(pose_path, n, " ".join(parts))
        v = _floats(pose_path, n, parts[1:], " ".join(parts))
        poses[parts[0]] = CameraPose(np.array(v[:4]), np.array(v[4:]))
        ids.append(parts[0])

    intr_path = root / "intrinsics.txt"
    intrinsics: dict[str, CameraIntrinsics] = {}
    for n, parts in _lines(intr_path):
        if len(parts) != 7:
            raise MalformedLine(intr_path, n, " ".join(parts))
        fx, fy, cx, cy = _floats(intr_path, n, parts[1:5], " ".join(parts))
        try:
            w, h = int(parts[5]), int(parts[6])
        except ValueError:
            raise MalformedLine(intr_path, n, " ".join(parts)) from None
        K = CameraIntrinsics(fx, fy, cx, cy, w, h)
        if parts[0] == "*":
            intrinsics = {i: K for i in ids}
            break
        intrinsics[parts[0]] = K

    images = {i: np.asarray(Image.open(root / "images" / f"{i}.png").convert("RGB")) for i in ids}
    masks = {}
    if (root / "masks").is_dir():
        for i in ids:
            p = root / "masks" / f"{i}.png"
            if p.exists():
                masks[i] = np.asarray(Image.open(p).convert("L")) > 0

    sequences = {}
    seq_path = root / "sequences.txt"
    if seq_path.exists():
        for n, parts in _lines(seq_path):
            if len(parts) != 2:
                raise MalformedLine(seq_path, n, " ".join(parts))
            sequences[parts[0]] = parts[1]

    def split(name):
        p = root / "splits" / f"{name}.txt"
        return p.read_text().split() if p.exists() else []

    meta_path = root / "meta.txt"
    meta = next(_lines(meta_path), None)
    if meta is None or len(meta[1]) != 3:
        raise MalformedLine(meta_path, meta[0] if meta else 1, " ".join(meta[1]) if meta else "")
    near, far, diameter = _floats(meta_path, meta[0], meta[1], " ".join(meta[1]))
    return SceneDataset(ids, images, poses, intrinsics, sequences, split("train"), split("test"),
                        near, far, diameter, masks)


# -- covisibility ------------------------------------------------------------

def _visible_fraction(points: np.ndarray, pose: CameraPose, K: CameraIntrinsics, depth: np.ndarray | None,
                      rel_tol: float = 0.03) -> float:
    pix, z = project_points(points, pose, K)
    ok = (z > 1e-9) & K.contains(pix)
    if depth is not None and ok.any():
        u = np.clip(pix[ok, 0].astype(int), 0, K.width - 1)
        v = np.clip(pix[ok, 1].astype(int), 0, K.height - 1)
        unoccluded = np.abs(depth[v, u] - z[ok]) <= rel_tol * z[ok]
        ok[np.flatnonzero(ok)] = unoccluded
    return float(ok.mean())


def _sample_points(ds: SceneDataset, image_id: str, grid: int) -> np.ndarray:
    pose, K = ds.poses[image_id], ds.intrinsics[image_id]
    stride_x, stride_y = K.width / grid, K.height / grid
    xs = (np.arange(grid) + 0.5) * stride_x
    ys = (np.arange(grid) + 0.5) * stride_y
    gx, gy = np.meshgrid(xs, ys)
    pix = np.stack([gx.ravel(), gy.ravel()], -1)
    dirs = pixel_directions(pix, pose, K)
    if ds.depths is not None and image_id in ds.depths:
        d = ds.depths[image_id]
        z = d[np.clip(pix[:, 1].astype(int), 0, K.height - 1), np.clip(pix[:, 0].astype(int), 0, K.width - 1)]
        t = z / (dirs @ pose.R[:, 2])
        return pose.center + t[:, None] * dirs
    # frustum overlap: points spread over the depth range
    depths = np.linspace(ds.near, ds.far, 8)
    return (pose.center + depths[:, None, None] * dirs[None]).reshape(-1, 3)


def covisibility_scores(ds: SceneDataset, ids: list[str] | None = None, grid: int = 16) -> np.ndarray:
    """``scores[a, b]``: fraction of image ``a``'s grid points visible from image ``b``."""
    ids = list(ds.train_ids if ids is None else ids)
    pts = {i: _sample_points(ds, i, grid) for i in ids}
    use_depth = ds.depths is not None
    S = np.zeros((len(ids), len(ids)))
    for a, ia in enumerate(ids):
        for b, ib in enumerate(ids):
            depth = ds.depths.get(ib) if use_depth else None
            S[a, b] = _visible_fraction(pts[ia], ds.poses[ib], ds.intrinsics[ib], depth)
    return S


def covisibility_pairs(ds: SceneDataset, top_n: int = 20, grid: int = 16) -> dict[str, list[tuple[str, float]]]:
    """Per train image, up to ``top_n`` covisible neighbors by descending score (no self-pairs)."""
    ids = list(ds.train_ids)
    if not ids:
        raise ValueError("train split is empty")
    S = covisibility_scores(ds, ids, grid)
    pairs: dict[str, list[tuple[str, float]]] = {}
    for a, ia in enumerate(ids):
        order = sorted((b for b in range(len(ids)) if b != a), key=lambda b: (-S[a, b], b))
        pairs[ia] = [(ids[b], float(S[a, b])) for b in order[:top_n] if S[a, b] > 0]
    return pairs


def read_pairs(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    out = []
    for n, parts in _lines(path):
        if len(parts) != 2:
            raise MalformedLine(path, n, " ".join(parts))
        out.append((parts[0], parts[1]))
    return out


def write_pairs(pairs, path: str | Path) -> None:
    with open(path, "w") as fh:
        for q, r in pairs:
            fh.write(f"{q} {r}\n")

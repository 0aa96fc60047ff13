"""Image-to-field matching: image encoder, scene point features, coarse and fine matching."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadShape, LowOpacityScene, NoGroundTruth, NoMatches, ZeroVector
from .field import SceneField, encoded_dim, positional_encode
from .geometry import CameraIntrinsics, CameraPose, patch_centers, project_points
from .rendering import render_view

FEATURE_SOURCES = ("pt3d", "pe3d", "f1", "f2", "f3", "f4", "f5", "f6", "f7")


def source_layer(source: str) -> int | None:
    """Encoder layer tapped by a feature source; None for raw-point sources."""
    source = source.lower()
    if source in ("pt3d", "pe3d"):
        return None
    if source.startswith("f") and source[1:].isdigit():
        return int(source[1:])
    raise ValueError(f"unknown feature source {source!r}; expected one of {FEATURE_SOURCES}")


# -- scene points ------------------------------------------------------------

@dataclass
class ScenePointSet:
    points: np.ndarray
    features: np.ndarray
    opacities: np.ndarray
    source: str
    pixels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, keep) -> "ScenePointSet":
        pix = None if self.pixels is None else self.pixels[keep]
        return ScenePointSet(self.points[keep], self.features[keep], self.opacities[keep], self.source, pix)


def prepare_scene_features(pose: CameraPose, K: CameraIntrinsics, field: SceneField, source: str = "f3",
                           stride: int = 8, opacity_threshold: float = 0.5, min_points: int = 8,
                           appearance_id=None) -> ScenePointSet:
    """Render one surface point per patch center at ``pose`` with its source feature."""
    layer = source_layer(source)
    view = render_view(pose, K, stride, field, feature_layer=layer, appearance_id=appearance_id)
    if layer is not None:
        feats = view.features
    elif source == "pe3d":
        feats = positional_encode(torch.as_tensor(view.points), field.config.pe_x_bands).numpy()
    else:
        feats = view.points.copy()
    keep = (view.opacity >= opacity_threshold) & (np.linalg.norm(feats, axis=1) > 1e-8)
    if keep.sum() < min_points:
        raise LowOpacityScene(f"only {int(keep.sum())} points pass opacity >= {opacity_threshold}")
    return ScenePointSet(view.points[keep], feats[keep], view.opacity[keep], source, view.pixels[keep])


# -- image encoder -----------------------------------------------------------

def _conv(c_in, c_out, stride=1, dilation=1):
    """3x3 conv, batch norm and ReLU."""
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(),
    )


class ImageEncoder(nn.Module):
    """Strided CNN giving a 1/2-resolution fine map and a 1/8-resolution coarse map."""

    def __init__(self, coarse_dim: int = 256, fine_dim: int = 128, widths=(32, 64, 128, 128)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stage1 = nn.Sequential(_conv(3, w0, 2), _conv(w0, w0))
        self.stage2 = nn.Sequential(_conv(w0, w1, 2), _conv(w1, w1))
        self.stage3 = nn.Sequential(_conv(w1, w2, 2), _conv(w2, w2))
        self.stage4 = nn.Sequential(_conv(w2, w3, dilation=2), _conv(w3, w3, dilation=4))
        self.coarse_head = nn.Conv2d(w2 + w3, coarse_dim, 1)
        # the fine map also sees upsampled 1/8 context so windows know where they sit in the scene
        self.fine_head = nn.Conv2d(w0 + w1 + w2 + w3, fine_dim, 1)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x1 = self.stage1(images)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        x4 = self.stage4(x3)
        deep = torch.cat([x3, x4], 1)
        coarse = self.coarse_head(deep)
        up2 = F.interpolate(x2, scale_factor=2, mode="bilinear", align_corners=False)
        up8 = F.interpolate(deep, scale_factor=4, mode="bilinear", align_corners=False)
        fine = self.fine_head(torch.cat([x1, up2, up8], 1))
        return coarse, fine


@dataclass
class ImageFeaturePyramid:
    coarse: torch.Tensor  # (N_m, D_c), row-major over the 1/8 grid
    fine: torch.Tensor  # (D_f, H/2, W/2)
    grid: tuple[int, int]  # coarse rows, cols
    image_size: tuple[int, int]  # H, W

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def image_tensor(image) -> torch.Tensor:
    """``H x W x 3`` array in [0, 1] (or uint8) to a ``1 x 3 x H x W`` float tensor."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadShape(f"expected H x W x 3 image, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    H, W = arr.shape[:2]
    if H % 8 or W % 8:
        raise BadShape(f"image size {H}x{W} not divisible by 8")
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=torch.float32).permute(2, 0, 1)[None]


def encode_batch(encoder: ImageEncoder, images: torch.Tensor) -> list[ImageFeaturePyramid]:
    B, _, H, W = images.shape
    if H % 8 or W % 8:
        raise BadShape(f"image size {H}x{W} not divisible by 8")
    coarse, fine = encoder(images)
    rows, cols = coarse.shape[-2:]
    return [
        ImageFeaturePyramid(coarse[b].flatten(1).T, fine[b], (rows, cols), (H, W))
        for b in range(B)
    ]


def encode_image(image, encoder: ImageEncoder) -> ImageFeaturePyramid:
    return encode_batch(encoder, image_tensor(image))[0]


# -- coarse matching ---------------------------------------------------------

def dual_softmax(F_img: torch.Tensor, F_pts: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Row softmax times column softmax of cosine similarities over ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n_img, n_pts = F_img.norm(dim=-1), F_pts.norm(dim=-1)
    if (n_img < 1e-12).any() or (n_pts < 1e-12).any():
        raise ZeroVector("cosine similarity of a zero feature vector")
    C = (F_img / n_img[:, None]) @ (F_pts / n_pts[:, None]).T / temperature
    return F.softmax(C, dim=1) * F.softmax(C, dim=0)


@dataclass
class MatchSet:
    """2D-3D correspondences at full image resolution."""

    image_idx: np.ndarray
    point_idx: np.ndarray
    scores: np.ndarray
    pixels: np.ndarray
    points3d: np.ndarray
    variances: np.ndarray | None = None
    stage: str = "coarse"

    def __len__(self) -> int:
        return len(self.point_idx)

    @classmethod
    def empty(cls, stage: str = "coarse") -> "MatchSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3)), None, stage)

    def subset(self, keep) -> "MatchSet":
        var = None if self.variances is None else self.variances[keep]
        return MatchSet(self.image_idx[keep], self.point_idx[keep], self.scores[keep], self.pixels[keep],
                        self.points3d[keep], var, self.stage)


def mutual_matches(S, threshold: float = 0.2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mutual row/column maxima above ``threshold``; ties go to the lowest index.

    Returns ``(image_idx, point_idx, scores)``.
    """
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    S = S.detach().cpu().numpy() if isinstance(S, torch.Tensor) else np.asarray(S)
    if S.size == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), np.zeros(0)
    row_best = S.argmax(axis=1)
    col_best = S.argmax(axis=0)
    i = np.arange(S.shape[0])
    keep = (col_best[row_best] == i) & (S[i, row_best] > threshold)
    return i[keep], row_best[keep], S[i[keep], row_best[keep]]


# -- attention ---------------------------------------------------------------

def sine_position_encoding(dim: int, rows: int, cols: int) -> torch.Tensor:
    """2D sinusoidal encoding ``(rows * cols, dim)`` alternating x and y channels."""
    y, x = torch.meshgrid(torch.arange(rows, dtype=torch.float32), torch.arange(cols, dtype=torch.float32),
                          indexing="ij")
    pe = torch.zeros(dim, rows, cols)
    div = torch.exp(torch.arange(0, dim // 2, 2, dtype=torch.float32) * (-math.log(10000.0) / (dim // 2)))
    div = div[:, None, None]
    pe[0::4] = torch.sin(x[None] * div)[: pe[0::4].shape[0]]
    pe[1::4] = torch.cos(x[None] * div)[: pe[1::4].shape[0]]
    pe[2::4] = torch.sin(y[None] * div)[: pe[2::4].shape[0]]
    pe[3::4] = torch.cos(y[None] * div)[: pe[3::4].shape[0]]
    return pe.flatten(1).T


class AttentionBlock(nn.Module):
    """Multi-head attention message plus residual MLP merge."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(2 * dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        """``x`` and ``source`` are ``(L, D)`` or batched ``(B, L, D)``."""
        single = x.ndim == 2
        xb, sb = (x[None], source[None]) if single else (x, source)
        msg, _ = self.attn(xb, sb, sb, need_weights=False)
        msg = self.norm1(msg[0] if single else msg)
        return x + self.norm2(self.mlp(torch.cat([x, msg], -1)))


class CoarseAttention(nn.Module):
    """Shared self-attention in both domains, 3D position fuse for points, then cross-attention."""

    def __init__(self, dim: int, heads: int = 8, n_self: int = 4, pe_bands: int = 10):
        super().__init__()
        self.pe_bands = pe_bands
        self.self_blocks = nn.ModuleList([AttentionBlock(dim, heads) for _ in range(n_self)])
        self.fuse = nn.Linear(dim + encoded_dim(3, pe_bands), dim)
        self.cross = AttentionBlock(dim, heads)

    def forward(self, img: torch.Tensor, grid: tuple[int, int], pts: torch.Tensor, xyz: torch.Tensor):
        img = img + sine_position_encoding(img.shape[-1], *grid).to(img.dtype)
        for blk in self.self_blocks:
            img = blk(img, img)
            pts = blk(pts, pts)
        pts = pts + self.fuse(torch.cat([pts, positional_encode(xyz, self.pe_bands)], -1))
        img_x = self.cross(img, pts)
        pts_x = self.cross(pts, img)
        return img_x, pts_x


class FineMatcher(nn.Module):
    def __init__(self, coarse_dim: int, fine_dim: int, window: int = 5, heads: int = 4):
        super().__init__()
        self.window = window
        self.window_attn = AttentionBlock(fine_dim, heads)
        self.point_proj = nn.Linear(coarse_dim, fine_dim)

    def offsets(self, dtype=torch.float32) -> torch.Tensor:
        r = self.window // 2
        a = torch.arange(-r, r + 1, dtype=dtype)
        dy, dx = torch.meshgrid(a, a, indexing="ij")
        return torch.stack([dx.ravel(), dy.ravel()], -1)  # (w*w, 2) as (x, y)

    def gather_windows(self, fine: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
        """Bilinear ``w x w`` windows ``(M, w*w, D_f)`` around fine-grid continuous ``centers``."""
        D, Hf, Wf = fine.shape
        pos = centers[:, None, :] + self.offsets(fine.dtype)[None]
        gx = 2.0 * pos[..., 0] / Wf - 1.0
        gy = 2.0 * pos[..., 1] / Hf - 1.0
        grid = torch.stack([gx, gy], -1)[None]
        out = F.grid_sample(fine[None], grid, mode="bilinear", padding_mode="border", align_corners=False)
        return out[0].permute(1, 2, 0)

    def forward(self, fine: torch.Tensor, centers: torch.Tensor, point_feats: torch.Tensor):
        """Expected fine-grid location and heatmap total variance per match."""
        win = self.gather_windows(fine, centers)
        if len(win):
            win = self.window_attn(win, win)
        p = self.point_proj(point_feats)
        logits = torch.einsum("mkd,md->mk", win, p) / math.sqrt(p.shape[-1])
        heat = F.softmax(logits, dim=-1)
        mean, var = heatmap_expectation(heat, self.window)
        return centers + mean, var, heat


def heatmap_expectation(heat: torch.Tensor, window: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean offset and total variance of ``(M, w*w)`` heatmaps over a centered window."""
    r = window // 2
    a = torch.arange(-r, r + 1, dtype=heat.dtype)
    dy, dx = torch.meshgrid(a, a, indexing="ij")
    off = torch.stack([dx.ravel(), dy.ravel()], -1)
    mean = heat @ off
    var = (heat[..., None] * (off[None] - mean[:, None]) ** 2).sum(1).sum(-1)
    return mean, var


# -- the matcher -------------------------------------------------------------

@dataclass
class MatcherConfig:
    variant: str = "mini"
    feature_source: str = "f3"
    point_dim: int = 256
    coarse_dim: int = 256
    fine_dim: int = 128
    encoder_widths: tuple = (32, 64, 128, 128)
    temperature: float = 0.1
    threshold: float = 0.2
    n_self: int = 4
    n_heads: int = 8
    window: int = 5
    pe_bands: int = 10
    stride: int = 8
    opacity_threshold: float = 0.5
    descriptor_dim: int = 256
    descriptor_grid: int = 4
    detach_variance: bool = True

    def __post_init__(self):
        if self.variant not in ("mini", "full"):
            raise ValueError(f"variant must be 'mini' or 'full', got {self.variant!r}")
        self.feature_source = self.feature_source.lower()
        source_layer(self.feature_source)
        self.encoder_widths = tuple(self.encoder_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


class NerfMatcher(nn.Module):
    """Matches a query image against rendered scene points.

    ``mini`` scores raw (or lifted) point features against coarse image
    features with a dual softmax; ``full`` adds attention and fine heatmaps.
    """

    def __init__(self, config: MatcherConfig | None = None):
        super().__init__()
        self.config = cfg = config or MatcherConfig()
        self.encoder = ImageEncoder(cfg.coarse_dim, cfg.fine_dim, cfg.encoder_widths)
        if source_layer(cfg.feature_source) is None:
            self.lift = nn.Linear(cfg.point_dim, cfg.coarse_dim)
        else:
            if cfg.point_dim != cfg.coarse_dim:
                raise ValueError("field feature sources need point_dim == coarse_dim")
            self.lift = None
        if cfg.variant == "full":
            self.attention = CoarseAttention(cfg.coarse_dim, cfg.n_heads, cfg.n_self, cfg.pe_bands)
            self.fine = FineMatcher(cfg.coarse_dim, cfg.fine_dim, cfg.window)
        else:
            self.attention = None
            self.fine = None
        # fixed random projection for global descriptors
        g = torch.Generator().manual_seed(1234)
        d_in = cfg.coarse_dim * cfg.descriptor_grid ** 2
        self.register_buffer("descriptor_proj", torch.randn(d_in, cfg.descriptor_dim, generator=g) / math.sqrt(d_in))

    def point_features(self, pts: ScenePointSet) -> torch.Tensor:
        f = torch.as_tensor(pts.features, dtype=self.descriptor_proj.dtype)
        return self.lift(f) if self.lift is not None else f

    def coarse_forward(self, pyr: ImageFeaturePyramid, pts: ScenePointSet):
        """Dual-softmax scores and the (attended) features they came from."""
        f_img = pyr.coarse
        f_pts = self.point_features(pts)
        if self.attention is not None:
            xyz = torch.as_tensor(pts.points, dtype=f_img.dtype)
            f_img, f_pts = self.attention(f_img, pyr.grid, f_pts, xyz)
        S = dual_softmax(f_img, f_pts, self.config.temperature)
        return S, f_img, f_pts

    def patch_pixels(self, pyr: ImageFeaturePyramid, idx) -> np.ndarray:
        s = self.config.stride
        rows, cols = pyr.grid
        idx = np.asarray(idx)
        return np.stack([(idx % cols) * s + s / 2.0, (idx // cols) * s + s / 2.0], -1).astype(np.float64)

    def fine_forward(self, pyr: ImageFeaturePyramid, image_idx, point_feats: torch.Tensor):
        """Fine-grid predictions for coarse matches; returns ``(xy_fine, variance)``."""
        centers = torch.as_tensor(self.patch_pixels(pyr, image_idx) / 2.0, dtype=point_feats.dtype)
        xy, var, _ = self.fine(pyr.fine, centers, point_feats)
        return xy, var

    @torch.no_grad()
    def match(self, image, pts: ScenePointSet, threshold: float | None = None) -> MatchSet:
        pyr = encode_image(image, self.encoder)
        return self.match_pyramid(pyr, pts, threshold)

    @torch.no_grad()
    def match_pyramid(self, pyr: ImageFeaturePyramid, pts: ScenePointSet, threshold: float | None = None) -> MatchSet:
        thr = self.config.threshold if threshold is None else threshold
        S, _, f_pts = self.coarse_forward(pyr, pts)
        i, j, sc = mutual_matches(S, thr)
        if len(i) == 0:
            return MatchSet.empty("coarse" if self.fine is None else "fine")
        pixels = self.patch_pixels(pyr, i)
        if self.fine is None:
            return MatchSet(i, j, sc, pixels, pts.points[j].copy(), None, "coarse")
        xy, var = self.fine_forward(pyr, i, f_pts[torch.as_tensor(j)])
        return MatchSet(i, j, sc, 2.0 * xy.double().numpy(), pts.points[j].copy(), var.double().numpy(), "fine")

    @torch.no_grad()
    def describe(self, image) -> np.ndarray:
        """Unit-norm global descriptor from grid-pooled coarse features."""
        coarse, _ = self.encoder(image_tensor(image))
        g = self.config.descriptor_grid
        pooled = F.adaptive_avg_pool2d(coarse, g).flatten(1)
        v = (pooled @ self.descriptor_proj)[0]
        return (v / v.norm().clamp_min(1e-12)).double().numpy()


def fine_refine(matcher: NerfMatcher, pyr: ImageFeaturePyramid, image_idx: int, point_feature: torch.Tensor):
    """Sub-pixel full-resolution location and heatmap variance for a single coarse match."""
    xy, var = matcher.fine_forward(pyr, [image_idx], point_feature[None])
    return 2.0 * xy[0], var[0]


# -- supervision -------------------------------------------------------------

@dataclass
class GroundTruthAssociation:
    M_gt: np.ndarray  # (N_m, N_s) bool
    targets: np.ndarray  # (N_s, 2) full-resolution projections
    patch_of_point: np.ndarray  # (N_s,) patch index or -1

    @property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        j = np.flatnonzero(self.patch_of_point >= 0)
        return self.patch_of_point[j], j


def gt_associations(points: np.ndarray, pose: CameraPose, K: CameraIntrinsics, patch: int = 8) -> GroundTruthAssociation:
    pts = points.points if isinstance(points, ScenePointSet) else np.asarray(points)
    pix, z = project_points(pts, pose, K)
    rows, cols = K.height // patch, K.width // patch
    inside = (z > 1e-12) & K.contains(pix)
    patch_idx = np.full(len(pts), -1, dtype=np.int64)
    c = np.floor(pix[inside, 0] / patch).astype(np.int64)
    r = np.floor(pix[inside, 1] / patch).astype(np.int64)
    patch_idx[inside] = r * cols + c
    M = np.zeros((rows * cols, len(pts)), dtype=bool)
    j = np.flatnonzero(inside)
    M[patch_idx[j], j] = True
    return GroundTruthAssociation(M, pix, patch_idx)


def coarse_loss(S: torch.Tensor, M_gt) -> torch.Tensor:
    M = torch.as_tensor(np.asarray(M_gt), dtype=torch.bool) if not isinstance(M_gt, torch.Tensor) else M_gt.bool()
    n = int(M.sum())
    if n == 0:
        raise NoGroundTruth("no ground-truth matches")
    return -torch.log(S[M].clamp_min(1e-12)).sum() / n


def fine_loss(pred: torch.Tensor, target: torch.Tensor, variance: torch.Tensor, detach_variance: bool = False) -> torch.Tensor:
    """Variance-weighted mean L2 distance; variance clamped below at 1e-6."""
    if pred.shape[0] == 0:
        raise NoMatches("no fine matches")
    var = variance.clamp_min(1e-6)
    if detach_variance:
        var = var.detach()
    return ((pred - target).norm(dim=-1) / var).mean()


def pair_loss(matcher: NerfMatcher, pyr: ImageFeaturePyramid, pts: ScenePointSet, gt: GroundTruthAssociation,
              detach_variance: bool | None = None) -> tuple[torch.Tensor, dict]:
    """Coarse loss (plus fine loss on ground-truth pairs for the full variant)."""
    S, _, f_pts = matcher.coarse_forward(pyr, pts)
    lc = coarse_loss(S, gt.M_gt)
    parts = {"coarse": float(lc.detach())}
    if matcher.fine is None:
        return lc, parts
    i, j = gt.pairs
    xy, var = matcher.fine_forward(pyr, i, f_pts[torch.as_tensor(j)])
    target = torch.as_tensor(gt.targets[j] / 2.0, dtype=xy.dtype)
    detach = matcher.config.detach_variance if detach_variance is None else detach_variance
    lf = fine_loss(xy, target, var, detach)
    parts["fine"] = float(lf.detach())
    return lc + lf, parts


def save_matcher(matcher: NerfMatcher, path, extra: dict | None = None):
    from .checkpoint import save_checkpoint

    cfg = matcher.config.to_dict()
    if extra:
        cfg["extra"] = extra
    return save_checkpoint(path, dict(matcher.state_dict()), cfg, kind="matcher")


def load_matcher(path) -> NerfMatcher:
    from .checkpoint import load_checkpoint

    tensors, cfg, _ = load_checkpoint(path)
    cfg = dict(cfg)
    cfg.pop("extra", None)
    m = NerfMatcher(MatcherConfig(**cfg))
    m.load_state_dict(tensors)
    m.eval()
    return m

"""Ray sampling and volumetric compositing of color, points and features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NegativeDensity, NonPositiveDelta, StrideMismatch
from .field import SceneField
from .geometry import CameraIntrinsics, CameraPose, Ray, patch_centers, pixel_directions

DELTA_CAP = 1e10


def composite_weights(densities: torch.Tensor, deltas: torch.Tensor, check: bool = True) -> torch.Tensor:
    """``w_i = T_i (1 - exp(-sigma_i delta_i))`` with ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    if densities.shape != deltas.shape:
        raise ValueError(f"shape mismatch {tuple(densities.shape)} vs {tuple(deltas.shape)}")
    if check:
        if (densities < 0).any():
            raise NegativeDensity("densities must be >= 0")
        if (deltas <= 0).any():
            raise NonPositiveDelta("sample intervals must be > 0")
    tau = densities * deltas
    # shifted cumsum, not cumsum - tau: the capped last interval would cancel catastrophically
    accum = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau[..., :-1], dim=-1)], dim=-1)
    return torch.exp(-accum) * (1.0 - torch.exp(-tau))


def sample_deltas(t: torch.Tensor) -> torch.Tensor:
    d = t[..., 1:] - t[..., :-1]
    cap = torch.full_like(t[..., :1], DELTA_CAP)
    return torch.cat([d, cap], dim=-1)


def stratified_samples(n_rays: int, near: float, far: float, n: int, generator: torch.Generator | None = None,
                       dtype=torch.float32) -> torch.Tensor:
    """``n`` depths per ray, one per equal bin; bin midpoints unless a generator is given."""
    edges = torch.linspace(near, far, n + 1, dtype=dtype)
    lo, hi = edges[:-1], edges[1:]
    if generator is None:
        u = torch.full((n_rays, n), 0.5, dtype=dtype)
    else:
        u = torch.rand((n_rays, n), generator=generator, dtype=dtype)
    return lo + (hi - lo) * u


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverse-CDF sampling of ``n`` depths from a piecewise-constant pdf over ``bins``.

    ``bins`` has one more entry than ``weights`` along the last axis.
    """
    w = weights + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    shape = (*cdf.shape[:-1], n)
    if generator is None:
        u = torch.linspace(0.0, 1.0, n + 2, dtype=cdf.dtype)[1:-1].expand(shape).contiguous()
    else:
        u = torch.rand(shape, generator=generator, dtype=cdf.dtype)
    idx = torch.searchsorted(cdf, u, right=True)
    below = (idx - 1).clamp(min=0)
    above = idx.clamp(max=cdf.shape[-1] - 1)
    cdf_lo, cdf_hi = cdf.gather(-1, below), cdf.gather(-1, above)
    bin_lo, bin_hi = bins.gather(-1, below), bins.gather(-1, above)
    denom = cdf_hi - cdf_lo
    denom = torch.where(denom < 1e-5, torch.ones_like(denom), denom)
    return bin_lo + (u - cdf_lo) / denom * (bin_hi - bin_lo)


@dataclass
class RayBatchOutput:
    color: torch.Tensor
    depth: torch.Tensor
    points: torch.Tensor
    features: torch.Tensor | None
    opacity: torch.Tensor
    weights: torch.Tensor
    t: torch.Tensor


def composite_samples(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor, t: torch.Tensor,
                      feature_layer: int | None = None, appearance_id=None) -> RayBatchOutput:
    """Evaluate the field at fixed depths ``t`` (R, N) and composite every quantity."""
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    view = dirs[:, None, :].expand_as(pts)
    sigma, rgb, feat = field(pts, view, appearance_id, feature_layer)
    w = composite_weights(sigma, sample_deltas(t), check=False)
    wc = w[..., None]
    return RayBatchOutput(
        color=(wc * rgb).sum(-2),
        depth=(w * t).sum(-1),
        points=(wc * pts).sum(-2),
        features=None if feat is None else (wc * feat).sum(-2),
        opacity=w.sum(-1),
        weights=w,
        t=t,
    )


def sample_depths(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor, near: float, far: float,
                  n_coarse: int, n_fine: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Stratified pass plus inverse-CDF resampling; merged, sorted, detached depths."""
    with torch.no_grad():
        t_c = stratified_samples(origins.shape[0], near, far, n_coarse, generator, dtype=origins.dtype)
        if n_fine <= 0:
            return t_c
        pts = origins[:, None, :] + t_c[..., None] * dirs[:, None, :]
        _, last = field.encoder_features(pts)
        sigma = field.density(last)
        w = composite_weights(sigma, sample_deltas(t_c), check=False)
        mids = 0.5 * (t_c[..., 1:] + t_c[..., :-1])
        bins = torch.cat([t_c[..., :1], mids, t_c[..., -1:]], -1)
        t_f = sample_pdf(bins, w, n_fine, generator)
        t, _ = torch.sort(torch.cat([t_c, t_f], -1), -1)
        return t


def render_rays(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor, feature_layer: int | None = None,
                appearance_id=None, generator: torch.Generator | None = None, n_coarse: int | None = None,
                n_fine: int | None = None, near: float | None = None, far: float | None = None) -> RayBatchOutput:
    cfg = field.config
    near = cfg.near if near is None else near
    far = cfg.far if far is None else far
    n_coarse = cfg.n_coarse if n_coarse is None else n_coarse
    n_fine = cfg.n_fine if n_fine is None else n_fine
    if feature_layer is not None:
        field.check_layer(feature_layer)
    t = sample_depths(field, origins, dirs, near, far, n_coarse, n_fine, generator)
    return composite_samples(field, origins, dirs, t, feature_layer, appearance_id)


@torch.no_grad()
def render_rays_chunked(field: SceneField, origins: torch.Tensor, dirs: torch.Tensor, chunk: int = 2048,
                        **kwargs) -> dict[str, torch.Tensor]:
    outs: dict[str, list] = {k: [] for k in ("color", "depth", "points", "features", "opacity")}
    for s in range(0, origins.shape[0], chunk):
        o = render_rays(field, origins[s:s + chunk], dirs[s:s + chunk], **kwargs)
        for k in outs:
            v = getattr(o, k)
            if v is not None:
                outs[k].append(v)
    return {k: torch.cat(v) if v else None for k, v in outs.items()}


@dataclass
class RenderedSurface:
    color: np.ndarray
    surface_point: np.ndarray
    feature: np.ndarray | None
    opacity: float
    depth: float
    feature_layer: int | None


def render_ray(ray: Ray, field: SceneField, feature_layer: int | None = None, appearance_id=None,
               seed: int | None = None, **kwargs) -> RenderedSurface:
    gen = None if seed is None else torch.Generator().manual_seed(seed)
    dtype = next(field.parameters()).dtype
    o = torch.as_tensor(ray.origin, dtype=dtype)[None]
    d = torch.as_tensor(ray.direction, dtype=dtype)[None]
    with torch.no_grad():
        out = render_rays(field, o, d, feature_layer, appearance_id, gen, **kwargs)
    return RenderedSurface(
        color=out.color[0].double().numpy(),
        surface_point=out.points[0].double().numpy(),
        feature=None if out.features is None else out.features[0].double().numpy(),
        opacity=float(out.opacity[0]),
        depth=float(out.depth[0]),
        feature_layer=feature_layer,
    )


@dataclass
class RenderedView:
    """Per-ray outputs on a ``rows x cols`` grid (row-major flattening)."""

    pixels: np.ndarray
    rows: int
    cols: int
    color: np.ndarray
    points: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    features: np.ndarray | None
    feature_layer: int | None

    def __len__(self) -> int:
        return self.rows * self.cols

    def image(self) -> np.ndarray:
        return self.color.reshape(self.rows, self.cols, 3)


def view_rays(pose: CameraPose, K: CameraIntrinsics, stride: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if K.width % stride or K.height % stride:
        raise StrideMismatch(f"stride {stride} does not divide {K.width}x{K.height}")
    pixels = patch_centers(K, stride)
    dirs = pixel_directions(pixels, pose, K)
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return pixels, origins, dirs


def render_view(pose: CameraPose, K: CameraIntrinsics, stride: int, field: SceneField, feature_layer: int | None = None,
                appearance_id=None, chunk: int = 2048, **kwargs) -> RenderedView:
    """One ray per ``stride x stride`` patch center; ``stride=1`` renders every pixel."""
    pixels, origins, dirs = view_rays(pose, K, stride)
    dtype = next(field.parameters()).dtype
    out = render_rays_chunked(
        field, torch.as_tensor(origins, dtype=dtype), torch.as_tensor(dirs, dtype=dtype), chunk=chunk,
        feature_layer=feature_layer, appearance_id=appearance_id, **kwargs,
    )
    return RenderedView(
        pixels=pixels,
        rows=K.height // stride,
        cols=K.width // stride,
        color=out["color"].double().numpy(),
        points=out["points"].double().numpy(),
        depth=out["depth"].double().numpy(),
        opacity=out["opacity"].double().numpy(),
        features=None if out["features"] is None else out["features"].double().numpy(),
        feature_layer=feature_layer,
    )

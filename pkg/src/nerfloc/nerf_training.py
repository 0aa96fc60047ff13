"""Per-scene radiance field optimization."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import AllMasked, EmptyDataset
from .field import FieldConfig, SceneField
from .geometry import patch_centers, pixel_directions
from .rendering import render_rays, render_view
from .scene_data import SceneDataset

log = logging.getLogger(__name__)


@dataclass
class NerfTrainConfig:
    rays_per_batch: int = 9216
    n_coarse: int = 128
    n_fine: int = 128
    epochs: int = 15
    lr: float = 1.6e-3
    schedule: str = "cosine"
    max_train_images: int = 900
    # None = one pass over every unmasked training pixel per epoch
    rays_per_epoch: int | None = None
    feature_dim: int = 256
    n_layers: int = 7
    skip_layer_index: int = 4
    pe_x_bands: int = 10
    pe_d_bands: int = 4
    appearance_dim: int = 16

    def __post_init__(self):
        for name in ("rays_per_batch", "n_coarse", "epochs", "max_train_images", "feature_dim"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """MSE over rays whose ``mask`` entry is False (mask marks excluded rays)."""
    if rendered.shape != target.shape:
        raise ValueError("rendered and target differ in shape")
    if mask is not None:
        keep = ~mask.bool()
        if not keep.any():
            raise AllMasked("every ray is masked")
        rendered, target = rendered[keep], target[keep]
    elif rendered.numel() == 0:
        raise AllMasked("no rays")
    return ((rendered - target) ** 2).mean()


def mse_to_psnr(mse: float) -> float:
    return float("inf") if mse <= 0 else -10.0 * math.log10(mse)


@dataclass
class RayTable:
    origins: torch.Tensor
    dirs: torch.Tensor
    colors: torch.Tensor
    sequence: torch.Tensor
    masked: torch.Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]


def build_ray_table(ds: SceneDataset, ids: list[str]) -> RayTable:
    o, d, c, s, m = [], [], [], [], []
    for i in ids:
        pose, K = ds.poses[i], ds.intrinsics[i]
        pix = patch_centers(K, 1)
        dirs = pixel_directions(pix, pose, K)
        d.append(dirs)
        o.append(np.broadcast_to(pose.center, dirs.shape))
        c.append(ds.image_float(i).reshape(-1, 3))
        s.append(np.full(len(dirs), ds.sequence_index(i)))
        mask = ds.mask(i)
        m.append(np.zeros(len(dirs), bool) if mask is None else np.asarray(mask, bool).reshape(-1))
    return RayTable(
        torch.tensor(np.concatenate(o), dtype=torch.float32),
        torch.tensor(np.concatenate(d), dtype=torch.float32),
        torch.tensor(np.concatenate(c), dtype=torch.float32),
        torch.tensor(np.concatenate(s), dtype=torch.long),
        torch.tensor(np.concatenate(m)),
    )


@dataclass
class EpochLog:
    epoch: int
    loss: float
    psnr: float


@dataclass
class TrainResult:
    field: SceneField
    log: list[EpochLog] = field(default_factory=list)
    train_psnr: float | None = None


def field_config_for(ds: SceneDataset, cfg: NerfTrainConfig) -> FieldConfig:
    return FieldConfig(
        feature_dim=cfg.feature_dim, n_layers=cfg.n_layers, skip_layer_index=cfg.skip_layer_index,
        pe_x_bands=cfg.pe_x_bands, pe_d_bands=cfg.pe_d_bands, appearance_dim=cfg.appearance_dim,
        n_sequences=max(len(ds.sequence_names()), 1), near=ds.near, far=ds.far,
        n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
    )


def train_scene(ds: SceneDataset, cfg: NerfTrainConfig, seed: int = 0, evaluate: bool = True) -> TrainResult:
    """Fit a field to the training split with Adam and cosine annealing to zero."""
    ids = list(ds.train_ids)[: cfg.max_train_images]
    if not ids:
        raise EmptyDataset("dataset has no training images")
    torch.manual_seed(seed)
    net = SceneField(field_config_for(ds, cfg))
    rays = build_ray_table(ds, ids)
    usable = torch.nonzero(~rays.masked).squeeze(1)
    if len(usable) == 0:
        raise AllMasked("every training pixel is masked")
    result = TrainResult(net)
    if cfg.epochs == 0:
        return result

    gen = torch.Generator().manual_seed(seed)
    per_epoch = len(usable) if cfg.rays_per_epoch is None else min(cfg.rays_per_epoch, len(usable))
    steps_per_epoch = max(1, math.ceil(per_epoch / cfg.rays_per_batch))
    total = steps_per_epoch * cfg.epochs
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total, eta_min=0.0)
    else:
        sched = None

    for epoch in range(1, cfg.epochs + 1):
        order = usable[torch.randperm(len(usable), generator=gen)][:per_epoch]
        loss_sum, n_sum = 0.0, 0
        for s in range(0, per_epoch, cfg.rays_per_batch):
            idx = order[s:s + cfg.rays_per_batch]
            out = render_rays(net, rays.origins[idx], rays.dirs[idx], appearance_id=rays.sequence[idx], generator=gen)
            loss = photometric_loss(out.color, rays.colors[idx], rays.masked[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            loss_sum += float(loss.detach()) * len(idx)
            n_sum += len(idx)
        mse = loss_sum / n_sum
        result.log.append(EpochLog(epoch, mse, mse_to_psnr(mse)))
        log.info("epoch %d loss %.6f psnr %.2f", epoch, mse, mse_to_psnr(mse))

    if evaluate:
        result.train_psnr = evaluate_psnr(net, ds, ids)
    return result


@torch.no_grad()
def evaluate_psnr(net: SceneField, ds: SceneDataset, ids: list[str]) -> float:
    """PSNR of deterministic full-resolution renders over unmasked pixels."""
    se, n = 0.0, 0
    for i in ids:
        K = ds.intrinsics[i]
        view = render_view(ds.poses[i], K, 1, net, appearance_id=ds.sequence_index(i))
        target = ds.image_float(i).reshape(-1, 3).astype(np.float64)
        keep = np.ones(len(target), bool) if ds.mask(i) is None else ~np.asarray(ds.mask(i), bool).reshape(-1)
        se += float(((view.color[keep] - target[keep]) ** 2).sum())
        n += int(keep.sum()) * 3
    return mse_to_psnr(se / n)


def write_metrics_log(entries: list[EpochLog], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch loss psnr\n")
        for e in entries:
            fh.write(f"{e.epoch} {e.loss:.8f} {e.psnr:.4f}\n")


def save_field(net: SceneField, path: str | Path) -> Path:
    return save_checkpoint(path, dict(net.state_dict()), asdict(net.config), kind="scene_field")


def load_field(path: str | Path) -> SceneField:
    tensors, config, _ = load_checkpoint(path)
    net = SceneField(FieldConfig(**config))
    net.load_state_dict(tensors)
    net.eval()
    return net

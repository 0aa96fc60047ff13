"""Radiance field network with tappable point-encoder features."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import LayerOutOfRange


def positional_encode(x: torch.Tensor, bands: int) -> torch.Tensor:
    """``concat(x, sin(2^b pi x), cos(2^b pi x))`` for ``b < bands``.

    Sines for every band come first, then cosines, each grouped band-major.
    """
    if bands < 0:
        raise ValueError("bands must be >= 0")
    if bands == 0:
        return x
    freqs = (2.0 ** torch.arange(bands, dtype=x.dtype)) * torch.pi
    scaled = (x[..., None, :] * freqs[:, None]).flatten(-2)
    return torch.cat([x, torch.sin(scaled), torch.cos(scaled)], dim=-1)


def encoded_dim(k: int, bands: int) -> int:
    return k * (1 + 2 * bands)


@dataclass
class FieldConfig:
    feature_dim: int = 256
    n_layers: int = 7
    skip_layer_index: int = 4
    pe_x_bands: int = 10
    pe_d_bands: int = 4
    appearance_dim: int = 16
    n_sequences: int = 1
    near: float = 0.05
    far: float = 2.0
    n_coarse: int = 128
    n_fine: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


class SceneField(nn.Module):
    """Point encoder ``f^1..f^L`` plus density and color decoders.

    Layer ``skip_layer_index + 1`` receives ``P_x(X)`` concatenated with the
    previous feature. The color decoder sees ``f^L``, ``P_d(d)`` and the
    appearance vector of the capture sequence.
    """

    def __init__(self, config: FieldConfig | None = None):
        super().__init__()
        self.config = config = config or FieldConfig()
        W = config.feature_dim
        pe_x = encoded_dim(3, config.pe_x_bands)
        pe_d = encoded_dim(3, config.pe_d_bands)
        layers = []
        for j in range(1, config.n_layers + 1):
            if j == 1:
                d_in = pe_x
            elif j == config.skip_layer_index + 1:
                d_in = W + pe_x
            else:
                d_in = W
            layers.append(nn.Linear(d_in, W))
        self.encoder = nn.ModuleList(layers)
        self.density_head = nn.Linear(W, 1)
        self.color_hidden = nn.Linear(W + pe_d + config.appearance_dim, W // 2)
        self.color_out = nn.Linear(W // 2, 3)
        self.appearance = nn.Parameter(torch.zeros(max(config.n_sequences, 1), config.appearance_dim))

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.n_layers:
            raise LayerOutOfRange(f"feature layer {layer} not in 1..{self.n_layers}")

    def encoder_features(self, points: torch.Tensor, layer: int | None = None):
        """Run the point encoder; returns ``(f^layer, f^L)``.

        ``layer=None`` skips the tap and returns ``(None, f^L)``.
        """
        if layer is not None:
            self.check_layer(layer)
        pe = positional_encode(points, self.config.pe_x_bands)
        h = pe
        tap = None
        for j, lin in enumerate(self.encoder, start=1):
            if j == self.config.skip_layer_index + 1 and j > 1:
                h = torch.cat([h, pe], dim=-1)
            h = F.relu(lin(h))
            if j == layer:
                tap = h
        return tap, h

    def density(self, last: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.density_head(last).squeeze(-1))

    def appearance_vector(self, appearance_id, shape) -> torch.Tensor:
        """Per-sample appearance vectors; ``None`` or unknown ids use the table mean."""
        table = self.appearance
        n = table.shape[0]
        if appearance_id is None:
            vec = table.mean(0)
            return vec.expand(*shape, -1)
        ids = torch.as_tensor(appearance_id, dtype=torch.long)
        if ids.ndim == 0:
            idx = int(ids)
            vec = table[idx] if 0 <= idx < n else table.mean(0)
            return vec.expand(*shape, -1)
        # per-ray ids broadcast over trailing sample dims
        known = (ids >= 0) & (ids < n)
        vecs = torch.where(known[:, None], table[ids.clamp(0, n - 1)], table.mean(0))
        while vecs.ndim < len(shape) + 1:
            vecs = vecs[:, None, :]
        return vecs.expand(*shape, -1)

    def forward(self, points: torch.Tensor, dirs: torch.Tensor, appearance_id=None, feature_layer: int | None = None):
        """Returns ``(sigma, rgb, feature)`` for points ``(..., 3)`` and unit ``dirs``."""
        tap, last = self.encoder_features(points, feature_layer)
        sigma = self.density(last)
        app = self.appearance_vector(appearance_id, points.shape[:-1])
        pd = positional_encode(dirs, self.config.pe_d_bands)
        h = F.relu(self.color_hidden(torch.cat([last, pd, app.to(last.dtype)], dim=-1)))
        rgb = torch.sigmoid(self.color_out(h))
        return sigma, rgb, tap

"""Point-observation tokenizer: station sets in, lattice tokens out, and back.

The encoder aggregates an unordered station set onto an anchor lattice via
k-nearest-neighbor point attention (so it is permutation invariant by
construction), then downsamples to the shared token lattice with residual
conv blocks interleaved with self-attention. The decoder upsamples tokens
back to the anchor lattice and reads out any query location through a
Gaussian kernel regression over anchor features, with altitude entering
both directions through conditional layer norm.

Relative positions handed to the attention are scaled to order one:
degrees divided by POS_SCALE_DEG and altitude in kilometers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geo, kernels
from .blocks import TransformerBlock, sincos_pos_embed
from .errors import ValidationError
from .geo import BBox
from .sat_tokenizer import TokenField
from .synth import StationSet

POS_SCALE_DEG = 45.0
ALT_SCALE_M = 1000.0
MODALITY_NAME = "insitu"


@dataclass
class InSituConfig:
    channels: int = 3
    anchor_grid: int = 16  # anchors per side; lattice is anchor_grid**2
    knn_k: int = 8
    max_obs: int = 64
    width: int = 64
    token_channels: int = 8
    down_stages: int = 1  # each stage halves the lattice side
    heads: int = 4
    kernel_lengthscale_km: float = 300.0
    impute_value: float = 0.0
    alt_embed_dim: int = 16
    gamma_hidden: int = 64
    pos_hidden: int = 32

    @property
    def token_grid(self) -> int:
        return self.anchor_grid // (2**self.down_stages)

    def as_dict(self) -> dict:
        return {
            "channels": self.channels,
            "anchor_grid": self.anchor_grid,
            "knn_k": self.knn_k,
            "max_obs": self.max_obs,
            "width": self.width,
            "token_channels": self.token_channels,
            "down_stages": self.down_stages,
            "heads": self.heads,
            "kernel_lengthscale_km": self.kernel_lengthscale_km,
            "impute_value": self.impute_value,
            "alt_embed_dim": self.alt_embed_dim,
            "gamma_hidden": self.gamma_hidden,
            "pos_hidden": self.pos_hidden,
        }


class PointAttention(nn.Module):
    """Cross attention from one grid feature to its k nearest set features.

    out = sum_k softmax_k(gamma(phi(g) - psi(f_k) + delta_k)) * (alpha(f_k) + delta_k)

    with delta_k = theta(rel_pos_k); the softmax runs per channel over the
    neighbor axis, so a single neighbor gets weight one exactly.
    """

    def __init__(self, width: int, pos_hidden: int = 32, gamma_hidden: int = 64):
        super().__init__()
        self.phi = nn.Linear(width, width)
        self.psi = nn.Linear(width, width)
        self.alpha = nn.Linear(width, width)
        self.theta = nn.Sequential(
            nn.Linear(3, pos_hidden), nn.GELU(), nn.Linear(pos_hidden, width)
        )
        self.gamma = nn.Sequential(
            nn.Linear(width, gamma_hidden), nn.GELU(), nn.Linear(gamma_hidden, width)
        )

    def forward(
        self, f_grid: torch.Tensor, f_neighbors: torch.Tensor, rel_pos: torch.Tensor
    ) -> torch.Tensor:
        # f_grid (..., W), f_neighbors (..., K, W), rel_pos (..., K, 3)
        delta = self.theta(rel_pos)
        logits = self.gamma(self.phi(f_grid).unsqueeze(-2) - self.psi(f_neighbors) + delta)
        weights = logits.softmax(dim=-2)
        return (weights * (self.alpha(f_neighbors) + delta)).sum(dim=-2)


class ConditionalLayerNorm(nn.Module):
    """LayerNorm whose scale and shift are affine in a conditioning vector.

    With the conditioning linear zeroed this is exactly a plain
    parameter-free LayerNorm.
    """

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.to_scale_shift = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.to_scale_shift.weight)
        nn.init.zeros_(self.to_scale_shift.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.to_scale_shift(cond).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + scale) + shift


class AltitudeEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, alt_m: torch.Tensor) -> torch.Tensor:
        return self.net((alt_m / ALT_SCALE_M).unsqueeze(-1))


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class _LatticeAttention(nn.Module):
    """A transformer block applied over the flattened lattice."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.block = TransformerBlock(width, heads)
        self.width = width

    def forward(self, x):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        seq = seq + sincos_pos_embed(h, w, c, device=x.device, dtype=x.dtype)
        seq = self.block(seq)
        return seq.transpose(1, 2).reshape(b, c, h, w)


class InSituEncoder(nn.Module):
    def __init__(self, cfg: InSituConfig):
        super().__init__()
        if cfg.anchor_grid % (2**cfg.down_stages):
            raise ValidationError("anchor_grid must be divisible by 2**down_stages")
        self.cfg = cfg
        self.obs_proj = nn.Linear(2 * cfg.channels, cfg.width)
        self.alt_embed = AltitudeEmbed(cfg.alt_embed_dim)
        self.obs_cln = ConditionalLayerNorm(cfg.width, cfg.alt_embed_dim)
        self.anchor_embed = nn.Sequential(
            nn.Linear(2, cfg.pos_hidden), nn.GELU(), nn.Linear(cfg.pos_hidden, cfg.width)
        )
        self.point_attn = PointAttention(cfg.width, cfg.pos_hidden, cfg.gamma_hidden)
        stages = []
        for _ in range(cfg.down_stages):
            stages += [
                ResBlock(cfg.width),
                _LatticeAttention(cfg.width, cfg.heads),
                nn.Conv2d(cfg.width, cfg.width, 3, stride=2, padding=1),
            ]
        stages += [ResBlock(cfg.width), _LatticeAttention(cfg.width, cfg.heads)]
        self.down = nn.Sequential(*stages)
        self.to_tokens = nn.Conv2d(cfg.width, cfg.token_channels, 1)

    def station_features(self, st: StationSet, dtype=torch.float32) -> torch.Tensor:
        """Per-station features: imputed values + presence flags, altitude-conditioned."""
        vals = np.where(st.present, st.values, self.cfg.impute_value)
        x = torch.cat(
            [
                torch.as_tensor(vals, dtype=dtype),
                torch.as_tensor(st.present.astype(np.float64), dtype=dtype),
            ],
            dim=-1,
        )
        alt = torch.as_tensor(st.alts, dtype=dtype)
        return self.obs_cln(self.obs_proj(x), self.alt_embed(alt))

    def aggregate(self, st: StationSet, bbox: BBox, dtype=torch.float32) -> torch.Tensor:
        """Anchor-lattice features (L*L, width) from a station set."""
        cfg = self.cfg
        anchors = geo.grid_anchors(bbox, cfg.anchor_grid)
        a_lon = np.array([p.lon for p in anchors])
        a_lat = np.array([p.lat for p in anchors])
        k = min(cfg.knn_k, st.n_stations)
        neighbor_idx = np.stack(geo.knn(anchors, st.points(), k))  # (L*L, k)
        feats = self.station_features(st, dtype)  # (n, width)
        gathered = feats[torch.as_tensor(neighbor_idx, dtype=torch.long)]  # (L*L, k, width)
        rel = np.stack(
            [
                (a_lon[:, None] - st.lons[neighbor_idx]) / POS_SCALE_DEG,
                (a_lat[:, None] - st.lats[neighbor_idx]) / POS_SCALE_DEG,
                (0.0 - st.alts[neighbor_idx]) / ALT_SCALE_M,
            ],
            axis=-1,
        )
        anchor_xy = torch.as_tensor(
            np.stack([a_lon / 180.0, a_lat / 90.0], axis=-1), dtype=dtype
        )
        f_grid = self.anchor_embed(anchor_xy)
        return self.point_attn(f_grid, gathered, torch.as_tensor(rel, dtype=dtype))

    def forward(
        self, st: StationSet, bbox: BBox, rng: np.random.Generator | None = None, dtype=torch.float32
    ):
        """Tokens (token_channels, G, G) for the window, G = token_grid.

        When the window holds more than max_obs stations, a subset is drawn
        without replacement from `rng` (a fixed default generator if none is
        given, so inference is deterministic); otherwise every station is
        used and no rng state is consumed.
        """
        cfg = self.cfg
        inside = st.in_bbox(bbox)
        if inside.n_stations == 0:
            g = cfg.token_grid
            return torch.zeros(cfg.token_channels, g, g, dtype=dtype), np.zeros((g, g), np.uint8)
        if inside.n_stations > cfg.max_obs:
            if rng is None:
                rng = np.random.default_rng(0)
            pick = np.sort(rng.choice(inside.n_stations, cfg.max_obs, replace=False))
            inside = inside.subset(pick)
        grid = self.aggregate(inside, bbox, dtype)  # (L*L, width)
        lat = grid.transpose(0, 1).reshape(1, cfg.width, cfg.anchor_grid, cfg.anchor_grid)
        tokens = self.to_tokens(self.down(lat))[0]
        g = cfg.token_grid
        return tokens, np.ones((g, g), np.uint8)


def encode_stations(
    encoder: InSituEncoder, st: StationSet, bbox: BBox, rng: np.random.Generator | None = None
) -> TokenField:
    """Public wrapper returning a TokenField (all-invalid when no stations)."""
    tokens, valid = encoder(st, bbox, rng)
    return TokenField(tokens, valid, bbox, st.time_hours, MODALITY_NAME)


class InSituDecoder(nn.Module):
    def __init__(self, cfg: InSituConfig):
        super().__init__()
        self.cfg = cfg
        self.from_tokens = nn.Conv2d(cfg.token_channels, cfg.width, 1)
        stages = []
        for _ in range(cfg.down_stages):
            stages += [
                _LatticeAttention(cfg.width, cfg.heads),
                nn.ConvTranspose2d(cfg.width, cfg.width, 2, stride=2),
            ]
        stages += [_LatticeAttention(cfg.width, cfg.heads), ResBlock(cfg.width)]
        self.up = nn.Sequential(*stages)
        self.log_lengthscale = nn.Parameter(
            torch.log(torch.tensor(float(cfg.kernel_lengthscale_km)))
        )
        self.alt_embed = AltitudeEmbed(cfg.alt_embed_dim)
        self.q_cln = ConditionalLayerNorm(cfg.width, cfg.alt_embed_dim)
        self.var_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.GELU(), nn.Linear(cfg.width, 1))
            for _ in range(cfg.channels)
        )

    def tokens_to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        """(token_channels, G, G) -> anchor features (L*L, width)."""
        x = self.up(self.from_tokens(tokens.unsqueeze(0)))
        return x[0].flatten(1).transpose(0, 1)

    def kernel_weights(self, dist_km: torch.Tensor) -> torch.Tensor:
        """Normalized Gaussian kernel weights per query row; rows sum to 1.

        Queries whose kernel mass underflows to zero fall back to a one-hot
        weight on the nearest anchor.
        """
        ls = torch.exp(self.log_lengthscale)
        psi = torch.exp(-dist_km.pow(2) / (2.0 * ls.pow(2)))
        denom = psi.sum(dim=-1, keepdim=True)
        dead = denom.squeeze(-1) == 0
        if bool(dead.any()):
            onehot = torch.zeros_like(psi)
            nearest = dist_km.argmin(dim=-1)
            onehot[torch.arange(psi.shape[0]), nearest] = 1.0
            psi = torch.where(dead[:, None], onehot, psi)
            denom = psi.sum(dim=-1, keepdim=True)
        return psi / denom

    def readout(
        self,
        grid_feats: torch.Tensor,
        anchor_lons: np.ndarray,
        anchor_lats: np.ndarray,
        q_lons: np.ndarray,
        q_lats: np.ndarray,
        q_alts: torch.Tensor,
    ) -> torch.Tensor:
        """Kernel-regress anchor features at query points; (Q, channels) out."""
        d = kernels.haversine_matrix(q_lons, q_lats, anchor_lons, anchor_lats)
        w = self.kernel_weights(torch.as_tensor(d, dtype=grid_feats.dtype))
        f = w @ grid_feats
        f = self.q_cln(f, self.alt_embed(q_alts))
        return torch.cat([head(f) for head in self.var_heads], dim=-1)

    def forward(self, tf: TokenField, q_lons, q_lats, q_alts: torch.Tensor) -> torch.Tensor:
        if tf.bbox is None:
            raise ValidationError("TokenField has no bbox; cannot place anchors")
        anchors = geo.grid_anchors(tf.bbox, self.cfg.anchor_grid)
        a_lon = np.array([p.lon for p in anchors])
        a_lat = np.array([p.lat for p in anchors])
        grid = self.tokens_to_grid(tf.tokens)
        return self.readout(grid, a_lon, a_lat, np.asarray(q_lons), np.asarray(q_lats), q_alts)


def decode_at(decoder: InSituDecoder, tf: TokenField, queries: list[geo.GeoPoint]) -> torch.Tensor:
    """Predicted station variables at query points, (Q, channels)."""
    q_lons = np.array([p.lon for p in queries])
    q_lats = np.array([p.lat for p in queries])
    q_alts = torch.tensor([p.alt for p in queries], dtype=tf.tokens.dtype)
    return decoder(tf, q_lons, q_lats, q_alts)


def insitu_joint_loss(
    y: torch.Tensor, y_hat: torch.Tensor, present: torch.Tensor
) -> torch.Tensor:
    """Mean absolute error over present entries; zero if nothing is present."""
    p = present.to(y.dtype)
    total = p.sum()
    if total.item() == 0:
        return torch.zeros((), dtype=y.dtype)
    return (torch.abs(y - y_hat) * p).sum() / total

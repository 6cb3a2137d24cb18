"""Variational tokenizer for gridded satellite imagery with validity masks.

The encoder patchifies [values * mask, mask], runs masked attention blocks
(valid tokens attend only valid tokens), selects tokens by eroding the
binarized patch-validity raster, and projects to per-token Gaussian
moments with ``latent_mult * channels`` latent channels. The decoder fills
non-selected positions with a learned embedding and maps back to pixels.

Because the encoder multiplies values by the mask before anything else,
pixel values outside the mask cannot influence any output, which is what
the mask-locality tests pin down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import geo, kernels
from .blocks import PatchEmbed, PixelHead, TransformerBlock, sincos_pos_embed
from .errors import DivergenceError, ValidationError
from .geo import BBox
from .synth import SwathFrame


@dataclass
class SatTokenizerConfig:
    channels: int = 2
    patch: int = 4
    latent_mult: int = 4
    width: int = 64
    depth: int = 2
    heads: int = 4
    beta: float = 1e-6
    binarize_thresh: float = 0.5
    erosion_radius: int = 1

    @property
    def token_channels(self) -> int:
        return self.latent_mult * self.channels

    def as_dict(self) -> dict:
        return {
            "channels": self.channels,
            "patch": self.patch,
            "latent_mult": self.latent_mult,
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "beta": self.beta,
            "binarize_thresh": self.binarize_thresh,
            "erosion_radius": self.erosion_radius,
        }


@dataclass
class TokenField:
    """A lattice of latent tokens for one modality, window and time."""

    tokens: torch.Tensor  # (token_channels, Ht, Wt)
    valid: np.ndarray  # (Ht, Wt) uint8, 1 = real token
    bbox: Optional[BBox]
    time_hours: float
    modality: str

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=np.uint8)
        if self.tokens.ndim != 3 or self.valid.shape != tuple(self.tokens.shape[1:]):
            raise ValidationError(
                f"tokens {tuple(self.tokens.shape)} must be (C, Ht, Wt) matching valid {self.valid.shape}"
            )

    @property
    def lattice(self) -> tuple[int, int]:
        return self.tokens.shape[1], self.tokens.shape[2]


def token_masks(mask: np.ndarray, cfg: SatTokenizerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Patch-level validity rasters: (attention mask, post-erosion selection).

    A patch counts as valid when at least `binarize_thresh` of its pixels
    are valid; the selection additionally erodes that raster so kept tokens
    have fully-valid neighborhoods.
    """
    frac = geo.area_downsample(mask, cfg.patch)
    attn_valid = (frac >= cfg.binarize_thresh).astype(np.uint8)
    selected = kernels.erode(attn_valid, cfg.erosion_radius)
    return attn_valid, selected


def recon_mask(mask: np.ndarray, selected: np.ndarray, patch: int) -> np.ndarray:
    """Pixel mask supervised by the reconstruction loss.

    The post-erosion selection upsampled p-fold, intersected with the
    original pixel mask.
    """
    up = np.repeat(np.repeat(selected, patch, axis=0), patch, axis=1)
    return (up & mask.astype(np.uint8)).astype(np.uint8)


class SatTokenizer(nn.Module):
    def __init__(self, cfg: SatTokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.channels + 1, cfg.width, cfg.patch)
        self.enc_blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.enc_norm = nn.LayerNorm(cfg.width)
        self.to_moments = nn.Linear(cfg.width, 2 * cfg.token_channels)
        self.from_tokens = nn.Linear(cfg.token_channels, cfg.width)
        self.fill_embed = nn.Parameter(torch.zeros(cfg.width))
        self.dec_blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.dec_norm = nn.LayerNorm(cfg.width)
        self.head = PixelHead(cfg.width, cfg.channels, cfg.patch)
        nn.init.normal_(self.fill_embed, std=0.02)

    def _pos(self, ht: int, wt: int, like: torch.Tensor) -> torch.Tensor:
        return sincos_pos_embed(ht, wt, self.cfg.width, device=like.device, dtype=like.dtype)

    def encode_tensors(
        self, values: torch.Tensor, mask: torch.Tensor, attn_valid: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-token Gaussian moments for a batch.

        values (B, C, H, W), mask (B, 1, H, W) in {0,1}, attn_valid (B, N)
        bool. Returns mu, logvar of shape (B, N, token_channels). The
        explicit zero-fill of values outside the mask is load-bearing.
        """
        x = torch.cat([values * mask, mask.to(values.dtype)], dim=1)
        tokens, (ht, wt) = self.patch_embed(x)
        tokens = tokens + self._pos(ht, wt, tokens)
        for blk in self.enc_blocks:
            tokens = blk(tokens, attn_valid)
        moments = self.to_moments(self.enc_norm(tokens))
        mu, logvar = moments.chunk(2, dim=-1)
        return mu, logvar

    def decode_tensors(
        self, z: torch.Tensor, selected: torch.Tensor, lattice: tuple[int, int]
    ) -> torch.Tensor:
        """Reconstruct pixels from tokens; non-selected positions use the fill.

        z (B, N, token_channels), selected (B, N) bool. Returns (B, C, H, W).
        """
        ht, wt = lattice
        x = self.from_tokens(z)
        fill = self.fill_embed.to(x.dtype).expand_as(x)
        x = torch.where(selected[:, :, None], x, fill)
        x = x + self._pos(ht, wt, x)
        for blk in self.dec_blocks:
            x = blk(x, selected)
        x = self.dec_norm(x)
        return self.head(x, (ht, wt))

    @staticmethod
    def reparameterize(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        eps = torch.randn_like(mu)
        return mu + torch.exp(0.5 * logvar) * eps

    # ------------------------------------------------------------------
    # single-frame convenience API

    def encode(self, frame: SwathFrame, sample: bool = False) -> TokenField:
        """Tokenize one frame; tokens are mu unless `sample` draws z ~ q."""
        attn_valid, selected = token_masks(frame.mask, self.cfg)
        values = torch.from_numpy(frame.values[None].astype(np.float32))
        mask = torch.from_numpy(frame.mask[None, None].astype(np.float32))
        av = torch.from_numpy(attn_valid.reshape(1, -1).astype(bool))
        with torch.no_grad():
            mu, logvar = self.encode_tensors(values, mask, av)
            z = self.reparameterize(mu, logvar) if sample else mu
        ht, wt = selected.shape
        tokens = z[0].transpose(0, 1).reshape(self.cfg.token_channels, ht, wt)
        return TokenField(tokens, selected, frame.bbox, frame.time_hours, frame.instrument_id)

    def decode(self, tf: TokenField) -> SwathFrame:
        """Reconstruct the window; output mask is the selection upsampled."""
        ht, wt = tf.lattice
        z = tf.tokens.reshape(self.cfg.token_channels, ht * wt).transpose(0, 1)[None]
        sel = torch.from_numpy(tf.valid.reshape(1, -1).astype(bool))
        with torch.no_grad():
            recon = self.decode_tensors(z.to(torch.float32), sel, (ht, wt))
        up = np.repeat(np.repeat(tf.valid, self.cfg.patch, 0), self.cfg.patch, 1)
        values = recon[0].numpy() * up[None]
        if tf.bbox is None:
            raise ValidationError("TokenField has no bbox; cannot build a frame")
        return SwathFrame(values, up, tf.bbox, tf.time_hours, tf.modality)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Unnormalized KL(q || N(0, I)) summed over all latent elements."""
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - 1.0 - logvar)


def vae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    m_rec: torch.Tensor,
    mu: torch.Tensor,
    logvar: torch.Tensor,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, rec, kl): masked L1 plus beta-weighted per-element KL.

    The L1 term averages |x - x_hat| over supervised pixels (mask count
    times channels); the KL term is the closed-form sum divided by the
    latent element count. An all-zero m_rec contributes no L1 term.
    """
    m = m_rec.to(x.dtype)
    count = m.sum() * x.shape[-3]
    if count.item() > 0:
        rec = (torch.abs(x - x_hat) * m.unsqueeze(-3)).sum() / count
    else:
        rec = torch.zeros((), dtype=x.dtype)
    kl = kl_divergence(mu, logvar) / mu.numel()
    return rec + beta * kl, rec, kl


# ---------------------------------------------------------------------------
# training


def build_window_pool(
    frames: list[SwathFrame],
    cfg: SatTokenizerConfig,
    window: tuple[int, int] = (32, 32),
    stride: int = 32,
):
    """Cut frames into cell windows, keeping those with at least one attended token.

    Narrow swaths routinely produce windows whose post-erosion selection is
    empty; those still train (the reconstruction term vanishes and only the
    KL term remains) so they stay in the pool. Windows with no attended
    token at all are dropped: they would feed the attention an empty key
    set. Returns a list of dicts with values/mask arrays and precomputed
    patch-validity rasters.
    """
    pool = []
    for fr in frames:
        h, w = fr.mask.shape
        for r, c in geo.window_slices((h, w), window, stride):
            sub_m = fr.mask[r : r + window[0], c : c + window[1]]
            attn_valid, selected = token_masks(sub_m, cfg)
            if attn_valid.sum() == 0:
                continue
            sub_v = fr.values[:, r : r + window[0], c : c + window[1]]
            pool.append(
                {
                    "values": sub_v.astype(np.float32),
                    "mask": sub_m,
                    "attn_valid": attn_valid,
                    "selected": selected,
                    "m_rec": recon_mask(sub_m, selected, cfg.patch),
                }
            )
    return pool


def _stack_batch(items, device=None):
    values = torch.from_numpy(np.stack([it["values"] for it in items]))
    mask = torch.from_numpy(np.stack([it["mask"] for it in items])[:, None].astype(np.float32))
    av = torch.from_numpy(np.stack([it["attn_valid"] for it in items]).reshape(len(items), -1).astype(bool))
    sel = torch.from_numpy(np.stack([it["selected"] for it in items]).reshape(len(items), -1).astype(bool))
    m_rec = torch.from_numpy(np.stack([it["m_rec"] for it in items]).astype(np.float32))
    return values, mask, av, sel, m_rec


def train_sat_tokenizer(
    frames: list[SwathFrame],
    cfg: SatTokenizerConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    window: tuple[int, int] = (32, 32),
    stride: int = 32,
    fixed_batch: bool = False,
    model: SatTokenizer | None = None,
) -> tuple[SatTokenizer, list[tuple[int, float, float, float]]]:
    """Train (or continue training) a tokenizer on windows cut from frames.

    With `fixed_batch` the same first `batch_size` windows are used every
    step, which is the overfitting setup. Returns the model and a trace of
    (step, rec, kl, total). Raises DivergenceError on a non-finite loss.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    pool = build_window_pool(frames, cfg, window, stride)
    if not pool:
        raise ValidationError("no windows with selected tokens; nothing to train on")
    if model is None:
        model = SatTokenizer(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    lattice = pool[0]["selected"].shape
    trace = []
    for step in range(steps):
        if fixed_batch:
            items = pool[: min(batch_size, len(pool))]
        else:
            idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
            items = [pool[i] for i in idx]
        values, mask, av, sel, m_rec = _stack_batch(items)
        mu, logvar = model.encode_tensors(values, mask, av)
        z = model.reparameterize(mu, logvar)
        recon = model.decode_tensors(z, sel, lattice)
        total, rec, kl = vae_loss(values, recon, m_rec, mu, logvar, cfg.beta)
        if not math.isfinite(total.item()):
            raise DivergenceError(f"non-finite tokenizer loss at step {step}: {total.item()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append((step, float(rec.item()), float(kl.item()), float(total.item())))
    return model, trace

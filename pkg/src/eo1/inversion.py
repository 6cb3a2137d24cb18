"""Dense product retrieval from fused window tokens.

Mirrors the satellite decoder: tokens in, attention blocks, a linear
de-patch head out, trained with L1 against the analytic product fields.
Window outputs are stitched onto the global grid by averaging overlaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import synth
from .blocks import PixelHead, TransformerBlock, sincos_pos_embed
from .errors import DivergenceError, ValidationError
from .geo import BBox
from .synth import ProductField


@dataclass
class InversionConfig:
    in_channels: int  # concatenated token channels across modalities
    width: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 4  # pixels per token side

    def as_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "width": self.width,
            "depth": self.depth,
            "heads": self.heads,
            "patch": self.patch,
        }


class InversionModel(nn.Module):
    def __init__(self, cfg: InversionConfig):
        super().__init__()
        self.cfg = cfg
        self.from_tokens = nn.Linear(cfg.in_channels, cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.width)
        self.head = PixelHead(cfg.width, 1, cfg.patch)

    def forward(self, tokens: torch.Tensor, lattice: tuple[int, int]) -> torch.Tensor:
        """tokens (B, N, in_channels) -> product (B, 1, H, W)."""
        x = self.from_tokens(tokens)
        x = x + sincos_pos_embed(
            lattice[0], lattice[1], self.cfg.width, device=x.device, dtype=x.dtype
        )
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x), lattice)


def stack_window_tokens(tokens: dict[str, torch.Tensor]) -> tuple[torch.Tensor, tuple[int, int]]:
    """Concatenate per-modality (C, ht, wt) token maps into (N, sum C)."""
    if not tokens:
        raise ValidationError("need at least one modality")
    names = sorted(tokens)
    shapes = {tuple(tokens[n].shape[1:]) for n in names}
    if len(shapes) != 1:
        raise ValidationError(f"token lattices disagree: {shapes}")
    ht, wt = shapes.pop()
    cat = torch.cat([tokens[n] for n in names], dim=0)
    return cat.reshape(cat.shape[0], ht * wt).transpose(0, 1), (ht, wt)


def invert(
    model: InversionModel,
    tokens: dict[str, torch.Tensor],
    bbox: BBox,
    time_hours: float,
    product_id: str = "precip_proxy",
) -> ProductField:
    """Retrieve a product window from one time slot's completed tokens."""
    flat, lattice = stack_window_tokens(tokens)
    with torch.no_grad():
        out = model(flat[None], lattice)
    return ProductField(out[0].numpy(), bbox, time_hours, product_id)


def invert_loss(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Masked mean absolute error; with no mask every cell is supervised."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = torch.abs(pred - target)
    if mask is None:
        return err.mean()
    m = mask.to(pred.dtype)
    count = m.sum()
    if count.item() == 0:
        return torch.zeros((), dtype=pred.dtype)
    return (err * m).sum() / (count * pred.shape[-3])


def train_invert(
    samples: list[tuple[dict[str, torch.Tensor], ProductField]],
    cfg: InversionConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    model: InversionModel | None = None,
) -> tuple[InversionModel, list[tuple[int, float]]]:
    """Train the retrieval head on (window tokens, product target) pairs."""
    if not samples:
        raise ValidationError("need at least one training sample")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    flats = []
    lattice = None
    for toks, _ in samples:
        flat, lat = stack_window_tokens(toks)
        if lattice is None:
            lattice = lat
        elif lat != lattice:
            raise ValidationError("inconsistent lattices across samples")
        flats.append(flat)
    xs = torch.stack(flats)
    ys = torch.stack([torch.from_numpy(pf.values.astype(np.float32)) for _, pf in samples])
    if model is None:
        model = InversionModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace = []
    for step in range(steps):
        idx = torch.from_numpy(
            np.sort(rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False))
        )
        out = model(xs[idx], lattice)
        loss = invert_loss(out, ys[idx])
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite inversion loss at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append((step, float(loss.item())))
    return model, trace


def stitch_product_windows(
    fields: list[ProductField], extent: BBox, grid_shape: tuple[int, int]
) -> np.ndarray:
    """Mosaic window products onto the global grid, averaging overlaps.

    Cells no window covers are left at zero. Returns (1, H, W) float32.
    """
    if not fields:
        raise ValidationError("need at least one window")
    acc = np.zeros(grid_shape, dtype=np.float64)
    cnt = np.zeros(grid_shape, dtype=np.float64)
    for pf in fields:
        r0, c0, hh, ww = synth.bbox_cell_window(extent, grid_shape, pf.bbox)
        acc[r0 : r0 + hh, c0 : c0 + ww] += pf.values[0].astype(np.float64)
        cnt[r0 : r0 + hh, c0 : c0 + ww] += 1.0
    out = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return out[None].astype(np.float32)

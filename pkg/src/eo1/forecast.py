"""Latent forecasting on the global token lattice.

A window's modalities are concatenated along channel and time into one
(sum_m C_m * T)-channel image over the token lattice, patch-embedded, run
through a plain transformer, and mapped back per modality, predicting the
next window of the same length. Rollout feeds predictions back in
autoregressively; decoding to observation space happens only at
evaluation time via the frozen satellite tokenizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import PatchEmbed, PixelHead, TransformerBlock, sincos_pos_embed
from .errors import DivergenceError, ValidationError
from .geo import GLOBAL_BBOX, BBox
from .sat_tokenizer import SatTokenizer, TokenField
from .synth import SwathFrame


@dataclass
class ForecastConfig:
    modalities: dict[str, int]  # name -> token channels
    t_slots: int = 2
    lattice: tuple[int, int] = (16, 32)
    patch: int = 2
    dim: int = 96
    depth: int = 2
    heads: int = 4
    dt_hours: float = 6.0

    def as_dict(self) -> dict:
        return {
            "modalities": dict(self.modalities),
            "t_slots": self.t_slots,
            "lattice": list(self.lattice),
            "patch": self.patch,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "dt_hours": self.dt_hours,
        }


@dataclass
class LatentWindow:
    """Complete token history for one window: name -> (C, T, h, w)."""

    tokens: dict[str, torch.Tensor]
    t0_hours: float
    dt_hours: float

    def __post_init__(self):
        shapes = {n: tuple(t.shape) for n, t in self.tokens.items()}
        if not shapes:
            raise ValidationError("LatentWindow needs at least one modality")
        some = next(iter(shapes.values()))
        for n, s in shapes.items():
            if len(s) != 4 or s[1:] != some[1:]:
                raise ValidationError(f"inconsistent token shapes: {shapes}")

    @property
    def t_slots(self) -> int:
        return next(iter(self.tokens.values())).shape[1]

    @property
    def lattice(self) -> tuple[int, int]:
        t = next(iter(self.tokens.values()))
        return t.shape[2], t.shape[3]


def _check_window(win: LatentWindow, cfg: ForecastConfig) -> None:
    missing = set(cfg.modalities) - set(win.tokens)
    if missing:
        raise ValidationError(f"window is missing modalities {sorted(missing)}")
    for name in cfg.modalities:
        t = win.tokens[name]
        want = (cfg.modalities[name], cfg.t_slots, cfg.lattice[0], cfg.lattice[1])
        if tuple(t.shape) != want:
            raise ValidationError(f"{name}: token shape {tuple(t.shape)} != {want}")
        if not torch.isfinite(t).all():
            raise ValidationError(f"{name}: non-finite tokens in window")


class ForecastModel(nn.Module):
    def __init__(self, cfg: ForecastConfig):
        super().__init__()
        h, w = cfg.lattice
        if h % cfg.patch or w % cfg.patch:
            raise ValidationError(f"patch {cfg.patch} must divide lattice {cfg.lattice}")
        self.cfg = cfg
        in_ch = sum(cfg.modalities.values()) * cfg.t_slots
        self.embed = PatchEmbed(in_ch, cfg.dim, cfg.patch)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.heads_out = nn.ModuleDict(
            {
                n: PixelHead(cfg.dim, c * cfg.t_slots, cfg.patch)
                for n, c in cfg.modalities.items()
            }
        )

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """x (B, sum C_m * T, h, w) -> per-modality (B, C_m, T, h, w)."""
        tokens, lattice = self.embed(x)
        tokens = tokens + sincos_pos_embed(
            lattice[0], lattice[1], self.cfg.dim, device=x.device, dtype=x.dtype
        )
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        out = {}
        b = x.shape[0]
        h, w = self.cfg.lattice
        for name, c in self.cfg.modalities.items():
            img = self.heads_out[name](tokens, lattice)  # (B, C*T, h, w)
            out[name] = img.reshape(b, c, self.cfg.t_slots, h, w)
        return out


def window_tensor(win: LatentWindow, cfg: ForecastConfig) -> torch.Tensor:
    """Stack a window into the model's input layout, (sum C_m * T, h, w)."""
    h, w = cfg.lattice
    parts = [win.tokens[n].reshape(-1, h, w) for n in cfg.modalities]
    return torch.cat(parts, dim=0)


def forecast(model: ForecastModel, win: LatentWindow) -> LatentWindow:
    """Predict the next window (same length, one window ahead)."""
    cfg = model.cfg
    _check_window(win, cfg)
    x = window_tensor(win, cfg)[None]
    with torch.no_grad():
        preds = model(x)
    tokens = {n: p[0].detach() for n, p in preds.items()}
    return LatentWindow(
        tokens, win.t0_hours + cfg.t_slots * win.dt_hours, win.dt_hours
    )


def pred_loss(
    pred: dict[str, torch.Tensor], truth: dict[str, torch.Tensor], strict: bool = False
) -> torch.Tensor:
    """Forecast error over a window's modalities.

    Strict mode is the plain normalization: summed squared error over all
    modalities divided by (n_modalities * h * w), with modality channel and
    time dims left unaveraged. The default additionally divides each
    modality's sum by (C_m * T) so differently-sized modalities weigh
    equally. Tensors may carry leading batch dims, which are averaged.
    """
    if set(pred) != set(truth):
        raise ValidationError(f"modality mismatch: {sorted(pred)} vs {sorted(truth)}")
    if not pred:
        raise ValidationError("pred_loss needs at least one modality")
    some = next(iter(pred.values()))
    h, w = some.shape[-2], some.shape[-1]
    n_batch = int(np.prod(some.shape[:-4])) if some.ndim > 4 else 1
    total = None
    for name, p in pred.items():
        t = truth[name]
        if p.shape != t.shape:
            raise ValidationError(f"{name}: shape {tuple(p.shape)} != {tuple(t.shape)}")
        sse = (p - t).pow(2).sum()
        if not strict:
            c, tt = p.shape[-4], p.shape[-3]
            sse = sse / (c * tt)
        total = sse if total is None else total + sse
    return total / (len(pred) * h * w * n_batch)


def rollout(model: ForecastModel, win: LatentWindow, steps: int) -> list[LatentWindow]:
    """Autoregressive forecast: each prediction becomes the next input."""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    out = []
    cur = win
    for _ in range(steps):
        cur = forecast(model, cur)
        out.append(cur)
    return out


def persistence_loss(
    pairs: list[tuple[LatentWindow, LatentWindow]], strict: bool = False
) -> float:
    """Mean pred_loss of the copy-forward baseline over transition pairs."""
    if not pairs:
        raise ValidationError("need at least one transition pair")
    vals = [float(pred_loss(a.tokens, b.tokens, strict).item()) for a, b in pairs]
    return float(np.mean(vals))


def train_forecast(
    pairs: list[tuple[LatentWindow, LatentWindow]],
    cfg: ForecastConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    model: ForecastModel | None = None,
) -> tuple[ForecastModel, list[tuple[int, float]]]:
    """Train on transition pairs with the default-mode loss; trace (step, loss)."""
    if not pairs:
        raise ValidationError("need at least one transition pair")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    for a, b in pairs:
        _check_window(a, cfg)
        _check_window(b, cfg)
    xs = torch.stack([window_tensor(a, cfg) for a, _ in pairs])
    ys = {
        n: torch.stack([b.tokens[n] for _, b in pairs]) for n in cfg.modalities
    }
    if model is None:
        model = ForecastModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    trace = []
    for step in range(steps):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        ti = torch.from_numpy(np.sort(idx))
        preds = model(xs[ti])
        loss = pred_loss(preds, {n: ys[n][ti] for n in ys})
        if not math.isfinite(loss.item()):
            raise DivergenceError(f"non-finite forecast loss at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append((step, float(loss.item())))
    return model, trace


def decode_forecast_to_obs(
    win: LatentWindow,
    sat_models: dict[str, SatTokenizer],
    extent: BBox = GLOBAL_BBOX,
    tile_tokens: tuple[int, int] = (8, 8),
) -> dict[str, list[SwathFrame]]:
    """Decode forecast tokens back to global gridded fields per time slot.

    The global lattice is split into non-overlapping tiles of the size the
    tokenizers were trained on, each tile is decoded with a fully-valid
    token field, and the tiles are mosaicked back; by construction every
    cell is written exactly once.
    """
    h, w = win.lattice
    th, tw = tile_tokens
    if h % th or w % tw:
        raise ValidationError(f"tile {tile_tokens} must divide lattice {(h, w)}")
    out: dict[str, list[SwathFrame]] = {}
    for name, model in sat_models.items():
        if name not in win.tokens:
            continue
        p = model.cfg.patch
        canvas_shape = (model.cfg.channels, h * p, w * p)
        frames = []
        for s in range(win.t_slots):
            canvas = np.full(canvas_shape, np.nan, dtype=np.float32)
            for r0 in range(0, h, th):
                for c0 in range(0, w, tw):
                    tile_bbox = BBox(
                        extent.lon_min + (extent.lon_max - extent.lon_min) * c0 / w,
                        extent.lon_min + (extent.lon_max - extent.lon_min) * (c0 + tw) / w,
                        extent.lat_max - (extent.lat_max - extent.lat_min) * (r0 + th) / h,
                        extent.lat_max - (extent.lat_max - extent.lat_min) * r0 / h,
                    )
                    tf = TokenField(
                        win.tokens[name][:, s, r0 : r0 + th, c0 : c0 + tw],
                        np.ones((th, tw), np.uint8),
                        tile_bbox,
                        win.t0_hours + s * win.dt_hours,
                        name,
                    )
                    fr = model.decode(tf)
                    canvas[:, r0 * p : (r0 + th) * p, c0 * p : (c0 + tw) * p] = fr.values
            if np.isnan(canvas).any():
                raise ValidationError("decoded mosaic left unset cells")
            frames.append(
                SwathFrame(
                    canvas,
                    np.ones(canvas_shape[1:], np.uint8),
                    extent,
                    win.t0_hours + s * win.dt_hours,
                    name,
                )
            )
        out[name] = frames
    return out

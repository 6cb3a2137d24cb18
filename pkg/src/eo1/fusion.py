"""Masked multimodal fusion over a short time window of token lattices.

Every configured modality contributes one block of lattice positions per
time slot to a single token sequence. Real tokens survive where they are
observed and not sampled out; everything else (inherently missing
positions, absent modalities, sampled mask) is replaced by that modality's
learned domain token, then modality, time-slot and lattice-position
encodings are added and a plain transformer runs over the whole sequence.
Per-modality linear heads map back to token space.

The reconstruction loss covers exactly the sampled masked positions,
because inherently missing positions have no ground-truth token; the set
substituted by domain tokens is still (missing OR masked), which the
bookkeeping tests pin against a set oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import geo
from .blocks import TransformerBlock
from .errors import DivergenceError, ValidationError
from .geo import BBox
from .insitu import MODALITY_NAME as INSITU, InSituDecoder, InSituEncoder, insitu_joint_loss
from .sat_tokenizer import SatTokenizer, TokenField
from .synth import StationSet, SwathFrame


@dataclass
class FusionConfig:
    modalities: dict[str, int]  # name -> token channels, order defines the sequence
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mask_ratio: float = 0.6
    t_slots: int = 2
    lattice: tuple[int, int] = (8, 8)
    dt_hours: float = 6.0

    @property
    def positions(self) -> int:
        return self.lattice[0] * self.lattice[1]

    def as_dict(self) -> dict:
        return {
            "modalities": dict(self.modalities),
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "mask_ratio": self.mask_ratio,
            "t_slots": self.t_slots,
            "lattice": list(self.lattice),
            "dt_hours": self.dt_hours,
        }


@dataclass
class ModalityBundle:
    """Everything one window contributes: per-modality, per-slot token fields.

    A None entry means the modality is absent at that slot (no instrument
    pass, no stations); absent slots become all-domain-token blocks.
    """

    bbox: BBox
    times: list[float]
    fields: dict[str, list[TokenField | None]] = field(default_factory=dict)

    def __post_init__(self):
        for name, per_slot in self.fields.items():
            if len(per_slot) != len(self.times):
                raise ValidationError(f"modality {name} has {len(per_slot)} slots, want {len(self.times)}")


class MMAE(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        if not cfg.modalities:
            raise ValidationError("need at least one modality")
        self.cfg = cfg
        self.names = list(cfg.modalities)
        dim = cfg.dim
        self.projectors = nn.ModuleDict(
            {n: nn.Linear(c, dim) for n, c in cfg.modalities.items()}
        )
        self.norms = nn.ModuleDict({n: nn.LayerNorm(dim) for n in self.names})
        self.domain_tokens = nn.ParameterDict(
            {n: nn.Parameter(torch.randn(dim) * 0.02) for n in self.names}
        )
        self.modality_embed = nn.ParameterDict(
            {n: nn.Parameter(torch.randn(dim) * 0.02) for n in self.names}
        )
        self.time_embed = nn.Parameter(torch.randn(cfg.t_slots, dim) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(cfg.positions, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(dim)
        self.heads_out = nn.ModuleDict(
            {n: nn.Linear(dim, c) for n, c in cfg.modalities.items()}
        )

    def domain_token(self, name: str) -> torch.Tensor:
        return self.domain_tokens[name]

    def project_modality(self, name: str, tokens: torch.Tensor) -> torch.Tensor:
        """Project token channels into fusion space and layer-normalize.

        tokens (..., N, C_m) -> (..., N, dim); the per-modality norm makes
        scales comparable before assembly.
        """
        return self.norms[name](self.projectors[name](tokens))

    def assemble_input(
        self,
        tokens: dict[str, torch.Tensor],
        valid: dict[str, torch.Tensor],
        sampled: dict[str, torch.Tensor],
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Build the fused sequence, substituting domain tokens.

        tokens[name] is (B, S, N, C_m), valid/sampled are (B, S, N) bool.
        A position keeps its real token iff valid and not sampled;
        everything else gets the modality's domain token. Returns the
        sequence (B, n_modalities*S*N, dim) and the per-modality keep
        masks, whose complement is exactly the substituted set.
        """
        parts = []
        keep = {}
        for name in self.names:
            tok = tokens[name]
            b, s, n, _ = tok.shape
            if s != self.cfg.t_slots or n != self.cfg.positions:
                raise ValidationError(
                    f"{name}: got slots={s} positions={n}, config wants "
                    f"{self.cfg.t_slots}/{self.cfg.positions}"
                )
            kp = valid[name] & ~sampled[name]
            base = self.project_modality(name, tok)
            dt = self.domain_tokens[name].to(base.dtype)
            x = torch.where(kp[..., None], base, dt.expand_as(base))
            x = (
                x
                + self.modality_embed[name].to(base.dtype)
                + self.time_embed.to(base.dtype)[None, :, None, :]
                + self.pos_embed.to(base.dtype)[None, None, :, :]
            )
            parts.append(x.reshape(b, s * n, self.cfg.dim))
            keep[name] = kp
        return torch.cat(parts, dim=1), keep

    def forward(
        self,
        tokens: dict[str, torch.Tensor],
        valid: dict[str, torch.Tensor],
        sampled: dict[str, torch.Tensor],
    ) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
        """Reconstruct every modality's token lattice; (preds, keep masks)."""
        seq, keep = self.assemble_input(tokens, valid, sampled)
        for blk in self.blocks:
            seq = blk(seq)
        seq = self.norm(seq)
        s, n = self.cfg.t_slots, self.cfg.positions
        preds = {}
        for i, name in enumerate(self.names):
            block = seq[:, i * s * n : (i + 1) * s * n, :]
            b = block.shape[0]
            preds[name] = self.heads_out[name](block.reshape(b, s, n, self.cfg.dim))
        return preds, keep


def sample_token_masks(
    valid: dict[str, torch.Tensor], ratio: float, rng: np.random.Generator
) -> dict[str, torch.Tensor]:
    """Sample floor(ratio * n_valid) valid positions per (window, modality, slot).

    Masked positions are always a subset of the valid ones, so every
    masked position has a ground-truth token to reconstruct.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ValidationError(f"mask ratio must lie in [0, 1], got {ratio}")
    out = {}
    for name, v in valid.items():
        m = torch.zeros_like(v)
        b, s, n = v.shape
        for bi in range(b):
            for si in range(s):
                idx = np.nonzero(v[bi, si].numpy())[0]
                k = int(math.floor(ratio * len(idx)))
                if k > 0:
                    chosen = rng.choice(idx, size=k, replace=False)
                    m[bi, si, torch.from_numpy(np.sort(chosen))] = True
        out[name] = m
    return out


def mmae_loss(
    preds: dict[str, torch.Tensor],
    targets: dict[str, torch.Tensor],
    sampled: dict[str, torch.Tensor],
) -> torch.Tensor:
    """Masked-token reconstruction: mean over modalities of the per-modality
    mean squared token error at sampled positions, averaged over windows.

    Modalities with no sampled positions in a window are skipped (and the
    modality count shrinks accordingly); a window with nothing sampled
    anywhere contributes zero.
    """
    some = next(iter(preds.values()))
    b = some.shape[0]
    total = torch.zeros(b, dtype=some.dtype)
    n_present = torch.zeros(b, dtype=some.dtype)
    for name, p in preds.items():
        m = sampled[name].to(p.dtype)
        sq = (p - targets[name]).pow(2).sum(dim=-1)  # (B, S, N)
        counts = m.sum(dim=(1, 2))
        term = (sq * m).sum(dim=(1, 2)) / counts.clamp(min=1.0)
        has = (counts > 0).to(p.dtype)
        total = total + term * has
        n_present = n_present + has
    per_window = total / n_present.clamp(min=1.0)
    return per_window.mean()


def complete_window(
    model: MMAE,
    tokens: dict[str, torch.Tensor],
    valid: dict[str, torch.Tensor],
) -> dict[str, torch.Tensor]:
    """Inference-time completion: no sampling, observed tokens kept.

    Missing positions (invalid tokens, absent modalities) are predicted by
    the model; observed positions pass through unchanged. Works for any
    subset of observed modalities, including none.
    """
    sampled = {n: torch.zeros_like(v) for n, v in valid.items()}
    with torch.no_grad():
        preds, _ = model(tokens, valid, sampled)
    out = {}
    for name in model.names:
        v = valid[name][..., None]
        out[name] = torch.where(v, tokens[name], preds[name])
    return out


# ---------------------------------------------------------------------------
# window assembly from datasets


def cut_frame_window(fr: SwathFrame, origin: tuple[int, int], window: tuple[int, int], bbox: BBox) -> SwathFrame:
    r, c = origin
    hs, ws = window
    return SwathFrame(
        fr.values[:, r : r + hs, c : c + ws],
        fr.mask[r : r + hs, c : c + ws],
        bbox,
        fr.time_hours,
        fr.instrument_id,
    )


def tokens_as_lattice(tf: TokenField) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, C) tokens and (N,) validity from a TokenField."""
    c, ht, wt = tf.tokens.shape
    return (
        tf.tokens.reshape(c, ht * wt).transpose(0, 1),
        torch.from_numpy(tf.valid.reshape(-1).astype(bool)),
    )


def lattice_as_tokens(flat: torch.Tensor, lattice: tuple[int, int]) -> torch.Tensor:
    """(N, C) back to (C, Ht, Wt)."""
    ht, wt = lattice
    return flat.transpose(0, 1).reshape(flat.shape[1], ht, wt)


def bundle_to_tensors(
    bundle: ModalityBundle, cfg: FusionConfig
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Stack a bundle into per-modality (1, S, N, C) tokens + (1, S, N) valid."""
    tokens = {}
    valid = {}
    for name, c in cfg.modalities.items():
        toks = []
        vals = []
        per_slot = bundle.fields.get(name, [None] * cfg.t_slots)
        for tf in per_slot:
            if tf is None:
                toks.append(torch.zeros(cfg.positions, c))
                vals.append(torch.zeros(cfg.positions, dtype=torch.bool))
            else:
                t, v = tokens_as_lattice(tf)
                toks.append(t)
                vals.append(v)
        tokens[name] = torch.stack(toks)[None]
        valid[name] = torch.stack(vals)[None]
    return tokens, valid


# ---------------------------------------------------------------------------
# joint training of fusion + in-situ tokenizer against frozen sat tokenizers


def freeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def frozen_grad_norm(module: nn.Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.pow(2).sum().item())
    return math.sqrt(total)


def train_mmae(
    frames: dict[str, list[SwathFrame]],
    stations: list[StationSet],
    sat_models: dict[str, SatTokenizer],
    insitu_enc: InSituEncoder,
    insitu_dec: InSituDecoder,
    cfg: FusionConfig,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    batch_windows: int = 4,
    window_cells: tuple[int, int] = (32, 32),
    window_stride: int = 32,
    station_mask_ratio: float | None = None,
    fixed_windows: list[tuple[int, int]] | None = None,
    model: MMAE | None = None,
) -> tuple[MMAE, list[tuple[int, float, float, float]]]:
    """Jointly train the fusion model and the in-situ tokenizer.

    Satellite tokenizers are frozen; their window tokens are precomputed
    once. Station sets are masked at the encoder input with the token mask
    ratio (whole stations dropped), while the joint station loss supervises
    the present entries of every station in the window. Reconstruction
    targets are not detached: for the jointly trained in-situ branch the
    squared error pulls on both ends, and the station loss keeps that
    latent space from collapsing to a constant. Trace rows are
    (step, recon, insitu, total). `fixed_windows` pins the sampled
    (tile, t0) pairs for overfitting runs.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    names = list(cfg.modalities)
    sat_names = [n for n in names if n != INSITU]
    for m in sat_models.values():
        m.eval()
        freeze_module(m)

    n_steps_data = min(len(v) for v in frames.values())
    if stations:
        n_steps_data = min(n_steps_data, len(stations))
    if n_steps_data < cfg.t_slots:
        raise ValidationError("not enough time steps for one window")
    some_frame = frames[sat_names[0]][0]
    grid_shape = some_frame.mask.shape
    tiles = geo.window_slices(grid_shape, window_cells, window_stride)
    tile_boxes = [
        geo.cell_window_bbox(some_frame.bbox, grid_shape, rc, window_cells) for rc in tiles
    ]

    # frozen tokenization of every (instrument, tile, t) triple, done once
    sat_cache: dict[tuple[str, int, int], TokenField] = {}
    with torch.no_grad():
        for name in sat_names:
            for ti, rc in enumerate(tiles):
                for t in range(n_steps_data):
                    fr = cut_frame_window(frames[name][t], rc, window_cells, tile_boxes[ti])
                    sat_cache[(name, ti, t)] = sat_models[name].encode(fr)

    t0s = list(range(0, n_steps_data - cfg.t_slots + 1))
    pairs = [(ti, t0) for ti in range(len(tiles)) for t0 in t0s]
    if fixed_windows is not None:
        pairs = list(fixed_windows)
    if model is None:
        model = MMAE(cfg)
    params = (
        list(model.parameters())
        + list(insitu_enc.parameters())
        + list(insitu_dec.parameters())
    )
    opt = torch.optim.Adam(params, lr=lr)
    st_ratio = cfg.mask_ratio if station_mask_ratio is None else station_mask_ratio
    trace = []

    for step in range(steps):
        if fixed_windows is not None:
            batch = pairs
        else:
            idx = rng.choice(len(pairs), size=min(batch_windows, len(pairs)), replace=False)
            batch = [pairs[i] for i in idx]
        tok_rows = {n: [] for n in names}
        val_rows = {n: [] for n in names}
        station_rows = []  # (slot stations, bbox, batch index, slot)
        for bi, (ti, t0) in enumerate(batch):
            bbox = tile_boxes[ti]
            for name in sat_names:
                toks = []
                vals = []
                for s in range(cfg.t_slots):
                    tf = sat_cache[(name, ti, t0 + s)]
                    t_flat, v_flat = tokens_as_lattice(tf)
                    toks.append(t_flat)
                    vals.append(v_flat)
                tok_rows[name].append(torch.stack(toks))
                val_rows[name].append(torch.stack(vals))
            if INSITU in names:
                toks = []
                vals = []
                for s in range(cfg.t_slots):
                    st = stations[t0 + s].in_bbox(bbox)
                    station_rows.append((st, bbox, bi, s))
                    if st.n_stations > 0 and st_ratio > 0.0:
                        n_drop = int(math.floor(st_ratio * st.n_stations))
                        keep_idx = rng.permutation(st.n_stations)[: st.n_stations - n_drop]
                        st_in = st.subset(np.sort(keep_idx))
                    else:
                        st_in = st
                    t_lat, v_lat = insitu_enc(st_in, bbox, rng)
                    toks.append(t_lat.reshape(cfg.modalities[INSITU], -1).transpose(0, 1))
                    vals.append(torch.from_numpy(v_lat.reshape(-1).astype(bool)))
                tok_rows[INSITU].append(torch.stack(toks))
                val_rows[INSITU].append(torch.stack(vals))
        tokens = {n: torch.stack(tok_rows[n]) for n in names}
        valid = {n: torch.stack(val_rows[n]) for n in names}
        sampled = sample_token_masks(valid, cfg.mask_ratio, rng)
        preds, _ = model(tokens, valid, sampled)
        targets = tokens
        recon = mmae_loss(preds, targets, sampled)

        joint = torch.zeros((), dtype=recon.dtype)
        if INSITU in names and station_rows:
            ys = []
            yhats = []
            presents = []
            for st, bbox, bi, s in station_rows:
                if st.n_stations == 0:
                    continue
                flat = preds[INSITU][bi, s]
                tf = TokenField(
                    lattice_as_tokens(flat, cfg.lattice),
                    np.ones(cfg.lattice, np.uint8),
                    bbox,
                    st.time_hours,
                    INSITU,
                )
                q_alts = torch.as_tensor(st.alts, dtype=flat.dtype)
                yhat = insitu_dec(tf, st.lons, st.lats, q_alts)
                ys.append(torch.as_tensor(st.values, dtype=flat.dtype))
                yhats.append(yhat)
                presents.append(torch.as_tensor(st.present))
            if ys:
                joint = insitu_joint_loss(
                    torch.cat(ys), torch.cat(yhats), torch.cat(presents)
                )
        total = recon + joint
        if not math.isfinite(total.item()):
            raise DivergenceError(f"non-finite fusion loss at step {step}: {total.item()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append((step, float(recon.item()), float(joint.item()), float(total.item())))
    return model, trace

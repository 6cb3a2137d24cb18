"""Stage drivers behind the CLI: generate, train, evaluate, sweep, plot.

Each stage reads and writes a fixed layout under the run directory:

    dataset/            synthetic observation container (gen)
    checkpoints/        model checkpoints (train stages)
    traces/             loss trace CSVs, one per trained model
    metrics.json        evaluation report (eval)
    forecast_dataset/   decoded forecasts in the container format (eval)
    scaling.json        sweep points and power-law fits (scale)
    plots/              figures plus sibling CSVs (plot)
    manifests/          per-stage audit of inputs and outputs

Stage manifests record a checksum per input and output file so a run can
be audited after the fact. Nothing here writes wall-clock timestamps;
two runs from the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

from . import geo
from .checkpoint import load_checkpoint, load_module, save_module
from .config import RunConfig
from .dataset import Dataset, read_dataset, write_dataset
from .errors import ValidationError
from .forecast import (
    ForecastConfig,
    ForecastModel,
    LatentWindow,
    decode_forecast_to_obs,
    forecast,
    pred_loss,
    persistence_loss,
    rollout,
    train_forecast,
)
from .fusion import (
    MMAE,
    FusionConfig,
    complete_window,
    cut_frame_window,
    tokens_as_lattice,
    train_mmae,
)
from .insitu import (
    InSituConfig,
    InSituDecoder,
    InSituEncoder,
    MODALITY_NAME as INSITU,
    decode_at,
)
from .inversion import (
    InversionConfig,
    InversionModel,
    invert,
    stitch_product_windows,
    train_invert,
)
from .metrics import MetricReport, elevation_regression, station_mae, threshold_skill
from .sat_tokenizer import SatTokenizer, SatTokenizerConfig, TokenField, train_sat_tokenizer
from .scaling import SweepConfig, scaling_sweep
from .synth import (
    GLOBAL_BBOX,
    ProductField,
    bbox_cell_window,
    derive_product,
    gen_truth,
    make_instrument,
    sample_geo,
    sample_leo,
    sample_stations,
)

STAGES = (
    "gen",
    "train-tok",
    "train-mmae",
    "train-forecast",
    "train-invert",
    "eval",
    "scale",
    "plot",
)


# ---------------------------------------------------------------------------
# run layout and manifests


def dataset_dir(out_dir: str) -> str:
    return os.path.join(out_dir, "dataset")


def ckpt_path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, "checkpoints", f"{name}.ckpt")


def trace_path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, "traces", f"{name}.csv")


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _audit_entry(out_dir: str, path: str) -> dict:
    """Checksum record for one artifact; directories stand in via manifest.json."""
    target = path
    if os.path.isdir(path):
        target = os.path.join(path, "manifest.json")
    if not os.path.isfile(target):
        raise ValidationError(f"expected artifact missing: {target}")
    return {
        "path": os.path.relpath(path, out_dir),
        "sha256": _sha256_file(target),
    }


def write_stage_manifest(
    out_dir: str, stage: str, cfg: RunConfig, inputs: list[str], outputs: list[str]
) -> str:
    os.makedirs(os.path.join(out_dir, "manifests"), exist_ok=True)
    payload = {
        "stage": stage,
        "config": cfg.as_dict(),
        "inputs": [_audit_entry(out_dir, p) for p in inputs],
        "outputs": [_audit_entry(out_dir, p) for p in outputs],
    }
    path = os.path.join(out_dir, "manifests", f"{stage}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def _write_trace(path: str, header: list[str], rows: list) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row))
            f.write("\n")


# ---------------------------------------------------------------------------
# generation


def stage_gen(cfg: RunConfig, out_dir: str) -> dict:
    """Generate truth, observe it with every instrument, write the container."""
    seed = int(cfg["seed"])
    truth = gen_truth(
        seed=seed,
        steps=int(cfg["steps"]),
        h=int(cfg["grid.h"]),
        w=int(cfg["grid.w"]),
        channels=int(cfg["grid.channels"]),
        dt_hours=float(cfg["dt_hours"]),
    )
    insts = [
        make_instrument(
            "leo0",
            "leo",
            seed=seed,
            truth_channels=truth.channels,
            channels=int(cfg["leo.channels"]),
            inclination_deg=float(cfg["leo.inclination_deg"]),
            half_width_deg=float(cfg["leo.half_width_deg"]),
            node_rate_deg_per_hour=float(cfg["leo.node_rate_deg_per_hour"]),
        ),
        make_instrument(
            "geo0",
            "geo",
            seed=seed,
            truth_channels=truth.channels,
            channels=int(cfg["geo.channels"]),
            nadir_lon=float(cfg["geo.nadir_lon"]),
            radius_km=float(cfg["geo.radius_km"]),
        ),
    ]
    frames = {}
    for inst in insts:
        sampler = sample_leo if inst.kind == "leo" else sample_geo
        frames[inst.instrument_id] = [
            sampler(truth, inst, t) for t in range(truth.steps)
        ]
    stations = [
        sample_stations(
            truth,
            n=int(cfg["stations.count"]),
            t_index=t,
            missing_rate=float(cfg["stations.missing_rate"]),
            seed=seed,
            channels=int(cfg["stations.channels"]),
        )
        for t in range(truth.steps)
    ]
    products = {
        pid: [derive_product(truth, truth.extent, t, pid) for t in range(truth.steps)]
        for pid in cfg.str_list("products")
    }
    generator = {
        "kind": "synthetic-advection",
        "instruments": [
            {
                "instrument_id": inst.instrument_id,
                "kind": inst.kind,
                "channels": inst.channels,
                "mixing": inst.mixing.tolist(),
                "bias": inst.bias.tolist(),
                "inclination_deg": inst.inclination_deg,
                "node_lon0_deg": inst.node_lon0_deg,
                "node_rate_deg_per_hour": inst.node_rate_deg_per_hour,
                "half_width_deg": inst.half_width_deg,
                "nadir_lon": inst.nadir_lon,
                "nadir_lat": inst.nadir_lat,
                "radius_km": inst.radius_km,
            }
            for inst in insts
        ],
        "stations": {
            "count": int(cfg["stations.count"]),
            "channels": int(cfg["stations.channels"]),
            "missing_rate": float(cfg["stations.missing_rate"]),
        },
        "products": cfg.str_list("products"),
    }
    dims = {
        "h": truth.grid_shape[0],
        "w": truth.grid_shape[1],
        "channels": truth.channels,
        "steps": truth.steps,
        "dt_hours": truth.dt_hours,
    }
    ds_dir = dataset_dir(out_dir)
    manifest = write_dataset(
        ds_dir,
        seed=seed,
        dims=dims,
        frames=frames,
        stations=stations,
        products=products,
        generator=generator,
    )
    write_stage_manifest(out_dir, "gen", cfg, inputs=[], outputs=[ds_dir])
    return manifest


# ---------------------------------------------------------------------------
# model construction helpers


def _window_cells(cfg: RunConfig) -> tuple[int, int]:
    return int(cfg["window.cells"]), int(cfg["window.cells"])


def _tok_cfg(cfg: RunConfig, channels: int) -> SatTokenizerConfig:
    return SatTokenizerConfig(
        channels=channels,
        patch=int(cfg["tok.patch"]),
        width=int(cfg["tok.width"]),
        depth=int(cfg["tok.depth"]),
        heads=int(cfg["tok.heads"]),
        beta=float(cfg["tok.beta"]),
        erosion_radius=int(cfg["tok.erosion_radius"]),
    )


def _insitu_cfg(cfg: RunConfig, channels: int) -> InSituConfig:
    return InSituConfig(
        channels=channels,
        anchor_grid=int(cfg["insitu.anchor_grid"]),
        knn_k=int(cfg["insitu.knn_k"]),
        max_obs=int(cfg["insitu.max_obs"]),
        width=int(cfg["insitu.width"]),
        token_channels=int(cfg["insitu.token_channels"]),
    )


def load_sat_models(out_dir: str, names: list[str]) -> dict[str, SatTokenizer]:
    models = {}
    for name in names:
        params, header = load_checkpoint(ckpt_path(out_dir, f"tok_{name}"))
        model = SatTokenizer(SatTokenizerConfig(**header["config"]))
        load_module(ckpt_path(out_dir, f"tok_{name}"), model)
        model.eval()
        models[name] = model
    return models


def load_insitu_models(out_dir: str) -> tuple[InSituEncoder, InSituDecoder, InSituConfig]:
    _, header = load_checkpoint(ckpt_path(out_dir, "insitu_enc"))
    icfg = InSituConfig(**header["config"])
    enc = InSituEncoder(icfg)
    dec = InSituDecoder(icfg)
    load_module(ckpt_path(out_dir, "insitu_enc"), enc)
    load_module(ckpt_path(out_dir, "insitu_dec"), dec)
    enc.eval()
    dec.eval()
    return enc, dec, icfg


def _fusion_cfg_from(header: dict) -> FusionConfig:
    d = dict(header["config"])
    d["lattice"] = tuple(d["lattice"])
    d["modalities"] = dict(d["modalities"])
    return FusionConfig(**d)


def load_mmae(out_dir: str) -> tuple[MMAE, FusionConfig]:
    _, header = load_checkpoint(ckpt_path(out_dir, "mmae"))
    fcfg = _fusion_cfg_from(header)
    model = MMAE(fcfg)
    load_module(ckpt_path(out_dir, "mmae"), model)
    model.eval()
    return model, fcfg


def load_forecast_model(out_dir: str) -> tuple[ForecastModel, ForecastConfig]:
    _, header = load_checkpoint(ckpt_path(out_dir, "forecast"))
    d = dict(header["config"])
    d["lattice"] = tuple(d["lattice"])
    d["modalities"] = dict(d["modalities"])
    fcfg = ForecastConfig(**d)
    model = ForecastModel(fcfg)
    load_module(ckpt_path(out_dir, "forecast"), model)
    model.eval()
    return model, fcfg


def load_invert_model(out_dir: str) -> tuple[InversionModel, InversionConfig]:
    _, header = load_checkpoint(ckpt_path(out_dir, "invert"))
    icfg = InversionConfig(**header["config"])
    model = InversionModel(icfg)
    load_module(ckpt_path(out_dir, "invert"), model)
    model.eval()
    return model, icfg


# ---------------------------------------------------------------------------
# training stages


def stage_train_tok(cfg: RunConfig, out_dir: str) -> dict:
    """Train one satellite tokenizer per instrument in the dataset."""
    ds = read_dataset(dataset_dir(out_dir))
    torch.set_num_threads(int(cfg["threads"]))
    outputs = []
    final_losses = {}
    for name in sorted(ds.frames):
        frames = ds.frames[name]
        tok_cfg = _tok_cfg(cfg, frames[0].channels)
        model, trace = train_sat_tokenizer(
            frames,
            tok_cfg,
            steps=int(cfg["tok.steps"]),
            seed=int(cfg["seed"]),
            lr=float(cfg["tok.lr"]),
            batch_size=int(cfg["tok.batch_size"]),
            window=_window_cells(cfg),
            stride=int(cfg["window.stride"]),
        )
        path = ckpt_path(out_dir, f"tok_{name}")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_module(path, model, config=tok_cfg.as_dict(), step=int(cfg["tok.steps"]))
        tpath = trace_path(out_dir, f"tok_{name}")
        _write_trace(tpath, ["step", "recon", "kl", "total"], trace)
        outputs += [path, tpath]
        final_losses[name] = trace[-1][3] if trace else None
    write_stage_manifest(
        out_dir, "train-tok", cfg, inputs=[dataset_dir(out_dir)], outputs=outputs
    )
    return {"final_total_loss": final_losses}


def stage_train_mmae(cfg: RunConfig, out_dir: str) -> dict:
    """Jointly train the fusion model and the in-situ tokenizer."""
    ds = read_dataset(dataset_dir(out_dir))
    torch.set_num_threads(int(cfg["threads"]))
    sat_names = sorted(ds.frames)
    sat_models = load_sat_models(out_dir, sat_names)
    station_channels = ds.stations[0].channels if ds.stations else int(cfg["stations.channels"])
    icfg = _insitu_cfg(cfg, station_channels)
    torch.manual_seed(int(cfg["seed"]) + 1)
    enc = InSituEncoder(icfg)
    dec = InSituDecoder(icfg)
    wc = _window_cells(cfg)
    lattice = (wc[0] // int(cfg["tok.patch"]), wc[1] // int(cfg["tok.patch"]))
    if icfg.token_grid != lattice[0] or icfg.token_grid != lattice[1]:
        raise ValidationError(
            f"in-situ token grid {icfg.token_grid} does not match the "
            f"satellite window lattice {lattice}"
        )
    modalities = {n: sat_models[n].cfg.token_channels for n in sat_names}
    modalities[INSITU] = icfg.token_channels
    fcfg = FusionConfig(
        modalities=modalities,
        dim=int(cfg["mmae.dim"]),
        depth=int(cfg["mmae.depth"]),
        heads=int(cfg["mmae.heads"]),
        mask_ratio=float(cfg["mmae.mask_ratio"]),
        t_slots=int(cfg["mmae.t_slots"]),
        lattice=lattice,
        dt_hours=ds.dt_hours,
    )
    model, trace = train_mmae(
        ds.frames,
        ds.stations,
        sat_models,
        enc,
        dec,
        fcfg,
        steps=int(cfg["mmae.steps"]),
        seed=int(cfg["seed"]),
        lr=float(cfg["mmae.lr"]),
        batch_windows=int(cfg["mmae.batch_windows"]),
        window_cells=wc,
        window_stride=int(cfg["window.stride"]),
        station_mask_ratio=float(cfg["mmae.station_mask_ratio"]),
    )
    outputs = []
    for name, module, conf in (
        ("mmae", model, fcfg.as_dict()),
        ("insitu_enc", enc, icfg.as_dict()),
        ("insitu_dec", dec, icfg.as_dict()),
    ):
        path = ckpt_path(out_dir, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_module(path, module, config=conf, step=int(cfg["mmae.steps"]))
        outputs.append(path)
    tpath = trace_path(out_dir, "mmae")
    _write_trace(tpath, ["step", "recon", "insitu", "total"], trace)
    outputs.append(tpath)
    inputs = [dataset_dir(out_dir)] + [ckpt_path(out_dir, f"tok_{n}") for n in sat_names]
    write_stage_manifest(out_dir, "train-mmae", cfg, inputs=inputs, outputs=outputs)
    return {"final_total_loss": trace[-1][3] if trace else None}


# ---------------------------------------------------------------------------
# latent window assembly (shared by forecast training and evaluation)


def build_latent_windows(
    ds: Dataset,
    sat_models: dict[str, SatTokenizer],
    insitu_enc: InSituEncoder,
    mmae: MMAE,
    fcfg: FusionConfig,
    window_cells: tuple[int, int],
) -> list[LatentWindow]:
    """Complete every tile window and mosaic tokens onto the global lattice.

    Tiles partition the grid (stride = window size), so each global token
    position is written exactly once. Returns one window per valid t0, in
    t0 order; index i covers truth steps [i, i + t_slots).
    """
    some = next(iter(ds.frames.values()))[0]
    grid_shape = some.mask.shape
    if grid_shape[0] % window_cells[0] or grid_shape[1] % window_cells[1]:
        raise ValidationError(
            f"window {window_cells} must partition the grid {grid_shape}"
        )
    tiles = geo.window_slices(grid_shape, window_cells, window_cells[0])
    tile_boxes = [
        geo.cell_window_bbox(some.bbox, grid_shape, rc, window_cells) for rc in tiles
    ]
    lat_tiles = grid_shape[0] // window_cells[0]
    lon_tiles = grid_shape[1] // window_cells[1]
    tile_lat = fcfg.lattice[0]
    global_lattice = (tile_lat * lat_tiles, fcfg.lattice[1] * lon_tiles)

    names = list(fcfg.modalities)
    sat_names = [n for n in names if n != INSITU]
    n_steps = ds.steps
    t_slots = fcfg.t_slots

    # tokenize each (modality, tile, t) once
    cache: dict[tuple[str, int, int], tuple[torch.Tensor, torch.Tensor]] = {}
    with torch.no_grad():
        for name in sat_names:
            for ti, rc in enumerate(tiles):
                for t in range(n_steps):
                    fr = cut_frame_window(
                        ds.frames[name][t], rc, window_cells, tile_boxes[ti]
                    )
                    cache[(name, ti, t)] = tokens_as_lattice(sat_models[name].encode(fr))
        if INSITU in names:
            for ti, bbox in enumerate(tile_boxes):
                for t in range(n_steps):
                    st = ds.stations[t].in_bbox(bbox)
                    toks, valid = insitu_enc(st, bbox)
                    cache[(INSITU, ti, t)] = (
                        toks.reshape(toks.shape[0], -1).transpose(0, 1),
                        torch.from_numpy(valid.reshape(-1).astype(bool)),
                    )

    windows: list[LatentWindow] = []
    gh, gw = global_lattice
    for t0 in range(n_steps - t_slots + 1):
        global_tokens = {
            n: torch.zeros(c, t_slots, gh, gw) for n, c in fcfg.modalities.items()
        }
        for ti, rc in enumerate(tiles):
            tokens = {}
            valid = {}
            for name in names:
                toks = []
                vals = []
                for s in range(t_slots):
                    tk, vl = cache[(name, ti, t0 + s)]
                    toks.append(tk)
                    vals.append(vl)
                tokens[name] = torch.stack(toks)[None]
                valid[name] = torch.stack(vals)[None]
            completed = complete_window(mmae, tokens, valid)
            r0 = (rc[0] // window_cells[0]) * fcfg.lattice[0]
            c0 = (rc[1] // window_cells[1]) * fcfg.lattice[1]
            for name, c in fcfg.modalities.items():
                block = (
                    completed[name][0]
                    .reshape(t_slots, fcfg.lattice[0], fcfg.lattice[1], c)
                    .permute(3, 0, 1, 2)
                )
                global_tokens[name][
                    :, :, r0 : r0 + fcfg.lattice[0], c0 : c0 + fcfg.lattice[1]
                ] = block
        windows.append(
            LatentWindow(global_tokens, t0 * ds.dt_hours, ds.dt_hours)
        )
    return windows


def _forecast_cfg(cfg: RunConfig, fus_cfg: FusionConfig, ds: Dataset,
                  window_cells: tuple[int, int]) -> ForecastConfig:
    some = next(iter(ds.frames.values()))[0]
    grid_shape = some.mask.shape
    lattice = (
        fus_cfg.lattice[0] * (grid_shape[0] // window_cells[0]),
        fus_cfg.lattice[1] * (grid_shape[1] // window_cells[1]),
    )
    return ForecastConfig(
        modalities=dict(fus_cfg.modalities),
        t_slots=fus_cfg.t_slots,
        lattice=lattice,
        patch=int(cfg["forecast.patch"]),
        dim=int(cfg["forecast.dim"]),
        depth=int(cfg["forecast.depth"]),
        heads=int(cfg["forecast.heads"]),
        dt_hours=ds.dt_hours,
    )


def stage_train_forecast(cfg: RunConfig, out_dir: str) -> dict:
    """Train the latent forecaster on consecutive window transitions."""
    ds = read_dataset(dataset_dir(out_dir))
    torch.set_num_threads(int(cfg["threads"]))
    sat_models = load_sat_models(out_dir, sorted(ds.frames))
    enc, _, _ = load_insitu_models(out_dir)
    mmae, fus_cfg = load_mmae(out_dir)
    wc = _window_cells(cfg)
    windows = build_latent_windows(ds, sat_models, enc, mmae, fus_cfg, wc)
    t = fus_cfg.t_slots
    pairs = [
        (windows[t0], windows[t0 + t]) for t0 in range(len(windows) - t)
    ]
    if not pairs:
        raise ValidationError(
            f"dataset with {ds.steps} steps yields no {t}-slot transitions"
        )
    fcfg = _forecast_cfg(cfg, fus_cfg, ds, wc)
    model, trace = train_forecast(
        pairs,
        fcfg,
        steps=int(cfg["forecast.steps"]),
        seed=int(cfg["seed"]),
        lr=float(cfg["forecast.lr"]),
        batch_size=int(cfg["forecast.batch_size"]),
    )
    path = ckpt_path(out_dir, "forecast")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_module(path, model, config=fcfg.as_dict(), step=int(cfg["forecast.steps"]))
    tpath = trace_path(out_dir, "forecast")
    _write_trace(tpath, ["step", "loss"], trace)
    inputs = [dataset_dir(out_dir), ckpt_path(out_dir, "mmae"),
              ckpt_path(out_dir, "insitu_enc")]
    write_stage_manifest(out_dir, "train-forecast", cfg, inputs=inputs,
                         outputs=[path, tpath])
    return {"final_loss": trace[-1][1] if trace else None, "pairs": len(pairs)}


def _tile_token_slices(fus_cfg: FusionConfig, grid_shape: tuple[int, int],
                       window_cells: tuple[int, int]):
    """Global-lattice token slice and bbox per tile, in tile order."""
    tiles = geo.window_slices(grid_shape, window_cells, window_cells[0])
    out = []
    for rc in tiles:
        bbox = geo.cell_window_bbox(GLOBAL_BBOX, grid_shape, rc, window_cells)
        r0 = (rc[0] // window_cells[0]) * fus_cfg.lattice[0]
        c0 = (rc[1] // window_cells[1]) * fus_cfg.lattice[1]
        sl = (
            slice(r0, r0 + fus_cfg.lattice[0]),
            slice(c0, c0 + fus_cfg.lattice[1]),
        )
        out.append((sl, bbox))
    return out


def stage_train_invert(cfg: RunConfig, out_dir: str) -> dict:
    """Train product retrieval heads on completed window tokens."""
    ds = read_dataset(dataset_dir(out_dir))
    torch.set_num_threads(int(cfg["threads"]))
    products = cfg.str_list("products")
    if not products:
        raise ValidationError("no products configured")
    sat_models = load_sat_models(out_dir, sorted(ds.frames))
    enc, _, _ = load_insitu_models(out_dir)
    mmae, fus_cfg = load_mmae(out_dir)
    wc = _window_cells(cfg)
    windows = build_latent_windows(ds, sat_models, enc, mmae, fus_cfg, wc)
    some = next(iter(ds.frames.values()))[0]
    grid_shape = some.mask.shape
    tile_slices = _tile_token_slices(fus_cfg, grid_shape, wc)
    in_channels = sum(fus_cfg.modalities.values())
    outputs = []
    final_losses = {}
    for pid in products:
        if pid not in ds.products:
            raise ValidationError(f"dataset has no product {pid!r}")
        samples = []
        for t0, win in enumerate(windows):
            global_prod = ds.products[pid][t0]
            for (rsl, csl), bbox in tile_slices:
                tokens = {
                    n: win.tokens[n][:, 0, rsl, csl] for n in fus_cfg.modalities
                }
                r0, c0, hh, ww = bbox_cell_window(GLOBAL_BBOX, grid_shape, bbox)
                target_vals = global_prod.values[:, r0 : r0 + hh, c0 : c0 + ww]
                samples.append(
                    (tokens, ProductField(target_vals, bbox, win.t0_hours, pid))
                )
        icfg = InversionConfig(
            in_channels=in_channels,
            width=int(cfg["invert.width"]),
            depth=int(cfg["invert.depth"]),
            heads=int(cfg["invert.heads"]),
            patch=int(cfg["invert.patch"]),
        )
        model, trace = train_invert(
            samples,
            icfg,
            steps=int(cfg["invert.steps"]),
            seed=int(cfg["seed"]),
            lr=float(cfg["invert.lr"]),
            batch_size=int(cfg["invert.batch_size"]),
        )
        path = ckpt_path(out_dir, f"invert_{pid}" if len(products) > 1 else "invert")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_module(path, model, config=icfg.as_dict(), step=int(cfg["invert.steps"]))
        tpath = trace_path(out_dir, f"invert_{pid}" if len(products) > 1 else "invert")
        _write_trace(tpath, ["step", "loss"], trace)
        outputs += [path, tpath]
        final_losses[pid] = trace[-1][1] if trace else None
    inputs = [dataset_dir(out_dir), ckpt_path(out_dir, "mmae")]
    write_stage_manifest(out_dir, "train-invert", cfg, inputs=inputs, outputs=outputs)
    return {"final_loss": final_losses}


# ---------------------------------------------------------------------------
# evaluation


def _station_errors_for_window(
    win: LatentWindow,
    ds: Dataset,
    insitu_dec: InSituDecoder,
    tile_slices,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Decode station predictions for every slot of a window.

    Returns (pred, truth, present, alts) stacked over stations and slots.
    """
    preds = []
    truths = []
    presents = []
    alts = []
    dt = win.dt_hours
    for s in range(win.t_slots):
        t_idx = int(round((win.t0_hours + s * dt) / dt))
        if t_idx >= ds.steps:
            continue
        st_all = ds.stations[t_idx]
        for (rsl, csl), bbox in tile_slices:
            st = st_all.in_bbox(bbox)
            if st.n_stations == 0:
                continue
            tf = TokenField(
                win.tokens[INSITU][:, s, rsl, csl],
                np.ones((rsl.stop - rsl.start, csl.stop - csl.start), np.uint8),
                bbox,
                win.t0_hours + s * dt,
                INSITU,
            )
            with torch.no_grad():
                yhat = decode_at(insitu_dec, tf, st.points())
            preds.append(yhat.numpy())
            truths.append(st.values)
            presents.append(st.present)
            alts.append(st.alts)
    if not preds:
        empty = np.zeros((0, ds.stations[0].channels if ds.stations else 0))
        return empty, empty, empty.astype(bool), np.zeros(0)
    return (
        np.concatenate(preds),
        np.concatenate(truths),
        np.concatenate(presents),
        np.concatenate(alts),
    )


def stage_eval(cfg: RunConfig, out_dir: str) -> MetricReport:
    """Forecast from the first window and score everything against truth."""
    torch.set_num_threads(int(cfg["threads"]))
    eval_ds_path = str(cfg["eval.dataset"]).strip() or dataset_dir(out_dir)
    ds = read_dataset(eval_ds_path)
    sat_models = load_sat_models(out_dir, sorted(ds.frames))
    enc, dec, _ = load_insitu_models(out_dir)
    mmae, fus_cfg = load_mmae(out_dir)
    fmodel, fcfg = load_forecast_model(out_dir)
    imodel, _ = load_invert_model(out_dir)
    products = cfg.str_list("products")
    wc = _window_cells(cfg)
    windows = build_latent_windows(ds, sat_models, enc, mmae, fus_cfg, wc)
    some = next(iter(ds.frames.values()))[0]
    grid_shape = some.mask.shape
    tile_slices = _tile_token_slices(fus_cfg, grid_shape, wc)
    t = fus_cfg.t_slots

    report = MetricReport()

    # one-window-ahead forecast skill vs the persistence baseline
    pairs = [(windows[t0], windows[t0 + t]) for t0 in range(len(windows) - t)]
    if pairs:
        model_losses = []
        for a, b in pairs:
            pred = forecast(fmodel, a)
            model_losses.append(float(pred_loss(pred.tokens, b.tokens).item()))
        report.forecast = {
            "transitions": len(pairs),
            "model_mse": float(np.mean(model_losses)),
            "persistence_mse": persistence_loss(pairs),
        }

    # autoregressive rollout from the first window
    rollout_steps = int(cfg["eval.rollout_steps"])
    max_lead = (ds.steps - t) // t
    rollout_steps = min(rollout_steps, max_lead)
    if rollout_steps < 1:
        raise ValidationError(
            f"dataset with {ds.steps} steps cannot support a rollout"
        )
    lead_windows = rollout(fmodel, windows[0], rollout_steps)

    percentiles = cfg.float_list("eval.skill_percentiles")
    smooth = int(cfg["eval.skill_smooth_window"])
    bins = np.array(cfg.float_list("eval.elevation_bins"))
    pid = products[0] if products else None

    last_obs_hours = windows[0].t0_hours + (t - 1) * ds.dt_hours
    per_lead_station = []
    for lead, win in enumerate(lead_windows, start=1):
        yhat, y, present, alts = _station_errors_for_window(win, ds, dec, tile_slices)
        lead_hours = lead * t * ds.dt_hours
        entry = {"lead_hours": lead_hours}
        if present.size and present.any():
            entry.update(station_mae(yhat, y, present))
        per_lead_station.append(entry)
        if lead == 1 and present.size and present.any():
            report.station = station_mae(yhat, y, present)
            ch0 = present[:, 0]
            if ch0.sum() >= 2:
                try:
                    reg = elevation_regression(
                        (yhat - y)[ch0, 0], alts[ch0], bins
                    )
                    report.elevation = {
                        "slope": reg.slope,
                        "intercept": reg.intercept,
                        "bin_centers": reg.bin_centers,
                        "bin_maes": reg.bin_maes,
                        "bin_counts": reg.bin_counts,
                    }
                except ValidationError:
                    pass

        if pid is not None:
            for s in range(win.t_slots):
                t_idx = int(round((win.t0_hours + s * win.dt_hours) / ds.dt_hours))
                if t_idx >= ds.steps:
                    continue
                fields = []
                for (rsl, csl), bbox in tile_slices:
                    tokens = {
                        n: win.tokens[n][:, s, rsl, csl] for n in fus_cfg.modalities
                    }
                    fields.append(
                        invert(imodel, tokens, bbox, win.t0_hours + s * win.dt_hours, pid)
                    )
                pred_prod = stitch_product_windows(fields, GLOBAL_BBOX, grid_shape)
                truth_prod = ds.products[pid][t_idx].values
                for p in percentiles:
                    miss, fa = threshold_skill(
                        pred_prod[0], truth_prod[0], p, smooth_window=smooth
                    )
                    report.skill.append(
                        {
                            "lead_hours": t_idx * ds.dt_hours - last_obs_hours,
                            "t_index": t_idx,
                            "percentile": float(p),
                            "miss": miss,
                            "false_alarm": fa,
                        }
                    )

    report.extra = {
        "per_lead_station": per_lead_station,
        "rollout_steps": rollout_steps,
        "eval_dataset": os.path.relpath(eval_ds_path, out_dir)
        if eval_ds_path.startswith(out_dir)
        else eval_ds_path,
    }

    # persist decoded forecasts in the observation container format
    decoded: dict[str, list] = {}
    lead_hours_meta = []
    for lead, win in enumerate(lead_windows, start=1):
        frames = decode_forecast_to_obs(
            win, sat_models, extent=GLOBAL_BBOX, tile_tokens=fus_cfg.lattice
        )
        for name, frs in frames.items():
            decoded.setdefault(name, []).extend(frs)
        lead_hours_meta += [
            float(win.t0_hours + s * win.dt_hours) for s in range(win.t_slots)
        ]
    fds_dir = os.path.join(out_dir, "forecast_dataset")
    write_dataset(
        fds_dir,
        seed=ds.seed,
        dims={
            "h": grid_shape[0],
            "w": grid_shape[1],
            "steps": len(lead_hours_meta),
            "dt_hours": ds.dt_hours,
        },
        frames=decoded,
        extra={
            "forecast": True,
            "lead_time_hours": lead_hours_meta,
            "issued_from_hours": float(windows[0].t0_hours),
        },
    )

    mpath = os.path.join(out_dir, "metrics.json")
    report.write(mpath)
    inputs = [eval_ds_path] + [
        ckpt_path(out_dir, n) for n in ("mmae", "insitu_enc", "insitu_dec", "forecast")
    ]
    write_stage_manifest(out_dir, "eval", cfg, inputs=inputs,
                         outputs=[mpath, fds_dir])
    return report


# ---------------------------------------------------------------------------
# scaling sweep and plots


def stage_scale(cfg: RunConfig, out_dir: str) -> dict:
    torch.set_num_threads(int(cfg["threads"]))
    sweep_cfg = SweepConfig(
        seed=int(cfg["seed"]),
        max_steps=int(cfg["scale.max_steps"]),
        eval_every=int(cfg["scale.eval_every"]),
        patience=int(cfg["scale.patience"]),
    )
    result = scaling_sweep(sweep_cfg)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "scaling.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.as_dict(), f, sort_keys=True, indent=1)
        f.write("\n")
    write_stage_manifest(out_dir, "scale", cfg, inputs=[], outputs=[path])
    return result.as_dict()


def stage_plot(cfg: RunConfig, out_dir: str) -> list[str]:
    from .plots import emit_plots

    written = emit_plots(out_dir)
    write_stage_manifest(out_dir, "plot", cfg, inputs=[], outputs=written)
    return written


STAGE_FUNCS = {
    "gen": stage_gen,
    "train-tok": stage_train_tok,
    "train-mmae": stage_train_mmae,
    "train-forecast": stage_train_forecast,
    "train-invert": stage_train_invert,
    "eval": stage_eval,
    "scale": stage_scale,
    "plot": stage_plot,
}


def run_stage(stage: str, cfg: RunConfig, out_dir: str):
    if stage not in STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}; choose from {STAGES}")
    os.makedirs(out_dir, exist_ok=True)
    return STAGE_FUNCS[stage](cfg, out_dir)

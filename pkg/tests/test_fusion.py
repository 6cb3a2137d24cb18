"""Masked multimodal fusion: masking bookkeeping, losses and joint training."""

import numpy as np
import pytest
import torch

from eo1 import fusion, geo, insitu, synth
from eo1 import sat_tokenizer as st
from eo1.errors import ValidationError
from eo1.geo import BBox


def _fcfg(**kw):
    base = dict(
        modalities={"a": 4, "b": 6},
        dim=16,
        depth=1,
        heads=2,
        mask_ratio=0.5,
        t_slots=2,
        lattice=(2, 2),
    )
    base.update(kw)
    return fusion.FusionConfig(**base)


def _rand_inputs(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    tokens = {}
    valid = {}
    for name, c in cfg.modalities.items():
        tokens[name] = torch.from_numpy(
            rng.normal(size=(batch, cfg.t_slots, cfg.positions, c)).astype(np.float32)
        )
        valid[name] = torch.from_numpy(
            rng.random((batch, cfg.t_slots, cfg.positions)) < 0.8
        )
    return tokens, valid


def test_sample_token_masks_counts_and_subset():
    cfg = _fcfg(lattice=(4, 4))
    _, valid = _rand_inputs(cfg, batch=3, seed=1)
    rng = np.random.default_rng(2)
    sampled = fusion.sample_token_masks(valid, 0.5, rng)
    for name, v in valid.items():
        m = sampled[name]
        assert m.shape == v.shape
        assert not (m & ~v).any()  # sampled positions are always valid
        for bi in range(3):
            for si in range(cfg.t_slots):
                n_valid = int(v[bi, si].sum())
                assert int(m[bi, si].sum()) == n_valid // 2


def test_sample_token_masks_extremes_and_validation():
    cfg = _fcfg()
    _, valid = _rand_inputs(cfg, seed=3)
    none = fusion.sample_token_masks(valid, 0.0, np.random.default_rng(0))
    assert all(not m.any() for m in none.values())
    everything = fusion.sample_token_masks(valid, 1.0, np.random.default_rng(0))
    for name in valid:
        assert torch.equal(everything[name], valid[name])
    with pytest.raises(ValidationError):
        fusion.sample_token_masks(valid, 1.5, np.random.default_rng(0))
    a = fusion.sample_token_masks(valid, 0.5, np.random.default_rng(7))
    b = fusion.sample_token_masks(valid, 0.5, np.random.default_rng(7))
    for name in valid:
        assert torch.equal(a[name], b[name])


def test_assemble_input_substitutes_domain_tokens_exactly():
    torch.manual_seed(4)
    cfg = _fcfg()
    model = fusion.MMAE(cfg)
    tokens, valid = _rand_inputs(cfg, seed=5)
    sampled = fusion.sample_token_masks(valid, 0.5, np.random.default_rng(6))
    with torch.no_grad():
        seq, keep = model.assemble_input(tokens, valid, sampled)
    s, n = cfg.t_slots, cfg.positions
    assert seq.shape == (2, len(cfg.modalities) * s * n, cfg.dim)
    for i, name in enumerate(model.names):
        kp = valid[name] & ~sampled[name]
        assert torch.equal(keep[name], kp)
        with torch.no_grad():
            base = model.project_modality(name, tokens[name])
            dt = model.domain_tokens[name]
            x = torch.where(kp[..., None], base, dt.expand_as(base))
            x = (
                x
                + model.modality_embed[name]
                + model.time_embed[None, :, None, :]
                + model.pos_embed[None, None, :, :]
            )
            want = x.reshape(2, s * n, cfg.dim)
        assert torch.equal(seq[:, i * s * n : (i + 1) * s * n, :], want)


def test_assemble_input_rejects_wrong_lattice():
    cfg = _fcfg()
    model = fusion.MMAE(cfg)
    tokens, valid = _rand_inputs(cfg)
    bad = {n: t[:, :, :3, :] for n, t in tokens.items()}
    bad_valid = {n: v[:, :, :3] for n, v in valid.items()}
    with pytest.raises(ValidationError):
        model.assemble_input(bad, bad_valid, bad_valid)


def test_mmae_loss_worked_example():
    # one window, one slot, two positions, one channel
    preds = {
        "a": torch.tensor([[[[3.0], [5.0]]]], dtype=torch.float64),
        "b": torch.tensor([[[[1.0], [1.0]]]], dtype=torch.float64),
    }
    targets = {
        "a": torch.tensor([[[[1.0], [1.0]]]], dtype=torch.float64),
        "b": torch.tensor([[[[0.0], [0.0]]]], dtype=torch.float64),
    }
    sampled = {
        "a": torch.tensor([[[True, True]]]),
        "b": torch.tensor([[[False, True]]]),
    }
    # a: ((3-1)^2 + (5-1)^2)/2 = 10; b: (1-0)^2/1 = 1; mean = 5.5
    got = fusion.mmae_loss(preds, targets, sampled)
    assert abs(got.item() - 5.5) < 1e-12


def test_mmae_loss_skips_unsampled_modalities():
    preds = {
        "a": torch.tensor([[[[2.0]]]], dtype=torch.float64),
        "b": torch.tensor([[[[9.0]]]], dtype=torch.float64),
    }
    targets = {
        "a": torch.tensor([[[[0.0]]]], dtype=torch.float64),
        "b": torch.tensor([[[[0.0]]]], dtype=torch.float64),
    }
    sampled = {
        "a": torch.tensor([[[True]]]),
        "b": torch.tensor([[[False]]]),
    }
    assert abs(fusion.mmae_loss(preds, targets, sampled).item() - 4.0) < 1e-12
    nothing = {
        "a": torch.tensor([[[False]]]),
        "b": torch.tensor([[[False]]]),
    }
    assert fusion.mmae_loss(preds, targets, nothing).item() == 0.0


def test_complete_window_passes_observed_tokens_through():
    torch.manual_seed(7)
    cfg = _fcfg()
    model = fusion.MMAE(cfg)
    tokens, valid = _rand_inputs(cfg, seed=8)
    out = fusion.complete_window(model, tokens, valid)
    for name in cfg.modalities:
        assert out[name].shape == tokens[name].shape
        assert torch.isfinite(out[name]).all()
        v = valid[name]
        assert torch.equal(out[name][v], tokens[name][v])
        assert not torch.equal(out[name][~v], tokens[name][~v])


def test_complete_window_handles_absent_modalities():
    torch.manual_seed(9)
    cfg = _fcfg()
    model = fusion.MMAE(cfg)
    tokens, valid = _rand_inputs(cfg, seed=10)
    for absent in ("a", "b"):
        v2 = dict(valid)
        v2[absent] = torch.zeros_like(valid[absent])
        out = fusion.complete_window(model, tokens, v2)
        for name in cfg.modalities:
            assert out[name].shape == tokens[name].shape
            assert torch.isfinite(out[name]).all()
    # nothing observed at all still yields full-shape finite predictions
    none = {n: torch.zeros_like(v) for n, v in valid.items()}
    out = fusion.complete_window(model, tokens, none)
    for name in cfg.modalities:
        assert torch.isfinite(out[name]).all()


def test_lattice_round_trip():
    tf = st.TokenField(torch.arange(24.0).reshape(2, 3, 4),
                       np.ones((3, 4), np.uint8), None, 0.0, "x")
    flat, valid = fusion.tokens_as_lattice(tf)
    assert flat.shape == (12, 2) and valid.all()
    back = fusion.lattice_as_tokens(flat, (3, 4))
    assert torch.equal(back, tf.tokens)


def test_modality_bundle_slot_count_validation():
    box = BBox(-10.0, 10.0, -10.0, 10.0)
    tf = st.TokenField(torch.zeros(2, 2, 2), np.ones((2, 2), np.uint8), box, 0.0, "a")
    with pytest.raises(ValidationError):
        fusion.ModalityBundle(box, [0.0, 6.0], {"a": [tf]})
    bundle = fusion.ModalityBundle(box, [0.0, 6.0], {"a": [tf, None]})
    cfg = _fcfg(modalities={"a": 2, "b": 3})
    tokens, valid = fusion.bundle_to_tensors(bundle, cfg)
    assert tokens["a"].shape == (1, 2, 4, 2)
    assert valid["a"][0, 0].all() and not valid["a"][0, 1].any()
    assert tokens["b"].shape == (1, 2, 4, 3)
    assert not valid["b"].any()


def _joint_setup(seed=0, steps_data=3):
    h, w = 16, 32
    rng = np.random.default_rng(seed)
    frames = {"leo0": []}
    for t in range(steps_data):
        mask = (rng.random((h, w)) < 0.85).astype(np.uint8)
        values = rng.normal(size=(2, h, w)).astype(np.float32) * mask
        frames["leo0"].append(
            synth.SwathFrame(values, mask, geo.GLOBAL_BBOX, t * 6.0, "leo0")
        )
    stations = []
    lons = rng.uniform(-170, 170, 24)
    lats = rng.uniform(-80, 80, 24)
    alts = rng.uniform(0, 1000, 24)
    for t in range(steps_data):
        values = rng.normal(size=(24, 3))
        present = rng.random((24, 3)) < 0.9
        stations.append(synth.StationSet(lons, lats, alts, values, present, t * 6.0))
    tok_cfg = st.SatTokenizerConfig(channels=2, patch=4, width=32, depth=1, heads=2)
    torch.manual_seed(seed)
    sat_models = {"leo0": st.SatTokenizer(tok_cfg)}
    icfg = insitu.InSituConfig(channels=3, anchor_grid=8, knn_k=4, max_obs=16,
                               width=32, token_channels=8, down_stages=1, heads=2)
    enc = insitu.InSituEncoder(icfg)
    dec = insitu.InSituDecoder(icfg)
    fcfg = fusion.FusionConfig(
        modalities={"leo0": tok_cfg.token_channels, insitu.MODALITY_NAME: 8},
        dim=32, depth=1, heads=2, mask_ratio=0.5, t_slots=2, lattice=(4, 4),
    )
    return frames, stations, sat_models, enc, dec, fcfg


def test_train_mmae_keeps_satellite_tokenizers_frozen():
    frames, stations, sat_models, enc, dec, fcfg = _joint_setup()
    before = {k: v.clone() for k, v in sat_models["leo0"].state_dict().items()}
    model, trace = fusion.train_mmae(
        frames, stations, sat_models, enc, dec, fcfg, steps=3, seed=1,
        window_cells=(16, 16), window_stride=16,
    )
    assert fusion.frozen_grad_norm(sat_models["leo0"]) == 0.0
    for k, v in sat_models["leo0"].state_dict().items():
        assert torch.equal(before[k], v)
    assert len(trace) == 3
    for step, recon, joint, total in trace:
        assert np.isfinite(total)
        assert abs(total - (recon + joint)) < 1e-6


def test_train_mmae_trace_is_reproducible():
    args_a = _joint_setup(seed=2)
    args_b = _joint_setup(seed=2)
    _, trace_a = fusion.train_mmae(*args_a, steps=4, seed=3,
                                   window_cells=(16, 16), window_stride=16)
    _, trace_b = fusion.train_mmae(*args_b, steps=4, seed=3,
                                   window_cells=(16, 16), window_stride=16)
    assert trace_a == trace_b


def test_train_mmae_loss_decreases_on_fixed_windows():
    frames, stations, sat_models, enc, dec, fcfg = _joint_setup(seed=4)
    _, trace = fusion.train_mmae(
        frames, stations, sat_models, enc, dec, fcfg, steps=40, seed=5, lr=2e-3,
        window_cells=(16, 16), window_stride=16, fixed_windows=[(0, 0), (1, 0)],
    )
    assert trace[-1][3] < trace[0][3]


def test_train_mmae_full_station_dropout_still_trains():
    frames, stations, sat_models, enc, dec, fcfg = _joint_setup(seed=6)
    _, trace = fusion.train_mmae(
        frames, stations, sat_models, enc, dec, fcfg, steps=2, seed=7,
        window_cells=(16, 16), window_stride=16, station_mask_ratio=1.0,
    )
    assert len(trace) == 2 and np.isfinite(trace[-1][3])


def test_train_mmae_updates_insitu_parameters():
    frames, stations, sat_models, enc, dec, fcfg = _joint_setup(seed=8)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    fusion.train_mmae(frames, stations, sat_models, enc, dec, fcfg, steps=2,
                      seed=9, window_cells=(16, 16), window_stride=16)
    changed = sum(
        0 if torch.equal(before[k], v) else 1 for k, v in enc.state_dict().items()
    )
    assert changed > 0

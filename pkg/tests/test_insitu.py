"""In-situ encoder/decoder: set symmetry, kernels and losses."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from eo1 import insitu
from eo1.errors import ValidationError
from eo1.geo import BBox, GeoPoint
from eo1.synth import StationSet

BOX = BBox(-20.0, 20.0, -20.0, 20.0)


def _cfg(**kw):
    base = dict(channels=3, anchor_grid=4, knn_k=4, max_obs=16, width=32,
                token_channels=8, down_stages=1, heads=2)
    base.update(kw)
    return insitu.InSituConfig(**base)


def _stations(seed, n, channels=3, missing=0.2, box=BOX):
    rng = np.random.default_rng(seed)
    lons = rng.uniform(box.lon_min + 1, box.lon_max - 1, n)
    lats = rng.uniform(box.lat_min + 1, box.lat_max - 1, n)
    alts = rng.uniform(0, 1500, n)
    values = rng.normal(size=(n, channels))
    present = rng.random((n, channels)) >= missing
    return StationSet(lons, lats, alts, values, present, 0.0)


def test_point_attention_matches_formula_oracle():
    torch.manual_seed(0)
    attn = insitu.PointAttention(width=16, pos_hidden=8, gamma_hidden=12).double()
    f_grid = torch.randn(5, 16, dtype=torch.float64)
    f_nb = torch.randn(5, 3, 16, dtype=torch.float64)
    rel = torch.randn(5, 3, 3, dtype=torch.float64)
    with torch.no_grad():
        got = attn(f_grid, f_nb, rel)
        delta = attn.theta(rel)
        logits = attn.gamma(attn.phi(f_grid)[:, None, :] - attn.psi(f_nb) + delta)
        vals = attn.alpha(f_nb) + delta
        want = torch.zeros(5, 16, dtype=torch.float64)
        for q in range(5):
            for c in range(16):
                col = logits[q, :, c]
                w = torch.exp(col - col.max())
                w = w / w.sum()
                want[q, c] = (w * vals[q, :, c]).sum()
    assert (got - want).abs().max().item() < 1e-12


def test_point_attention_single_neighbor_weight_is_one():
    torch.manual_seed(1)
    attn = insitu.PointAttention(width=8, pos_hidden=4, gamma_hidden=4).double()
    f_grid = torch.randn(3, 8, dtype=torch.float64)
    f_nb = torch.randn(3, 1, 8, dtype=torch.float64)
    rel = torch.randn(3, 1, 3, dtype=torch.float64)
    with torch.no_grad():
        got = attn(f_grid, f_nb, rel)
        want = (attn.alpha(f_nb) + attn.theta(rel)).squeeze(-2)
    assert torch.equal(got, want)


def test_point_attention_invariant_under_neighbor_duplication():
    torch.manual_seed(2)
    attn = insitu.PointAttention(width=8, pos_hidden=4, gamma_hidden=4).double()
    f_grid = torch.randn(4, 8, dtype=torch.float64)
    f_nb = torch.randn(4, 5, 8, dtype=torch.float64)
    rel = torch.randn(4, 5, 3, dtype=torch.float64)
    with torch.no_grad():
        once = attn(f_grid, f_nb, rel)
        twice = attn(f_grid, torch.cat([f_nb, f_nb], dim=-2),
                     torch.cat([rel, rel], dim=-2))
    assert (once - twice).abs().max().item() < 1e-12


def test_encoder_invariant_under_station_permutation():
    torch.manual_seed(3)
    enc = insitu.InSituEncoder(_cfg()).double()
    st = _stations(seed=4, n=12)
    with torch.no_grad():
        base, valid = enc(st, BOX, dtype=torch.float64)
    rng = np.random.default_rng(5)
    for _ in range(5):
        perm = rng.permutation(12)
        shuffled = StationSet(st.lons[perm], st.lats[perm], st.alts[perm],
                              st.values[perm], st.present[perm], st.time_hours)
        with torch.no_grad():
            got, valid2 = enc(shuffled, BOX, dtype=torch.float64)
        assert (got - base).abs().max().item() < 1e-10
        assert np.array_equal(valid, valid2)


def test_conditional_layer_norm_reduces_to_plain_at_init():
    torch.manual_seed(6)
    cln = insitu.ConditionalLayerNorm(16, 4)
    plain = torch.nn.LayerNorm(16, elementwise_affine=False)
    x = torch.randn(7, 16)
    cond = torch.randn(7, 4)
    with torch.no_grad():
        assert torch.equal(cln(x, cond), plain(x))


def test_empty_window_yields_invalid_zero_tokens():
    enc = insitu.InSituEncoder(_cfg())
    st = _stations(seed=7, n=6, box=BBox(100.0, 140.0, 30.0, 60.0))
    tf = insitu.encode_stations(enc, st, BOX)
    assert tf.valid.sum() == 0
    assert torch.equal(tf.tokens, torch.zeros_like(tf.tokens))
    assert tf.tokens.shape == (8, 2, 2)


def test_encoder_shapes_and_validity():
    enc = insitu.InSituEncoder(_cfg())
    st = _stations(seed=8, n=10)
    tf = insitu.encode_stations(enc, st, BOX)
    assert tf.tokens.shape == (8, 2, 2)
    assert tf.valid.shape == (2, 2) and tf.valid.all()
    assert tf.modality == insitu.MODALITY_NAME


def test_subsampling_above_max_obs_is_deterministic():
    enc = insitu.InSituEncoder(_cfg(max_obs=8))
    st = _stations(seed=9, n=30)
    with torch.no_grad():
        a, _ = enc(st, BOX)
        b, _ = enc(st, BOX)
        c, _ = enc(st, BOX, rng=np.random.default_rng(123))
        d, _ = enc(st, BOX, rng=np.random.default_rng(123))
    assert torch.equal(a, b)
    assert torch.equal(c, d)


def test_anchor_grid_divisibility_check():
    with pytest.raises(ValidationError):
        insitu.InSituEncoder(_cfg(anchor_grid=5, down_stages=1))


def test_kernel_weights_match_gaussian_oracle():
    torch.manual_seed(10)
    dec = insitu.InSituDecoder(_cfg()).double()
    d = torch.tensor([[100.0, 400.0, 900.0, 50.0],
                      [0.0, 300.0, 300.0, 1200.0]], dtype=torch.float64)
    with torch.no_grad():
        w = dec.kernel_weights(d)
    ls = float(torch.exp(dec.log_lengthscale.detach()))
    raw = np.exp(-d.numpy() ** 2 / (2.0 * ls**2))
    want = raw / raw.sum(axis=1, keepdims=True)
    assert np.max(np.abs(w.numpy() - want)) < 1e-12
    assert np.max(np.abs(w.numpy().sum(axis=1) - 1.0)) < 1e-9


def test_kernel_weights_far_query_falls_back_to_nearest_one_hot():
    dec = insitu.InSituDecoder(_cfg())
    d = torch.tensor([[3.0e5, 1.0e5, 2.0e5, 4.0e5],
                      [100.0, 200.0, 300.0, 400.0]])
    with torch.no_grad():
        w = dec.kernel_weights(d)
    assert torch.equal(w[0], torch.tensor([0.0, 1.0, 0.0, 0.0]))
    assert abs(w[1].sum().item() - 1.0) < 1e-6
    assert w[1].min().item() > 0.0


def test_decode_at_shapes_and_determinism():
    torch.manual_seed(11)
    enc = insitu.InSituEncoder(_cfg())
    dec = insitu.InSituDecoder(_cfg())
    st = _stations(seed=12, n=10)
    tf = insitu.encode_stations(enc, st, BOX)
    queries = [GeoPoint(0.0, 0.0, 100.0), GeoPoint(5.0, -5.0, 0.0)]
    with torch.no_grad():
        a = insitu.decode_at(dec, tf, queries)
        b = insitu.decode_at(dec, tf, queries)
    assert a.shape == (2, 3)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()


def test_decoder_requires_bbox():
    dec = insitu.InSituDecoder(_cfg())
    from eo1.sat_tokenizer import TokenField

    tf = TokenField(torch.zeros(8, 2, 2), np.ones((2, 2), np.uint8), None, 0.0, "insitu")
    with pytest.raises(ValidationError):
        insitu.decode_at(dec, tf, [GeoPoint(0.0, 0.0, 0.0)])


def test_joint_loss_matches_manual_mae():
    y = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    y_hat = torch.tensor([[1.5, 0.0], [3.0, 1.0]], dtype=torch.float64)
    present = torch.tensor([[True, False], [True, True]])
    got = insitu.insitu_joint_loss(y, y_hat, present)
    want = (0.5 + 0.0 + 3.0) / 3.0
    assert abs(got.item() - want) < 1e-12


def test_joint_loss_empty_presence_is_zero():
    y = torch.randn(3, 2, dtype=torch.float64)
    got = insitu.insitu_joint_loss(y, y + 5.0, torch.zeros(3, 2, dtype=torch.bool))
    assert got.item() == 0.0


def test_station_features_impute_missing_values():
    torch.manual_seed(13)
    enc = insitu.InSituEncoder(_cfg(impute_value=0.0))
    st = _stations(seed=14, n=6, missing=0.0)
    st.present[2, 1] = False
    a = enc.station_features(st)
    st2 = StationSet(st.lons, st.lats, st.alts, st.values.copy(), st.present.copy(),
                     st.time_hours)
    st2.values[2, 1] = 99.0  # hidden behind present=False, must not matter
    b = enc.station_features(st2)
    assert torch.equal(a, b)

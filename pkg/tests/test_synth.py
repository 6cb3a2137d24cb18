"""Synthetic truth, instruments, stations and products."""

import math

import numpy as np
import pytest

from eo1 import kernels, synth
from eo1.errors import ValidationError
from eo1.geo import BBox


def test_gen_truth_bit_identical_regeneration():
    a = synth.gen_truth(seed=7, steps=5, h=16, w=32, channels=2)
    b = synth.gen_truth(seed=7, steps=5, h=16, w=32, channels=2)
    assert np.array_equal(a.values, b.values)
    c = synth.gen_truth(seed=8, steps=5, h=16, w=32, channels=2)
    assert not np.array_equal(a.values, c.values)


def test_gen_truth_advection_is_an_exact_roll_for_aligned_speeds():
    # one cell is 360/16 = 22.5 deg; 3.75 deg/h * 6 h = one cell per step
    t = synth.gen_truth(seed=1, steps=4, h=8, w=16, channels=2,
                        speeds=(3.75, 3.75))
    for step in range(1, 4):
        rolled = np.roll(t.values[0], shift=step, axis=-1)
        assert np.array_equal(t.values[step], rolled)


def test_gen_truth_moves_and_stays_bounded():
    t = synth.gen_truth(seed=2, steps=6)
    assert t.values.shape == (6, 3, 64, 128)
    assert t.values.dtype == np.float32
    for step in range(1, 6):
        assert not np.array_equal(t.values[step], t.values[0])
    assert np.all(np.abs(t.values) < 13.0)  # 6 bumps * amp 2 + offset 0.5


def test_truth_grid_axes():
    t = synth.gen_truth(seed=0, steps=1, h=4, w=8)
    lats = t.lat_grid()
    lons = t.lon_grid()
    assert lats.shape == (4,) and lons.shape == (8,)
    assert lats[0] > 0 > lats[-1]


def test_orbit_pole_matches_closed_form():
    for inc, lam in [(80.0, 0.0), (80.0, 45.0), (30.0, -120.0), (0.0, 10.0)]:
        pole = synth.orbit_pole(inc, lam)
        i, l = math.radians(inc), math.radians(lam)
        want = np.array([math.sin(i) * math.sin(l),
                         -math.sin(i) * math.cos(l),
                         math.cos(i)])
        assert np.max(np.abs(pole - want)) < 1e-12
        assert abs(np.linalg.norm(pole) - 1.0) < 1e-12
    # equatorial orbit: the track is the equator, pole is +z
    assert np.allclose(synth.orbit_pole(0.0, 77.0), [0.0, 0.0, 1.0], atol=1e-12)


def test_node_precession_is_linear_and_wrapped():
    spec = synth.make_instrument("leoA", "leo", seed=0, truth_channels=3,
                                 node_lon0_deg=10.0, node_rate_deg_per_hour=3.75)
    assert synth.node_longitude(spec, 0.0) == 10.0
    assert abs(synth.node_longitude(spec, 8.0) - 40.0) < 1e-12
    lon = synth.node_longitude(spec, 100.0)  # 10 + 375 = 385 -> 25
    assert abs(lon - 25.0) < 1e-9
    assert -180.0 <= lon < 180.0


def test_leo_mask_equals_band_oracle():
    truth = synth.gen_truth(seed=3, steps=3)
    spec = synth.make_instrument("leoB", "leo", seed=4, truth_channels=3)
    for t in range(3):
        fr = synth.sample_leo(truth, spec, t)
        pole = synth.orbit_pole(
            spec.inclination_deg, synth.node_longitude(spec, t * truth.dt_hours)
        )
        want = kernels.band_mask(
            truth.lat_grid(), truth.lon_grid(), pole,
            math.sin(math.radians(spec.half_width_deg)),
        )
        assert np.array_equal(fr.mask, want)
    # masks at different steps differ because the node precesses
    m0 = synth.sample_leo(truth, spec, 0).mask
    m2 = synth.sample_leo(truth, spec, 2).mask
    assert not np.array_equal(m0, m2)


def test_leo_default_coverage_in_band():
    truth = synth.gen_truth(seed=5, steps=8)
    spec = synth.make_instrument("leoC", "leo", seed=6, truth_channels=3)
    for t in range(8):
        cov = synth.sample_leo(truth, spec, t).coverage
        assert 0.03 <= cov <= 0.08


def test_geo_mask_equals_disk_oracle():
    truth = synth.gen_truth(seed=7, steps=2)
    spec = synth.make_instrument("geoB", "geo", seed=8, truth_channels=3)
    fr0 = synth.sample_geo(truth, spec, 0)
    fr1 = synth.sample_geo(truth, spec, 1)
    want = kernels.disk_mask(truth.lat_grid(), truth.lon_grid(),
                             spec.nadir_lon, spec.nadir_lat, spec.radius_km)
    assert np.array_equal(fr0.mask, want)
    assert np.array_equal(fr1.mask, want)  # geostationary: the disk never moves


def test_swath_values_match_affine_oracle_inside_mask():
    truth = synth.gen_truth(seed=9, steps=2)
    for kind, sampler in (("leo", synth.sample_leo), ("geo", synth.sample_geo)):
        spec = synth.make_instrument(f"{kind}Z", kind, seed=10, truth_channels=3)
        fr = sampler(truth, spec, 1)
        flat = truth.values[1].reshape(3, -1).astype(np.float64)
        want = (spec.mixing @ flat + spec.bias[:, None]).reshape(fr.values.shape)
        m = fr.mask.astype(bool)
        diff = np.abs(fr.values.astype(np.float64) - want)[:, m]
        assert diff.max() < 1e-6  # float32 storage
        # canonical zero fill outside the mask
        assert np.all(fr.values[:, ~m] == 0.0)


def test_swath_frame_rejects_nonzero_outside_mask():
    vals = np.ones((1, 4, 4), np.float32)
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = 1
    with pytest.raises(ValidationError):
        synth.SwathFrame(vals, mask, BBox(-10.0, 10.0, -10.0, 10.0), 0.0, "x")
    ok = np.zeros((1, 4, 4), np.float32)
    ok[0, 0, 0] = 3.0
    fr = synth.SwathFrame(ok, mask, BBox(-10.0, 10.0, -10.0, 10.0), 0.0, "x")
    assert fr.coverage == 1.0 / 16.0


def test_station_network_is_fixed_across_time():
    truth = synth.gen_truth(seed=11, steps=4)
    a = synth.sample_stations(truth, 40, 0, 0.1, seed=12)
    b = synth.sample_stations(truth, 40, 3, 0.1, seed=12)
    assert np.array_equal(a.lons, b.lons)
    assert np.array_equal(a.lats, b.lats)
    assert np.array_equal(a.alts, b.alts)
    assert not np.array_equal(a.present, b.present)  # missingness moves with t
    assert not np.array_equal(a.values, b.values)  # the field moved
    c = synth.sample_stations(truth, 40, 0, 0.1, seed=12)
    assert np.array_equal(a.values, c.values)
    assert np.array_equal(a.present, c.present)


def test_station_missing_rate_extremes():
    truth = synth.gen_truth(seed=13, steps=1)
    all_there = synth.sample_stations(truth, 30, 0, 0.0, seed=14)
    assert all_there.present.all()
    none_there = synth.sample_stations(truth, 30, 0, 1.0, seed=14)
    assert not none_there.present.any()
    with pytest.raises(ValidationError):
        synth.sample_stations(truth, 30, 0, 1.5, seed=14)


def test_station_locations_bounded_and_terrain_nonnegative():
    lons, lats, alts = synth.station_locations(seed=15, n=64)
    assert len(lons) == 64
    assert np.all((lons >= -180) & (lons < 180))
    assert np.all(np.abs(lats) <= 62.0)
    assert np.all(alts >= 0.0)
    lons2, lats2, _ = synth.station_locations(seed=15, n=64)
    assert np.array_equal(lons, lons2) and np.array_equal(lats, lats2)


def test_station_value_at_cell_center_matches_affine_oracle():
    truth = synth.gen_truth(seed=16, steps=1, h=8, w=16)
    lats = truth.lat_grid()
    lons = truth.lon_grid()
    # query exactly at cell centers with zero altitude: bilinear is exact there
    q_lons = np.array([lons[3], lons[10]])
    q_lats = np.array([lats[2], lats[5]])
    q_alts = np.zeros(2)
    vals = synth.station_channel_map(truth, q_lons, q_lats, q_alts, seed=17,
                                     t_index=0, channels=3)
    op, bias = synth.station_operator(17, 3, truth.channels)
    for k, (i, j) in enumerate([(2, 3), (5, 10)]):
        cell = truth.values[0, :, i, j].astype(np.float64)
        want = op @ cell + bias
        assert np.max(np.abs(vals[k] - want)) < 1e-6


def test_station_lapse_rate_applies_to_temperature_channels_only():
    truth = synth.gen_truth(seed=18, steps=1, h=8, w=16)
    q_lons = np.array([10.0, -40.0])
    q_lats = np.array([5.0, 30.0])
    flat = synth.station_channel_map(truth, q_lons, q_lats, np.zeros(2), 19, 0, 3)
    high = synth.station_channel_map(truth, q_lons, q_lats, np.full(2, 1000.0), 19, 0, 3)
    drop = flat - high
    assert np.max(np.abs(drop[:, 0] - synth.LAPSE_RATE_PER_M * 1000.0)) < 1e-9
    assert np.max(np.abs(drop[:, 1:])) < 1e-12


def test_derive_product_matches_softplus_oracle():
    truth = synth.gen_truth(seed=20, steps=1, h=4, w=8, channels=3)
    pf = synth.derive_product(truth, truth.extent, 0, "precip_proxy")
    assert pf.values.shape == (1, 4, 8)
    assert np.all(pf.values > 0.0)
    w, b = synth.product_weights("precip_proxy", 3)
    assert w.tolist() == [1.2, -0.7, 0.5] and b == -0.3
    for i in range(4):
        for j in range(8):
            lin = float(w @ truth.values[0, :, i, j].astype(np.float64)) + b
            want = math.log1p(math.exp(-abs(lin))) + max(lin, 0.0)
            assert abs(pf.values[0, i, j] - want) < 1e-6


def test_product_weights_cycle_for_wide_truth():
    w, _ = synth.product_weights("precip_proxy", 5)
    assert w.tolist() == [1.2, -0.7, 0.5, 1.2, -0.7]
    with pytest.raises(ValidationError):
        synth.product_weights("nope", 3)


def test_derive_product_rejects_misaligned_bbox():
    truth = synth.gen_truth(seed=21, steps=1, h=8, w=16)
    bad = BBox(-179.0, -150.0, 0.0, 20.0)  # not on cell edges
    with pytest.raises(ValidationError):
        synth.derive_product(truth, bad, 0)


def test_softplus_stable_at_extremes():
    out = synth.softplus(np.array([-1000.0, 0.0, 1000.0]))
    assert abs(out[0]) < 1e-12
    assert abs(out[1] - math.log(2.0)) < 1e-12
    assert abs(out[2] - 1000.0) < 1e-9


def test_instrument_operator_is_seed_stable():
    a = synth.make_instrument("leoQ", "leo", seed=22, truth_channels=3)
    b = synth.make_instrument("leoQ", "leo", seed=22, truth_channels=3)
    assert np.array_equal(a.mixing, b.mixing) and np.array_equal(a.bias, b.bias)
    c = synth.make_instrument("leoR", "leo", seed=22, truth_channels=3)
    assert not np.array_equal(a.mixing, c.mixing)
    with pytest.raises(ValidationError):
        synth.make_instrument("x", "meo", seed=0, truth_channels=3)

"""Dataset directory round trips and integrity checks."""

import json
import os

import numpy as np
import pytest

from eo1 import dataset, synth
from eo1.errors import IntegrityError, ValidationError


def _toy(seed=0, steps=3):
    truth = synth.gen_truth(seed=seed, steps=steps, h=16, w=32, channels=3)
    leo = synth.make_instrument("leo0", "leo", seed=seed, truth_channels=3,
                                half_width_deg=14.0)
    geo = synth.make_instrument("geo0", "geo", seed=seed, truth_channels=3)
    frames = {
        "leo0": [synth.sample_leo(truth, leo, t) for t in range(steps)],
        "geo0": [synth.sample_geo(truth, geo, t) for t in range(steps)],
    }
    stations = [synth.sample_stations(truth, 20, t, 0.1, seed=seed)
                for t in range(steps)]
    products = {"precip_proxy": [synth.derive_product(truth, truth.extent, t)
                                 for t in range(steps)]}
    dims = {"h": 16, "w": 32, "channels": 3, "steps": steps, "dt_hours": 6.0}
    return dims, frames, stations, products


def test_round_trip_is_bit_exact(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    man = dataset.write_dataset(out, 0, dims, frames, stations, products,
                                generator={"note": "toy"})
    ds = dataset.read_dataset(out)
    assert ds.manifest == man
    assert ds.seed == 0 and ds.steps == 3 and ds.dt_hours == 6.0
    assert sorted(ds.frames) == ["geo0", "leo0"]
    for inst in frames:
        for a, b in zip(frames[inst], ds.frames[inst]):
            assert np.array_equal(a.values, b.values)
            assert np.array_equal(a.mask, b.mask)
            assert a.bbox == b.bbox
            assert a.time_hours == b.time_hours
            assert a.instrument_id == b.instrument_id
    for a, b in zip(stations, ds.stations):
        assert np.array_equal(a.present, b.present)
        assert np.array_equal(a.values[a.present], b.values[b.present])
        assert np.array_equal(b.values[~b.present],
                              np.zeros(int((~b.present).sum())))
        assert np.array_equal(a.alts, b.alts)
    for a, b in zip(products["precip_proxy"], ds.products["precip_proxy"]):
        assert np.array_equal(a.values, b.values)
        assert a.bbox == b.bbox


def test_write_is_deterministic(tmp_path):
    dims, frames, stations, products = _toy()
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    dataset.write_dataset(a, 0, dims, frames, stations, products)
    dataset.write_dataset(b, 0, dims, frames, stations, products)
    with open(os.path.join(a, "manifest.json"), "rb") as fh:
        bytes_a = fh.read()
    with open(os.path.join(b, "manifest.json"), "rb") as fh:
        bytes_b = fh.read()
    assert bytes_a == bytes_b
    assert b"timestamp" not in bytes_a and b"date" not in bytes_a


def test_tampered_payload_raises_integrity_error(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    man = dataset.write_dataset(out, 0, dims, frames, stations, products)
    victim = None
    for mod in man["modalities"]:
        for name in mod["files"]:
            if name.endswith(".val"):
                victim = os.path.join(out, name)
                break
        if victim:
            break
    assert victim is not None
    with open(victim, "r+b") as fh:
        fh.seek(20)
        byte = fh.read(1)
        fh.seek(20)
        fh.write(bytes([byte[0] ^ 0xFF]))
    with pytest.raises(IntegrityError):
        dataset.read_dataset(out)


def test_tampered_station_csv_raises_integrity_error(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    man = dataset.write_dataset(out, 0, dims, frames, stations, products)
    victim = None
    for mod in man["modalities"]:
        for name in mod["files"]:
            if name.endswith(".csv"):
                victim = os.path.join(out, name)
                break
        if victim:
            break
    assert victim is not None
    with open(victim, "ab") as fh:
        fh.write(b" ")
    with pytest.raises(IntegrityError):
        dataset.read_dataset(out)


def test_missing_manifest_raises_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        dataset.read_dataset(str(tmp_path / "nowhere"))


def test_unknown_format_version_rejected(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    dataset.write_dataset(out, 0, dims, frames, stations, products)
    mpath = os.path.join(out, "manifest.json")
    with open(mpath) as fh:
        man = json.load(fh)
    man["format_version"] = 99
    with open(mpath, "w") as fh:
        json.dump(man, fh)
    with pytest.raises(ValidationError):
        dataset.read_dataset(out)


def test_missing_listed_file_raises_validation_error(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    man = dataset.write_dataset(out, 0, dims, frames, stations, products)
    first = next(iter(man["modalities"][0]["files"]))
    os.remove(os.path.join(out, first))
    with pytest.raises(ValidationError):
        dataset.read_dataset(out)


def test_station_csv_na_round_trip(tmp_path):
    dims, frames, stations, products = _toy(seed=3)
    # force a specific missing pattern
    stations[0].present[:] = True
    stations[0].present[2, 1] = False
    out = str(tmp_path / "ds")
    dataset.write_dataset(out, 3, dims, frames, stations, products)
    ds = dataset.read_dataset(out)
    assert not ds.stations[0].present[2, 1]
    assert ds.stations[0].present.sum() == stations[0].present.sum()
    # values at missing slots read back as zero regardless of what was stored
    assert ds.stations[0].values[2, 1] == 0.0


def test_dims_must_carry_required_keys(tmp_path):
    dims, frames, stations, products = _toy()
    bad = {k: v for k, v in dims.items() if k != "steps"}
    with pytest.raises(ValidationError):
        dataset.write_dataset(str(tmp_path / "ds"), 0, bad, frames,
                              stations, products)


def test_extra_block_round_trips(tmp_path):
    dims, frames, stations, products = _toy()
    out = str(tmp_path / "ds")
    dataset.write_dataset(out, 0, dims, frames, stations, products,
                          extra={"forecast": True, "lead_time_hours": [6.0, 12.0]})
    ds = dataset.read_dataset(out)
    assert ds.manifest["extra"]["forecast"] is True
    assert ds.manifest["extra"]["lead_time_hours"] == [6.0, 12.0]

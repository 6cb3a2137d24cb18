"""On-disk dataset container: manifest + raw arrays + station CSVs.

Layout under a dataset directory:

* ``manifest.json`` with format version, seed, dims, generator echo, and a
  per-modality record (instrument id, kind, channel/frame counts, dtype,
  byte order, SHA-256 per file, per-frame metadata);
* ``<instrument_id>/<t:06d>.val`` raw little-endian float32 (C, H, W) and
  ``.msk`` raw uint8 (H, W) for swath modalities;
* ``<product_id>/<t:06d>.val`` for derived products (no mask);
* ``insitu/<t:06d>.csv`` station tables ``lon,lat,alt,var0,...`` with
  missing entries written as NA.

Floats in CSVs use shortest round-trip repr, so read(write(x)) is
bit-exact for every payload. read_dataset re-hashes every file and raises
IntegrityError on any mismatch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ValidationError
from .geo import BBox
from .synth import ProductField, StationSet, SwathFrame

FORMAT_VERSION = 1
STATION_MODALITY = "insitu"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _bbox_list(b: BBox) -> list[float]:
    return [b.lon_min, b.lon_max, b.lat_min, b.lat_max]


def _bbox_from_list(v) -> BBox:
    return BBox(*[float(x) for x in v])


@dataclass
class Dataset:
    """In-memory view of a dataset directory."""

    manifest: dict
    frames: dict[str, list[SwathFrame]]
    stations: list[StationSet] = field(default_factory=list)
    products: dict[str, list[ProductField]] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.manifest["seed"])

    @property
    def dims(self) -> dict:
        return self.manifest["dims"]

    @property
    def steps(self) -> int:
        return int(self.manifest["dims"]["steps"])

    @property
    def dt_hours(self) -> float:
        return float(self.manifest["dims"]["dt_hours"])


def _station_csv_bytes(st: StationSet) -> bytes:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lon", "lat", "alt"] + [f"var{c}" for c in range(st.channels)])
    for i in range(st.n_stations):
        row = [repr(float(st.lons[i])), repr(float(st.lats[i])), repr(float(st.alts[i]))]
        for c in range(st.channels):
            row.append(repr(float(st.values[i, c])) if st.present[i, c] else "NA")
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def _station_from_csv(data: bytes, time_hours: float) -> StationSet:
    rows = list(csv.reader(data.decode("utf-8").splitlines()))
    header = rows[0]
    channels = len(header) - 3
    n = len(rows) - 1
    lons = np.empty(n)
    lats = np.empty(n)
    alts = np.empty(n)
    values = np.zeros((n, channels))
    present = np.zeros((n, channels), dtype=bool)
    for i, row in enumerate(rows[1:]):
        lons[i] = float(row[0])
        lats[i] = float(row[1])
        alts[i] = float(row[2])
        for c in range(channels):
            cell = row[3 + c]
            if cell != "NA":
                values[i, c] = float(cell)
                present[i, c] = True
    return StationSet(lons, lats, alts, values, present, time_hours)


def write_dataset(
    path: str,
    seed: int,
    dims: dict,
    frames: dict[str, list[SwathFrame]],
    stations: list[StationSet] | None = None,
    products: dict[str, list[ProductField]] | None = None,
    generator: dict | None = None,
    extra: dict | None = None,
) -> dict:
    """Write a dataset directory and return its manifest.

    `dims` must carry at least h, w, steps and dt_hours. A modality with an
    empty frame list is recorded with zero frames, which is valid. The
    manifest is written deterministically (sorted keys) so identical inputs
    produce identical bytes.
    """
    for key in ("h", "w", "steps", "dt_hours"):
        if key not in dims:
            raise ValidationError(f"dims missing required key {key!r}")
    os.makedirs(path, exist_ok=True)
    modalities = []

    for inst_id in sorted(frames):
        flist = frames[inst_id]
        files = {}
        meta = []
        os.makedirs(os.path.join(path, inst_id), exist_ok=True)
        channels = flist[0].channels if flist else 0
        for t, fr in enumerate(flist):
            if fr.channels != channels:
                raise ValidationError(f"{inst_id}: inconsistent channel counts across frames")
            vname = f"{inst_id}/{t:06d}.val"
            mname = f"{inst_id}/{t:06d}.msk"
            vbytes = np.ascontiguousarray(fr.values, dtype="<f4").tobytes()
            mbytes = np.ascontiguousarray(fr.mask, dtype=np.uint8).tobytes()
            with open(os.path.join(path, vname), "wb") as f:
                f.write(vbytes)
            with open(os.path.join(path, mname), "wb") as f:
                f.write(mbytes)
            files[vname] = _sha256(vbytes)
            files[mname] = _sha256(mbytes)
            meta.append(
                {
                    "t": t,
                    "time_hours": fr.time_hours,
                    "bbox": _bbox_list(fr.bbox),
                    "coverage": fr.coverage,
                    "shape": list(fr.values.shape),
                }
            )
        modalities.append(
            {
                "instrument_id": inst_id,
                "kind": "swath",
                "channels": channels,
                "frames": len(flist),
                "dtype": "float32",
                "byte_order": "little-endian",
                "files": files,
                "frame_meta": meta,
            }
        )

    if stations:
        files = {}
        meta = []
        os.makedirs(os.path.join(path, STATION_MODALITY), exist_ok=True)
        for t, st in enumerate(stations):
            name = f"{STATION_MODALITY}/{t:06d}.csv"
            data = _station_csv_bytes(st)
            with open(os.path.join(path, name), "wb") as f:
                f.write(data)
            files[name] = _sha256(data)
            meta.append({"t": t, "time_hours": st.time_hours, "n_stations": st.n_stations})
        modalities.append(
            {
                "instrument_id": STATION_MODALITY,
                "kind": "stations",
                "channels": stations[0].channels,
                "frames": len(stations),
                "files": files,
                "frame_meta": meta,
            }
        )

    for prod_id in sorted(products or {}):
        plist = products[prod_id]
        files = {}
        meta = []
        os.makedirs(os.path.join(path, prod_id), exist_ok=True)
        for t, pf in enumerate(plist):
            name = f"{prod_id}/{t:06d}.val"
            data = np.ascontiguousarray(pf.values, dtype="<f4").tobytes()
            with open(os.path.join(path, name), "wb") as f:
                f.write(data)
            files[name] = _sha256(data)
            meta.append(
                {
                    "t": t,
                    "time_hours": pf.time_hours,
                    "bbox": _bbox_list(pf.bbox),
                    "shape": list(pf.values.shape),
                }
            )
        modalities.append(
            {
                "instrument_id": prod_id,
                "kind": "product",
                "channels": 1,
                "frames": len(plist),
                "dtype": "float32",
                "byte_order": "little-endian",
                "files": files,
                "frame_meta": meta,
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "dims": dims,
        "modalities": modalities,
        "generator": generator or {},
        "extra": extra or {},
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def _read_checked(path: str, relname: str, want_sha: str) -> bytes:
    try:
        with open(os.path.join(path, relname), "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ValidationError(f"dataset file listed in manifest is missing: {relname}")
    got = _sha256(data)
    if got != want_sha:
        raise IntegrityError(f"checksum mismatch for {relname}: {got} != {want_sha}")
    return data


def read_dataset(path: str) -> Dataset:
    """Read a dataset directory back, verifying every recorded checksum."""
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise ValidationError(f"no manifest.json under {path}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {manifest.get('format_version')}")
    frames: dict[str, list[SwathFrame]] = {}
    stations: list[StationSet] = []
    products: dict[str, list[ProductField]] = {}
    for mod in manifest["modalities"]:
        inst_id = mod["instrument_id"]
        kind = mod["kind"]
        if kind == "swath":
            flist = []
            for meta in mod["frame_meta"]:
                t = meta["t"]
                c, h, w = meta["shape"]
                vname = f"{inst_id}/{t:06d}.val"
                mname = f"{inst_id}/{t:06d}.msk"
                vals = np.frombuffer(
                    _read_checked(path, vname, mod["files"][vname]), dtype="<f4"
                ).reshape(c, h, w)
                msk = np.frombuffer(
                    _read_checked(path, mname, mod["files"][mname]), dtype=np.uint8
                ).reshape(h, w)
                flist.append(
                    SwathFrame(
                        vals.copy(),
                        msk.copy(),
                        _bbox_from_list(meta["bbox"]),
                        float(meta["time_hours"]),
                        inst_id,
                    )
                )
            frames[inst_id] = flist
        elif kind == "stations":
            for meta in mod["frame_meta"]:
                t = meta["t"]
                name = f"{STATION_MODALITY}/{t:06d}.csv"
                stations.append(
                    _station_from_csv(
                        _read_checked(path, name, mod["files"][name]), float(meta["time_hours"])
                    )
                )
        elif kind == "product":
            plist = []
            for meta in mod["frame_meta"]:
                t = meta["t"]
                name = f"{inst_id}/{t:06d}.val"
                _, h, w = meta["shape"]
                vals = np.frombuffer(
                    _read_checked(path, name, mod["files"][name]), dtype="<f4"
                ).reshape(1, h, w)
                plist.append(
                    ProductField(
                        vals.copy(),
                        _bbox_from_list(meta["bbox"]),
                        float(meta["time_hours"]),
                        inst_id,
                    )
                )
            products[inst_id] = plist
        else:
            raise ValidationError(f"unknown modality kind {kind!r}")
    return Dataset(manifest, frames, stations, products)

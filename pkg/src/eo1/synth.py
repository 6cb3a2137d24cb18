"""Seeded synthetic globe: truth fields, orbits, stations, derived products.

The truth is a sum of Gaussian bumps per channel, advected zonally at a
constant per-channel speed with wraparound, so every dataset is a pure
function of its seed and can be regenerated bit-identically. Instruments
observe the truth through per-instrument affine channel maps (a seeded
mixing matrix plus bias), evaluated in float64 and stored as float32;
values outside a frame's validity mask are zero (canonical fill).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geo, kernels
from .errors import ValidationError
from .geo import GLOBAL_BBOX, BBox


@dataclass
class TruthField:
    """Dense ground truth: (steps, channels, H, W) float32 on the global grid."""

    values: np.ndarray
    dt_hours: float
    seed: int
    extent: BBox = field(default=GLOBAL_BBOX)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def lon_grid(self) -> np.ndarray:
        return geo.grid_lons(self.extent, self.values.shape[3])

    def lat_grid(self) -> np.ndarray:
        return geo.grid_lats(self.extent, self.values.shape[2])


@dataclass
class SwathFrame:
    """One instrument's gridded image at one time; mask 1 = observed."""

    values: np.ndarray
    mask: np.ndarray
    bbox: BBox
    time_hours: float
    instrument_id: str
    coverage: float = -1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape[1:]:
            raise ValidationError(
                f"values {self.values.shape} must be (C, H, W) with mask {self.mask.shape} = (H, W)"
            )
        if self.values[:, self.mask == 0].any():
            raise ValidationError("values must be zero where mask is 0 (canonical fill)")
        if self.coverage < 0.0:
            self.coverage = float(self.mask.mean())

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class StationSet:
    """Point observations at one time; `present` flags real entries."""

    lons: np.ndarray
    lats: np.ndarray
    alts: np.ndarray
    values: np.ndarray
    present: np.ndarray
    time_hours: float

    def __post_init__(self):
        self.lons = np.asarray(self.lons, dtype=np.float64)
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.alts = np.asarray(self.alts, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        n = self.lons.shape[0]
        if self.values.shape[0] != n or self.present.shape != self.values.shape:
            raise ValidationError("station arrays disagree on station count or channels")

    @property
    def n_stations(self) -> int:
        return self.lons.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def points(self) -> list[geo.GeoPoint]:
        return [
            geo.GeoPoint(float(lo), float(la), float(al))
            for lo, la, al in zip(self.lons, self.lats, self.alts)
        ]

    def subset(self, idx: np.ndarray) -> "StationSet":
        return StationSet(
            self.lons[idx],
            self.lats[idx],
            self.alts[idx],
            self.values[idx],
            self.present[idx],
            self.time_hours,
        )

    def in_bbox(self, bbox: BBox) -> "StationSet":
        keep = (
            (self.lons >= bbox.lon_min)
            & (self.lons <= bbox.lon_max)
            & (self.lats >= bbox.lat_min)
            & (self.lats <= bbox.lat_max)
        )
        return self.subset(np.nonzero(keep)[0])


@dataclass
class ProductField:
    """A derived scalar product on a window: (1, H, W) float32."""

    values: np.ndarray
    bbox: BBox
    time_hours: float
    product_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or self.values.shape[0] != 1:
            raise ValidationError(f"product values must be (1, H, W), got {self.values.shape}")


# ---------------------------------------------------------------------------
# truth generation


def gen_truth(
    seed: int,
    steps: int,
    h: int = 64,
    w: int = 128,
    channels: int = 3,
    dt_hours: float = 6.0,
    bumps_per_channel: int = 6,
    speeds: tuple[float, ...] | None = None,
) -> TruthField:
    """Generate the seeded truth movie.

    Per channel, `bumps_per_channel` Gaussian bumps (random centers, widths,
    amplitudes, plus a constant offset) drift east at a constant speed in
    degrees of longitude per hour, wrapping around the date line. Identical
    arguments give bit-identical output.
    """
    if steps < 1 or h < 1 or w < 1 or channels < 1:
        raise ValidationError("steps, h, w and channels must all be >= 1")
    if speeds is not None and len(speeds) != channels:
        raise ValidationError(f"need one speed per channel, got {len(speeds)} for {channels}")
    rng = np.random.default_rng(seed)
    lon_grid = geo.grid_lons(GLOBAL_BBOX, w)
    lat_grid = geo.grid_lats(GLOBAL_BBOX, h)
    out = np.empty((steps, channels, h, w), dtype=np.float32)
    for c in range(channels):
        nb = bumps_per_channel
        clon = rng.uniform(-180.0, 180.0, nb)
        clat = rng.uniform(-65.0, 65.0, nb)
        slon = rng.uniform(15.0, 40.0, nb)
        slat = rng.uniform(8.0, 25.0, nb)
        amp = rng.uniform(0.5, 2.0, nb) * np.where(rng.random(nb) < 0.5, -1.0, 1.0)
        offset = rng.uniform(-0.5, 0.5)
        if speeds is None:
            speed = float(rng.uniform(2.0, 8.0) * (-1.0 if rng.random() < 0.5 else 1.0))
        else:
            speed = float(speeds[c])
        for t in range(steps):
            shift = speed * dt_hours * t
            out[t, c] = kernels.bump_field(
                lon_grid, lat_grid, clon, clat, slon, slat, amp, shift, offset
            ).astype(np.float32)
    return TruthField(out, dt_hours, seed)


# ---------------------------------------------------------------------------
# instruments


@dataclass(frozen=True)
class InstrumentSpec:
    """Geometry plus observation operator for one satellite instrument."""

    instrument_id: str
    kind: str  # "leo" or "geo"
    channels: int
    mixing: np.ndarray  # (channels, truth_channels)
    bias: np.ndarray  # (channels,)
    inclination_deg: float = 80.0
    node_lon0_deg: float = 0.0
    node_rate_deg_per_hour: float = 3.75
    half_width_deg: float = 2.0
    nadir_lon: float = 10.0
    nadir_lat: float = 0.0
    radius_km: float = 6200.0


def make_instrument(
    instrument_id: str,
    kind: str,
    seed: int,
    truth_channels: int,
    channels: int = 2,
    **overrides,
) -> InstrumentSpec:
    """Build an instrument with a seeded affine observation operator."""
    if kind not in ("leo", "geo"):
        raise ValidationError(f"kind must be 'leo' or 'geo', got {kind!r}")
    rng = np.random.default_rng([seed, _stable_tag(instrument_id)])
    mixing = rng.uniform(-1.0, 1.0, (channels, truth_channels))
    bias = rng.uniform(-0.5, 0.5, channels)
    return InstrumentSpec(
        instrument_id=instrument_id,
        kind=kind,
        channels=channels,
        mixing=mixing,
        bias=bias,
        **overrides,
    )


def _stable_tag(s: str) -> int:
    # stable across processes, unlike hash()
    v = 0
    for ch in s:
        v = (v * 131 + ord(ch)) % (2**31)
    return v


def orbit_pole(inclination_deg: float, node_lon_deg: float) -> np.ndarray:
    """Unit normal of the orbital plane for a circular orbit.

    Inclination 0 puts the orbit along the equator (pole = +z); the
    ascending node is the longitude where the track crosses the equator
    heading north.
    """
    inc = math.radians(inclination_deg)
    lam = math.radians(node_lon_deg)
    return np.array(
        [math.sin(inc) * math.sin(lam), -math.sin(inc) * math.cos(lam), math.cos(inc)]
    )


def node_longitude(spec: InstrumentSpec, t_hours: float) -> float:
    """Ascending-node longitude at a given time, wrapped to [-180, 180)."""
    lon = spec.node_lon0_deg + spec.node_rate_deg_per_hour * t_hours
    return (lon + 180.0) % 360.0 - 180.0


def _affine_observe(truth: TruthField, spec: InstrumentSpec, t_index: int) -> np.ndarray:
    h, w = truth.grid_shape
    flat = truth.values[t_index].astype(np.float64).reshape(truth.channels, h * w)
    obs = spec.mixing @ flat + spec.bias[:, None]
    return obs.reshape(spec.channels, h, w)


def _check_t(truth: TruthField, t_index: int) -> None:
    if not (0 <= t_index < truth.steps):
        raise ValidationError(f"t_index {t_index} outside [0, {truth.steps})")


def sample_leo(truth: TruthField, spec: InstrumentSpec, t_index: int) -> SwathFrame:
    """Observe the truth through a polar orbiter's great-circle band.

    The band is all cells within `half_width_deg` angular distance of the
    orbital great circle (strict inequality, so zero width sees nothing);
    the node longitude precesses linearly in time.
    """
    _check_t(truth, t_index)
    t_hours = t_index * truth.dt_hours
    pole = orbit_pole(spec.inclination_deg, node_longitude(spec, t_hours))
    mask = kernels.band_mask(
        truth.lat_grid(), truth.lon_grid(), pole, math.sin(math.radians(spec.half_width_deg))
    )
    obs = _affine_observe(truth, spec, t_index) * mask[None, :, :]
    return SwathFrame(obs.astype(np.float32), mask, truth.extent, t_hours, spec.instrument_id)


def sample_geo(truth: TruthField, spec: InstrumentSpec, t_index: int) -> SwathFrame:
    """Observe the truth through a geostationary full-disk footprint.

    The footprint is every cell within `radius_km` great-circle distance of
    the fixed nadir point (inclusive), so a radius of at least half the
    Earth's circumference sees the whole globe.
    """
    _check_t(truth, t_index)
    mask = kernels.disk_mask(
        truth.lat_grid(), truth.lon_grid(), spec.nadir_lon, spec.nadir_lat, spec.radius_km
    )
    obs = _affine_observe(truth, spec, t_index) * mask[None, :, :]
    return SwathFrame(
        obs.astype(np.float32), mask, truth.extent, t_index * truth.dt_hours, spec.instrument_id
    )


# ---------------------------------------------------------------------------
# stations

LAPSE_RATE_PER_M = 5e-4
TEMP_CHANNELS = (0,)


def terrain_altitude(lons, lats, seed: int) -> np.ndarray:
    """Smooth seeded terrain in meters, >= 0, same for every call with one seed."""
    rng = np.random.default_rng([seed, 1])
    nk = 4
    coef = rng.uniform(0.4, 1.0, nk)
    flon = rng.integers(1, 5, nk)
    flat = rng.integers(1, 4, nk)
    plon = rng.uniform(0.0, 2.0 * math.pi, nk)
    plat = rng.uniform(0.0, 2.0 * math.pi, nk)
    lo = np.radians(np.asarray(lons, dtype=np.float64))
    la = np.radians(np.asarray(lats, dtype=np.float64))
    a = np.zeros_like(lo)
    for k in range(nk):
        a = a + coef[k] * np.cos(flon[k] * lo + plon[k]) * np.cos(flat[k] * la + plat[k])
    alt = 900.0 * (a / coef.sum() + 1.0)
    return np.clip(alt, 0.0, None)


def _landness(lons, lats, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2])
    nk = 5
    coef = rng.uniform(-1.0, 1.0, nk)
    flon = rng.integers(1, 4, nk)
    flat = rng.integers(1, 4, nk)
    plon = rng.uniform(0.0, 2.0 * math.pi, nk)
    plat = rng.uniform(0.0, 2.0 * math.pi, nk)
    lo = np.radians(np.asarray(lons, dtype=np.float64))
    la = np.radians(np.asarray(lats, dtype=np.float64))
    a = np.zeros_like(lo)
    for k in range(nk):
        a = a + coef[k] * np.cos(flon[k] * lo + plon[k]) * np.cos(flat[k] * la + plat[k])
    return a


def station_locations(seed: int, n: int, lat_limit: float = 62.0):
    """Seeded station network: (lons, lats, alts) fixed across time steps.

    Locations are uniform draws kept where a seeded smooth "landness" field
    is positive (a land proxy), so networks cluster spatially the way real
    ones do; altitudes come from the seeded terrain.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng([seed, 0])
    lons = np.empty(0)
    lats = np.empty(0)
    while lons.shape[0] < n:
        cand_lon = rng.uniform(-180.0, 180.0, 4 * n)
        cand_lat = rng.uniform(-lat_limit, lat_limit, 4 * n)
        keep = _landness(cand_lon, cand_lat, seed) > 0.0
        lons = np.concatenate([lons, cand_lon[keep]])
        lats = np.concatenate([lats, cand_lat[keep]])
    lons = lons[:n]
    lats = lats[:n]
    return lons, lats, terrain_altitude(lons, lats, seed)


def station_operator(seed: int, channels: int, truth_channels: int):
    """Seeded affine map (mixing, bias) from truth channels to station variables."""
    rng = np.random.default_rng([seed, 3])
    if channels == truth_channels:
        mixing = np.eye(channels) + rng.uniform(-0.15, 0.15, (channels, truth_channels))
    else:
        mixing = rng.uniform(-1.0, 1.0, (channels, truth_channels))
    bias = rng.uniform(-0.3, 0.3, channels)
    return mixing, bias


def station_channel_map(
    truth: TruthField,
    lons: np.ndarray,
    lats: np.ndarray,
    alts: np.ndarray,
    seed: int,
    t_index: int,
    channels: int = 3,
    lapse_rate: float = LAPSE_RATE_PER_M,
    temp_channels: tuple[int, ...] = TEMP_CHANNELS,
) -> np.ndarray:
    """Noise-free station values: bilinear truth sample, affine map, lapse term.

    Temperature-like channels are reduced by ``lapse_rate * altitude``; at a
    cell center the bilinear sample degenerates to an exact grid lookup.
    """
    h, w = truth.grid_shape
    lon0 = float(truth.lon_grid()[0])
    lat0 = float(truth.lat_grid()[0])
    dlon = (truth.extent.lon_max - truth.extent.lon_min) / w
    dlat = (truth.extent.lat_max - truth.extent.lat_min) / h
    pts = kernels.bilinear_sample(
        truth.values[t_index].astype(np.float64), lons, lats, lon0, dlon, lat0, dlat
    )
    mixing, bias = station_operator(seed, channels, truth.channels)
    vals = (mixing @ pts + bias[:, None]).T  # (n, channels)
    for c in temp_channels:
        if c < channels:
            vals[:, c] = vals[:, c] - lapse_rate * np.asarray(alts, dtype=np.float64)
    return vals


def sample_stations(
    truth: TruthField,
    n: int,
    t_index: int,
    missing_rate: float,
    seed: int,
    channels: int = 3,
    lapse_rate: float = LAPSE_RATE_PER_M,
    temp_channels: tuple[int, ...] = TEMP_CHANNELS,
) -> StationSet:
    """Sample the fixed seeded station network at one time step.

    The network (locations, altitudes, observation operator) depends only
    on the seed; the per-entry missing pattern depends on (seed, t_index).
    missing_rate 0 yields all entries present, 1 yields none.
    """
    _check_t(truth, t_index)
    if not (0.0 <= missing_rate <= 1.0):
        raise ValidationError(f"missing_rate must lie in [0, 1], got {missing_rate}")
    lons, lats, alts = station_locations(seed, n)
    vals = station_channel_map(
        truth, lons, lats, alts, seed, t_index, channels, lapse_rate, temp_channels
    )
    rng = np.random.default_rng([seed, 4, t_index])
    present = rng.random((n, channels)) >= missing_rate
    return StationSet(lons, lats, alts, vals, present, t_index * truth.dt_hours)


# ---------------------------------------------------------------------------
# derived products

_PRODUCT_BASE_WEIGHTS = {
    "precip_proxy": ((1.2, -0.7, 0.5), -0.3),
}


def product_weights(product_id: str, truth_channels: int):
    if product_id not in _PRODUCT_BASE_WEIGHTS:
        raise ValidationError(f"unknown product_id {product_id!r}")
    base, bias = _PRODUCT_BASE_WEIGHTS[product_id]
    w = np.array([base[c % len(base)] for c in range(truth_channels)], dtype=np.float64)
    return w, float(bias)


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def bbox_cell_window(truth_extent: BBox, grid_shape: tuple[int, int], bbox: BBox):
    """Map a cell-aligned sub-box back to (row0, col0, height, width)."""
    hg, wg = grid_shape
    dlon = (truth_extent.lon_max - truth_extent.lon_min) / wg
    dlat = (truth_extent.lat_max - truth_extent.lat_min) / hg
    c0 = (bbox.lon_min - truth_extent.lon_min) / dlon
    c1 = (bbox.lon_max - truth_extent.lon_min) / dlon
    r0 = (truth_extent.lat_max - bbox.lat_max) / dlat
    r1 = (truth_extent.lat_max - bbox.lat_min) / dlat
    cells = (r0, c0, r1, c1)
    rounded = tuple(int(round(v)) for v in cells)
    if any(abs(v - rv) > 1e-9 for v, rv in zip(cells, rounded)):
        raise ValidationError(f"bbox {bbox} is not aligned to the {grid_shape} cell grid")
    r0i, c0i, r1i, c1i = rounded
    if r0i < 0 or c0i < 0 or r1i > hg or c1i > wg:
        raise ValidationError(f"bbox {bbox} sticks out of the grid extent")
    return r0i, c0i, r1i - r0i, c1i - c0i


def derive_product(
    truth: TruthField, bbox: BBox, t_index: int, product_id: str = "precip_proxy"
) -> ProductField:
    """Analytic product: softplus of a fixed weighted channel sum over a window.

    Softplus keeps the product strictly positive and monotone in every
    positively-weighted channel; zero truth gives the constant
    softplus(bias).
    """
    _check_t(truth, t_index)
    w, bias = product_weights(product_id, truth.channels)
    r0, c0, hh, ww = bbox_cell_window(truth.extent, truth.grid_shape, bbox)
    window = truth.values[t_index, :, r0 : r0 + hh, c0 : c0 + ww].astype(np.float64)
    lin = np.tensordot(w, window, axes=(0, 0)) + bias
    return ProductField(
        softplus(lin)[None].astype(np.float32), bbox, t_index * truth.dt_hours, product_id
    )

"""Geodesic primitives and mask morphology on the cell-centered global grid.

Conventions used throughout the package:

* longitudes in degrees in [-180, 180), latitudes in degrees in [-90, 90],
  altitude in meters;
* gridded fields are row-major with row 0 at the northern edge (north to
  south) and column 0 at the western edge (west to east);
* cell (i, j) of an (H, W) grid over a bounding box is centered at
  ``lon_min + (j + 0.5) * dlon`` / ``lat_max - (i + 0.5) * dlat``;
* binary masks are uint8 arrays with 1 = valid.

Distances are great-circle (haversine) on a sphere of radius 6371 km.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ValidationError

EARTH_RADIUS_KM = kernels.EARTH_RADIUS_KM


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValidationError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class GeoPoint:
    """A point on (or above) the sphere: lon/lat in degrees, alt in meters."""

    lon: float
    lat: float
    alt: float = 0.0

    def __post_init__(self):
        _check_finite("GeoPoint coordinate", self.lon, self.lat, self.alt)
        if not (-180.0 <= self.lon < 180.0):
            raise ValidationError(f"lon must lie in [-180, 180), got {self.lon}")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValidationError(f"lat must lie in [-90, 90], got {self.lat}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned lon/lat box; no anti-meridian wrap, so lon_min < lon_max."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        _check_finite("BBox bound", self.lon_min, self.lon_max, self.lat_min, self.lat_max)
        if not (-180.0 <= self.lon_min < self.lon_max <= 180.0):
            raise ValidationError(
                f"need -180 <= lon_min < lon_max <= 180, got [{self.lon_min}, {self.lon_max}]"
            )
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise ValidationError(
                f"need -90 <= lat_min < lat_max <= 90, got [{self.lat_min}, {self.lat_max}]"
            )

    def contains(self, p: GeoPoint) -> bool:
        return (self.lon_min <= p.lon <= self.lon_max) and (
            self.lat_min <= p.lat <= self.lat_max
        )


GLOBAL_BBOX = BBox(-180.0, 180.0, -90.0, 90.0)


@dataclass
class BinaryMask:
    """A validity raster tied to a bounding box. 1 = valid."""

    values: np.ndarray
    bbox: BBox = field(default=GLOBAL_BBOX)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValidationError(f"mask must be 2-d, got shape {self.values.shape}")
        if not np.isin(self.values, (0, 1)).all():
            raise ValidationError("mask entries must be 0 or 1")
        self.values = self.values.astype(np.uint8)

    @property
    def coverage(self) -> float:
        return float(self.values.mean())


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in kilometers.

    Altitude is ignored; the formula is symmetric in its arguments and
    returns 0 for identical points.
    """
    d = kernels.haversine_matrix(
        np.array([a.lon]), np.array([a.lat]), np.array([b.lon]), np.array([b.lat])
    )
    return float(d[0, 0])


def knn(queries: list[GeoPoint], refs: list[GeoPoint], k: int) -> list[np.ndarray]:
    """Indices of the k nearest refs for each query, by great-circle distance.

    Ties are broken by ascending ref index (stable sort on distance). If
    fewer than k refs exist, all of them are returned, still sorted.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(refs) == 0:
        raise ValidationError("refs must be non-empty")
    if len(queries) == 0:
        return []
    qlon = np.array([p.lon for p in queries])
    qlat = np.array([p.lat for p in queries])
    rlon = np.array([p.lon for p in refs])
    rlat = np.array([p.lat for p in refs])
    dist = kernels.haversine_matrix(qlon, qlat, rlon, rlat)
    kk = min(k, len(refs))
    order = np.argsort(dist, axis=1, kind="stable")
    return [order[i, :kk].copy() for i in range(len(queries))]


def erode_mask(mask: BinaryMask | np.ndarray, radius: int = 1) -> BinaryMask | np.ndarray:
    """Morphological erosion with a square (Chebyshev) ball of the given radius.

    A cell stays valid iff every cell within Chebyshev distance `radius`
    is valid; cells outside the array count as invalid, so valid regions
    shrink at the array border too. radius 0 is the identity.
    """
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    if isinstance(mask, BinaryMask):
        return BinaryMask(kernels.erode(mask.values, radius), mask.bbox)
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-d, got shape {mask.shape}")
    return kernels.erode(mask.astype(np.uint8), radius)


def area_downsample(mask: np.ndarray, p: int) -> np.ndarray:
    """Block-mean downsampling by a factor p in both axes.

    Returns the valid-area fraction per p-by-p block as float64; the mean
    of the output equals the mean of the input (same total area).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-d, got shape {mask.shape}")
    h, w = mask.shape
    if p < 1:
        raise ValidationError(f"p must be >= 1, got {p}")
    if h % p or w % p:
        raise ValidationError(f"p={p} must divide both dims of {mask.shape}")
    blocks = mask.astype(np.float64).reshape(h // p, p, w // p, p)
    return blocks.mean(axis=(1, 3))


def grid_anchors(bbox: BBox, n: int) -> list[GeoPoint]:
    """Centers of an n-by-n lattice of equal cells over bbox.

    Ordering is row-major with rows north to south and columns west to
    east, matching the raster convention, so anchor i*n + j sits at row i,
    column j. All anchors lie strictly inside the box.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    dlon = (bbox.lon_max - bbox.lon_min) / n
    dlat = (bbox.lat_max - bbox.lat_min) / n
    out = []
    for i in range(n):
        lat = bbox.lat_max - (i + 0.5) * dlat
        for j in range(n):
            lon = bbox.lon_min + (j + 0.5) * dlon
            out.append(GeoPoint(lon, lat))
    return out


def _window_starts(dim: int, win: int, stride: int) -> list[int]:
    starts = list(range(0, dim - win + 1, stride))
    if starts[-1] != dim - win:
        starts.append(dim - win)
    return starts


def window_slices(
    grid_shape: tuple[int, int], window: tuple[int, int], stride: int
) -> list[tuple[int, int]]:
    """Top-left (row, col) cell offsets of sliding windows over a grid.

    Windows start every `stride` cells; a final window is clamped to the
    grid edge when the stride does not land exactly, so the union of
    windows always covers the grid and no window sticks out.
    """
    hg, wg = grid_shape
    hs, ws = window
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if hs < 1 or ws < 1 or hs > hg or ws > wg:
        raise ValidationError(f"window {window} must fit inside grid {grid_shape}")
    return [(r, c) for r in _window_starts(hg, hs, stride) for c in _window_starts(wg, ws, stride)]


def cell_window_bbox(
    extent: BBox, grid_shape: tuple[int, int], origin: tuple[int, int], window: tuple[int, int]
) -> BBox:
    """Bounding box of the cell window starting at `origin` (row, col)."""
    hg, wg = grid_shape
    r, c = origin
    hs, ws = window
    dlon = (extent.lon_max - extent.lon_min) / wg
    dlat = (extent.lat_max - extent.lat_min) / hg
    return BBox(
        extent.lon_min + c * dlon,
        extent.lon_min + (c + ws) * dlon,
        extent.lat_max - (r + hs) * dlat,
        extent.lat_max - r * dlat,
    )


def sliding_windows(
    extent: BBox, grid_shape: tuple[int, int], window: tuple[int, int], stride: int
) -> list[BBox]:
    """Bounding boxes of sliding cell windows over a gridded extent.

    See `window_slices` for the start-offset rule; each window's box is the
    union of its cells under the cell-centered raster convention.
    """
    return [
        cell_window_bbox(extent, grid_shape, rc, window)
        for rc in window_slices(grid_shape, window, stride)
    ]


def grid_lons(extent: BBox, w: int) -> np.ndarray:
    """Cell-center longitudes of an extent gridded into w columns."""
    dlon = (extent.lon_max - extent.lon_min) / w
    return extent.lon_min + (np.arange(w) + 0.5) * dlon


def grid_lats(extent: BBox, h: int) -> np.ndarray:
    """Cell-center latitudes, row 0 at the northern edge."""
    dlat = (extent.lat_max - extent.lat_min) / h
    return extent.lat_max - (np.arange(h) + 0.5) * dlat

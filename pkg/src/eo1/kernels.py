"""Hot numeric kernels, each with a numba-jitted and a pure-numpy variant.

The jitted path is the default whenever numba imports cleanly. Set the
environment variable ``EO1_NUMBA=0`` (or ``false``/``off``/``no``) before
import to force the numpy fallback; ``benchmarks/bench_kernels.py`` times
the two paths against each other on realistic shapes.

Everything here is pure array-in/array-out with float64 math so the two
paths agree to rounding error and callers can treat them interchangeably.
"""

from __future__ import annotations

import math
import os

import numpy as np

EARTH_RADIUS_KM = 6371.0


def _env_wants_numba() -> bool:
    flag = os.environ.get("EO1_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but keep the escape hatch
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


NUMBA_ENABLED = _HAVE_NUMBA and _env_wants_numba()


def active_path() -> str:
    """Return ``"numba"`` or ``"numpy"`` depending on the selected path."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# great-circle distance


def haversine_matrix_np(lon1, lat1, lon2, lat2):
    """Pairwise great-circle distances in km, degrees in, (n1, n2) out."""
    lo1 = np.radians(np.asarray(lon1, dtype=np.float64))[:, None]
    la1 = np.radians(np.asarray(lat1, dtype=np.float64))[:, None]
    lo2 = np.radians(np.asarray(lon2, dtype=np.float64))[None, :]
    la2 = np.radians(np.asarray(lat2, dtype=np.float64))[None, :]
    sdla = np.sin((la2 - la1) * 0.5)
    sdlo = np.sin((lo2 - lo1) * 0.5)
    a = sdla * sdla + np.cos(la1) * np.cos(la2) * sdlo * sdlo
    a = np.minimum(a, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


@njit(cache=True)
def _haversine_matrix_nb(lon1, lat1, lon2, lat2):  # pragma: no cover - jitted
    n1 = lon1.shape[0]
    n2 = lon2.shape[0]
    out = np.empty((n1, n2), np.float64)
    for i in range(n1):
        lo1 = math.radians(lon1[i])
        la1 = math.radians(lat1[i])
        cla1 = math.cos(la1)
        for j in range(n2):
            lo2 = math.radians(lon2[j])
            la2 = math.radians(lat2[j])
            sdla = math.sin((la2 - la1) * 0.5)
            sdlo = math.sin((lo2 - lo1) * 0.5)
            a = sdla * sdla + cla1 * math.cos(la2) * sdlo * sdlo
            if a > 1.0:
                a = 1.0
            out[i, j] = 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))
    return out


def haversine_matrix(lon1, lat1, lon2, lat2):
    if NUMBA_ENABLED:
        return _haversine_matrix_nb(
            np.ascontiguousarray(lon1, dtype=np.float64),
            np.ascontiguousarray(lat1, dtype=np.float64),
            np.ascontiguousarray(lon2, dtype=np.float64),
            np.ascontiguousarray(lat2, dtype=np.float64),
        )
    return haversine_matrix_np(lon1, lat1, lon2, lat2)


# ---------------------------------------------------------------------------
# binary-mask erosion (Chebyshev ball, out-of-bounds counts as invalid)


def erode_np(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    k = 2 * radius + 1
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=mask.dtype)
    padded[radius : radius + h, radius : radius + w] = mask
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return windows.min(axis=(2, 3)).astype(np.uint8)


@njit(cache=True)
def _erode_nb(mask, radius):  # pragma: no cover - jitted
    h, w = mask.shape
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            keep = True
            for di in range(-radius, radius + 1):
                ii = i + di
                if ii < 0 or ii >= h:
                    keep = False
                    break
                for dj in range(-radius, radius + 1):
                    jj = j + dj
                    if jj < 0 or jj >= w or mask[ii, jj] == 0:
                        keep = False
                        break
                if not keep:
                    break
            if keep:
                out[i, j] = 1
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if NUMBA_ENABLED:
        return _erode_nb(np.ascontiguousarray(mask, dtype=np.uint8), radius)
    return erode_np(np.asarray(mask, dtype=np.uint8), radius)


# ---------------------------------------------------------------------------
# orbit band / disk rasterization


def band_mask_np(lat_grid, lon_grid, pole, sin_half_width):
    """Cells within an angular band around the great circle normal to `pole`.

    Membership is strict (< sin_half_width), so zero width means no cells.
    """
    la = np.radians(np.asarray(lat_grid, dtype=np.float64))[:, None]
    lo = np.radians(np.asarray(lon_grid, dtype=np.float64))[None, :]
    dot = (
        np.cos(la) * np.cos(lo) * pole[0]
        + np.cos(la) * np.sin(lo) * pole[1]
        + np.sin(la) * pole[2]
    )
    return (np.abs(dot) < sin_half_width).astype(np.uint8)


@njit(cache=True)
def _band_mask_nb(lat_grid, lon_grid, pole, sin_half_width):  # pragma: no cover
    h = lat_grid.shape[0]
    w = lon_grid.shape[0]
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        la = math.radians(lat_grid[i])
        cla = math.cos(la)
        sla = math.sin(la)
        for j in range(w):
            lo = math.radians(lon_grid[j])
            dot = cla * math.cos(lo) * pole[0] + cla * math.sin(lo) * pole[1] + sla * pole[2]
            if abs(dot) < sin_half_width:
                out[i, j] = 1
    return out


def band_mask(lat_grid, lon_grid, pole, sin_half_width):
    pole = np.ascontiguousarray(pole, dtype=np.float64)
    if NUMBA_ENABLED:
        return _band_mask_nb(
            np.ascontiguousarray(lat_grid, dtype=np.float64),
            np.ascontiguousarray(lon_grid, dtype=np.float64),
            pole,
            float(sin_half_width),
        )
    return band_mask_np(lat_grid, lon_grid, pole, sin_half_width)


def disk_mask(lat_grid, lon_grid, nadir_lon, nadir_lat, radius_km):
    """Cells within `radius_km` (inclusive) of the nadir point, (H, W) uint8."""
    lat_grid = np.asarray(lat_grid, dtype=np.float64)
    lon_grid = np.asarray(lon_grid, dtype=np.float64)
    h = lat_grid.shape[0]
    w = lon_grid.shape[0]
    cell_lon = np.repeat(lon_grid[None, :], h, axis=0).ravel()
    cell_lat = np.repeat(lat_grid[:, None], w, axis=1).ravel()
    d = haversine_matrix(
        cell_lon, cell_lat, np.array([nadir_lon]), np.array([nadir_lat])
    ).reshape(h, w)
    return (d <= radius_km).astype(np.uint8)


# ---------------------------------------------------------------------------
# bilinear sampling on the cell-centered global grid (lon wraps, lat clamps)


def bilinear_sample_np(field, lons, lats, lon0, dlon, lat0, dlat):
    """Sample (C, H, W) `field` at N points. Returns (C, N).

    lon0/lat0 are the centers of column 0 / row 0; rows run north to south
    so dlat is positive and row i sits at lat0 - i*dlat.
    """
    c, h, w = field.shape
    x = (np.asarray(lons, dtype=np.float64) - lon0) / dlon
    y = (lat0 - np.asarray(lats, dtype=np.float64)) / dlat
    j0 = np.floor(x).astype(np.int64)
    fx = x - j0
    j0m = np.mod(j0, w)
    j1m = np.mod(j0 + 1, w)
    i0 = np.floor(y).astype(np.int64)
    fy = y - i0
    fy = np.where(i0 < 0, 0.0, fy)
    fy = np.where(i0 > h - 2, 1.0, fy)
    i0 = np.clip(i0, 0, h - 2)
    i1 = i0 + 1
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = (
        field[:, i0, j0m] * w00
        + field[:, i0, j1m] * w01
        + field[:, i1, j0m] * w10
        + field[:, i1, j1m] * w11
    )
    return out


@njit(cache=True)
def _bilinear_sample_nb(field, lons, lats, lon0, dlon, lat0, dlat):  # pragma: no cover
    c, h, w = field.shape
    n = lons.shape[0]
    out = np.empty((c, n), np.float64)
    for k in range(n):
        x = (lons[k] - lon0) / dlon
        y = (lat0 - lats[k]) / dlat
        j0 = int(math.floor(x))
        fx = x - j0
        j0m = j0 % w
        j1m = (j0 + 1) % w
        i0 = int(math.floor(y))
        fy = y - i0
        if i0 < 0:
            i0 = 0
            fy = 0.0
        elif i0 > h - 2:
            i0 = h - 2
            fy = 1.0
        i1 = i0 + 1
        w00 = (1.0 - fy) * (1.0 - fx)
        w01 = (1.0 - fy) * fx
        w10 = fy * (1.0 - fx)
        w11 = fy * fx
        for ci in range(c):
            out[ci, k] = (
                field[ci, i0, j0m] * w00
                + field[ci, i0, j1m] * w01
                + field[ci, i1, j0m] * w10
                + field[ci, i1, j1m] * w11
            )
    return out


def bilinear_sample(field, lons, lats, lon0, dlon, lat0, dlat):
    if NUMBA_ENABLED:
        return _bilinear_sample_nb(
            np.ascontiguousarray(field, dtype=np.float64),
            np.ascontiguousarray(lons, dtype=np.float64),
            np.ascontiguousarray(lats, dtype=np.float64),
            float(lon0),
            float(dlon),
            float(lat0),
            float(dlat),
        )
    return bilinear_sample_np(
        np.asarray(field, dtype=np.float64), lons, lats, lon0, dlon, lat0, dlat
    )


# ---------------------------------------------------------------------------
# Gaussian bump field (zonally advected with wraparound)


def bump_field_np(lon_grid, lat_grid, clon, clat, slon, slat, amp, shift_deg, offset):
    h = lat_grid.shape[0]
    w = lon_grid.shape[0]
    out = np.full((h, w), offset, dtype=np.float64)
    for b in range(clon.shape[0]):
        center = clon[b] + shift_deg
        dx = (lon_grid[None, :] - center + 180.0) % 360.0 - 180.0
        dy = lat_grid[:, None] - clat[b]
        out += amp[b] * np.exp(-0.5 * ((dx / slon[b]) ** 2 + (dy / slat[b]) ** 2))
    return out


@njit(cache=True)
def _bump_field_nb(lon_grid, lat_grid, clon, clat, slon, slat, amp, shift_deg, offset):  # pragma: no cover
    h = lat_grid.shape[0]
    w = lon_grid.shape[0]
    out = np.full((h, w), offset, np.float64)
    for b in range(clon.shape[0]):
        center = clon[b] + shift_deg
        for i in range(h):
            dy = (lat_grid[i] - clat[b]) / slat[b]
            e_y = -0.5 * dy * dy
            for j in range(w):
                dx = (lon_grid[j] - center + 180.0) % 360.0 - 180.0
                dxn = dx / slon[b]
                out[i, j] += amp[b] * math.exp(e_y - 0.5 * dxn * dxn)
    return out


def bump_field(lon_grid, lat_grid, clon, clat, slon, slat, amp, shift_deg, offset):
    if NUMBA_ENABLED:
        return _bump_field_nb(
            np.ascontiguousarray(lon_grid, dtype=np.float64),
            np.ascontiguousarray(lat_grid, dtype=np.float64),
            np.ascontiguousarray(clon, dtype=np.float64),
            np.ascontiguousarray(clat, dtype=np.float64),
            np.ascontiguousarray(slon, dtype=np.float64),
            np.ascontiguousarray(slat, dtype=np.float64),
            np.ascontiguousarray(amp, dtype=np.float64),
            float(shift_deg),
            float(offset),
        )
    return bump_field_np(
        np.asarray(lon_grid, dtype=np.float64),
        np.asarray(lat_grid, dtype=np.float64),
        np.asarray(clon, dtype=np.float64),
        np.asarray(clat, dtype=np.float64),
        np.asarray(slon, dtype=np.float64),
        np.asarray(slat, dtype=np.float64),
        np.asarray(amp, dtype=np.float64),
        float(shift_deg),
        float(offset),
    )


# ---------------------------------------------------------------------------
# truncated box-mean smoothing (windows clipped at edges, mean over actual cells)


def box_mean_np(field: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return np.asarray(field, dtype=np.float64).copy()
    h, w = field.shape
    r = window // 2
    f = np.asarray(field, dtype=np.float64)
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        i0 = max(0, i - r)
        i1 = min(h, i + window - r)
        block = f[i0:i1]
        for j in range(w):
            j0 = max(0, j - r)
            j1 = min(w, j + window - r)
            out[i, j] = block[:, j0:j1].mean()
    return out


@njit(cache=True)
def _box_mean_nb(field, window):  # pragma: no cover - jitted
    h, w = field.shape
    r = window // 2
    out = np.empty((h, w), np.float64)
    for i in range(h):
        i0 = max(0, i - r)
        i1 = min(h, i + window - r)
        for j in range(w):
            j0 = max(0, j - r)
            j1 = min(w, j + window - r)
            s = 0.0
            for ii in range(i0, i1):
                for jj in range(j0, j1):
                    s += field[ii, jj]
            out[i, j] = s / ((i1 - i0) * (j1 - j0))
    return out


def box_mean(field: np.ndarray, window: int) -> np.ndarray:
    if window == 1:
        return np.asarray(field, dtype=np.float64).copy()
    if NUMBA_ENABLED:
        return _box_mean_nb(np.ascontiguousarray(field, dtype=np.float64), int(window))
    return box_mean_np(field, window)

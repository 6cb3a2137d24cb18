"""Benchmark the compiled kernels against the pure-numpy fallback.

Run with the package installed:

    python benchmarks/bench_kernels.py

Set EO1_NUMBA=0 to time only the numpy path. With numba available both
paths are timed (the first compiled call is excluded as warmup).
"""

from __future__ import annotations

import timeit

import numpy as np

from eo1 import kernels


def _time(fn, repeats: int = 5) -> float:
    fn()  # warmup (and JIT compile on the numba path)
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main() -> None:
    rng = np.random.default_rng(0)
    lon1 = rng.uniform(-180, 180, 400)
    lat1 = rng.uniform(-90, 90, 400)
    lon2 = rng.uniform(-180, 180, 600)
    lat2 = rng.uniform(-90, 90, 600)
    mask = (rng.random((512, 512)) > 0.4).astype(np.uint8)
    field = rng.normal(size=(512, 512))
    lats = np.linspace(89.5, -89.5, 180)
    lons = np.linspace(-180, 179, 360)
    pole = np.array([0.1, -0.3, 0.95])
    pole /= np.linalg.norm(pole)

    cases = [
        ("haversine_matrix 400x600",
         lambda f: f(lon1, lat1, lon2, lat2),
         kernels.haversine_matrix_np, kernels._haversine_matrix_nb),
        ("erode 512x512 r=1",
         lambda f: f(mask, 1),
         kernels.erode_np, kernels._erode_nb),
        ("band_mask 180x360",
         lambda f: f(lats, lons, pole, np.sin(np.radians(14.0))),
         kernels.band_mask_np, kernels._band_mask_nb),
        ("box_mean 512x512 w=5",
         lambda f: f(field, 5),
         kernels.box_mean_np, kernels._box_mean_nb),
    ]

    print(f"numba path available: {kernels.NUMBA_ENABLED}")
    print(f"{'kernel':32s} {'numpy (ms)':>12s} {'numba (ms)':>12s} {'speedup':>9s}")
    for name, call, np_fn, nb_fn in cases:
        t_np = _time(lambda: call(np_fn)) * 1e3
        if kernels.NUMBA_ENABLED:
            t_nb = _time(lambda: call(nb_fn)) * 1e3
            print(f"{name:32s} {t_np:12.3f} {t_nb:12.3f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{name:32s} {t_np:12.3f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()

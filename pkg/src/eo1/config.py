"""Run configuration: a flat key=value text format over documented defaults.

Config files are plain text, one `key = value` per line, `#` comments and
blank lines ignored. Values are coerced by the type of the default for the
key; unknown keys are rejected so typos fail loudly instead of silently
running with defaults.
"""

from __future__ import annotations

from .errors import ValidationError

DEFAULTS: dict = {
    # Shared
    "seed": 0,
    "threads": 2,
    # Truth grid and time axis
    "grid.h": 64,
    "grid.w": 128,
    "grid.channels": 3,
    "steps": 16,
    "dt_hours": 6.0,
    # Instruments
    "leo.channels": 2,
    "leo.inclination_deg": 80.0,
    "leo.half_width_deg": 2.0,
    "leo.node_rate_deg_per_hour": 3.75,
    "geo.channels": 2,
    "geo.nadir_lon": 10.0,
    "geo.radius_km": 6200.0,
    # Stations
    "stations.count": 96,
    "stations.channels": 3,
    "stations.missing_rate": 0.1,
    # Products
    "products": "precip_proxy",
    # Windowing
    "window.cells": 32,
    "window.stride": 32,
    # Satellite tokenizer
    "tok.patch": 4,
    "tok.width": 64,
    "tok.depth": 2,
    "tok.heads": 4,
    "tok.beta": 1e-6,
    "tok.erosion_radius": 1,
    "tok.steps": 300,
    "tok.lr": 1e-3,
    "tok.batch_size": 8,
    # In-situ tokenizer
    "insitu.anchor_grid": 16,
    "insitu.knn_k": 8,
    "insitu.max_obs": 64,
    "insitu.width": 64,
    "insitu.token_channels": 8,
    # Fusion
    "mmae.dim": 64,
    "mmae.depth": 2,
    "mmae.heads": 4,
    "mmae.mask_ratio": 0.6,
    "mmae.t_slots": 2,
    "mmae.steps": 300,
    "mmae.lr": 1e-3,
    "mmae.batch_windows": 4,
    "mmae.station_mask_ratio": 0.3,
    # Forecaster
    "forecast.dim": 96,
    "forecast.depth": 2,
    "forecast.heads": 4,
    "forecast.patch": 2,
    "forecast.steps": 300,
    "forecast.lr": 1e-3,
    "forecast.batch_size": 8,
    # Inversion
    "invert.width": 64,
    "invert.depth": 2,
    "invert.heads": 4,
    "invert.patch": 4,
    "invert.steps": 300,
    "invert.lr": 1e-3,
    "invert.batch_size": 8,
    # Evaluation
    "eval.dataset": "",
    "eval.rollout_steps": 2,
    "eval.skill_percentiles": "80,90",
    "eval.skill_smooth_window": 5,
    "eval.elevation_bins": "0,300,600,900,1200,1500,1800",
    # Scaling sweep
    "scale.max_steps": 1200,
    "scale.eval_every": 25,
    "scale.patience": 5,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw, 10)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ValidationError(
            f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}"
        ) from exc


class RunConfig:
    """Validated configuration mapping with attribute-free dict access."""

    def __init__(self, values: dict | None = None):
        self._values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ValidationError(f"unknown config key {k!r}")
            self._values[k] = v

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ValidationError(f"unknown config key {key!r}")
        return self._values[key]

    def get(self, key: str, default=None):
        return self._values.get(key, default)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ValidationError(f"unknown config key {key!r}")
        self._values[key] = value

    def int_list(self, key: str) -> list[int]:
        raw = str(self[key]).strip()
        return [int(v) for v in raw.split(",") if v.strip()] if raw else []

    def float_list(self, key: str) -> list[float]:
        raw = str(self[key]).strip()
        return [float(v) for v in raw.split(",") if v.strip()] if raw else []

    def str_list(self, key: str) -> list[str]:
        raw = str(self[key]).strip()
        return [v.strip() for v in raw.split(",") if v.strip()] if raw else []

    def as_dict(self) -> dict:
        return dict(self._values)


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines into a raw override dict (typed)."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Load a config file (optional) and apply programmatic overrides."""
    values: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ValidationError(f"cannot read config file {path!r}: {exc}") from exc
        values.update(parse_config_text(text))
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ValidationError(f"unknown config key {k!r}")
        values[k] = v
    return RunConfig(values)

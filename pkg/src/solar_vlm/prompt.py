"""Structured key=value prompt compiler for per-site numeric context."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .data import FEATURE_NAMES, NumericWindow, SiteMetadata
from .solar import clear_sky_ghi, solar_elevation, true_solar_minutes

CONTEXT_SHORT_STEPS = 12
CONTEXT_LONG_STEPS = 48

TASK_KEYS = [
    "task",
    "target",
    "output",
    "forecast_steps",
    "step_minutes",
    "context_short_steps",
    "context_long_steps",
]
SPATIOTEMPORAL_KEYS = [
    "site_latitude_band",
    "site_longitude_band",
    "season",
    "time_of_day",
    "solar_elevation",
]
POWER_KEYS = [
    "power_last_bin",
    "power_trend_short",
    "power_trend_long",
    "power_variability_short",
]
METEO_KEYS = [
    "irradiance_last_bin",
    "irradiance_trend_short",
    "irradiance_trend_long",
    "irradiance_variability_short",
    "temperature_last_bin",
    "humidity_last_bin",
    "wind_speed_last_bin",
    "pressure_last_bin",
    "cloud_indicator",
    "irradiance_power_coherence_short",
    "irradiance_to_power_response_delay",
    "forecast_observation_irradiance_gap",
]
FIELD_ORDER = TASK_KEYS + SPATIOTEMPORAL_KEYS + POWER_KEYS + METEO_KEYS

LEVELS = ("low", "medium", "high")
TRENDS = ("increase", "decrease", "flat")
VARIABILITY = ("stable", "variable")
SEASONS = ("spring", "summer", "autumn", "winter")
TIMES_OF_DAY = ("night", "morning", "noon", "afternoon", "evening")
CLOUD = ("likely_clear", "partly_cloudy", "likely_cloudy")
COHERENCE = ("positive", "negative", "none")
DELAYS = ("delay_0_step", "delay_1_step", "delay_2_step")
GAPS = ("small", "medium", "large")

TREND_FLAT_FRACTION = 0.05
VARIABLE_RESIDUAL_FRACTION = 0.05
COHERENCE_MIN_ABS_R = 0.1

# features whose night-time zeros are excluded when fitting terciles
_DAYLIGHT_FEATURES = ("nwp_ghi", "nwp_dni", "lmd_ghi", "power")
_BINNED_FEATURES = (
    "power",
    "lmd_ghi",
    "lmd_temperature",
    "lmd_humidity",
    "lmd_wind_speed",
    "lmd_pressure",
)


class PromptError(ValueError):
    pass


class PromptFields(OrderedDict):
    """Ordered mapping of the 28 prompt keys to their string values."""

    def validate(self) -> None:
        missing = [k for k in FIELD_ORDER if k not in self or self[k] in (None, "")]
        if missing:
            raise PromptError(f"missing prompt field(s): {', '.join(missing)}")
        extra = [k for k in self if k not in FIELD_ORDER]
        if extra:
            raise PromptError(f"unknown prompt field(s): {', '.join(extra)}")


@dataclass
class BinEdges:
    """Tercile edges per site and feature, fitted on the training split."""

    feature_names: list
    edges: np.ndarray  # [M, F, 2]

    def level(self, site: int, feature: str, value: float) -> str:
        lo, hi = self.edges[site, self.feature_names.index(feature)]
        if value <= lo:
            return "low"
        if value <= hi:
            return "medium"
        return "high"


def fit_bins(train_series: np.ndarray, feature_names=FEATURE_NAMES) -> BinEdges:
    """Tercile edges of each binned feature per site; daylight-only for irradiance and power."""
    names = list(feature_names)
    edges = np.zeros((train_series.shape[0], len(_BINNED_FEATURES), 2))
    for i in range(train_series.shape[0]):
        for j, f in enumerate(_BINNED_FEATURES):
            col = train_series[i, :, names.index(f)]
            if f in _DAYLIGHT_FEATURES and np.any(col > 0):
                col = col[col > 0]
            edges[i, j] = np.quantile(col, [1 / 3, 2 / 3])
    return BinEdges(list(_BINNED_FEATURES), edges)


# ---------------------------------------------------------------------------
# Field helpers
# ---------------------------------------------------------------------------


def _band_label(prefix: str, value: float) -> str:
    lo = math.floor(value) - 1

    def tok(v):
        return f"m{-v}" if v < 0 else str(v)

    return f"{prefix}_{tok(lo)}_to_{tok(lo + 2)}"


def season_of(epoch_minutes: int, latitude: float) -> str:
    month = datetime.fromtimestamp(int(epoch_minutes) * 60, tz=timezone.utc).month
    idx = {12: 3, 1: 3, 2: 3, 3: 0, 4: 0, 5: 0, 6: 1, 7: 1, 8: 1, 9: 2, 10: 2, 11: 2}[month]
    if latitude < 0:
        idx = (idx + 2) % 4
    return SEASONS[idx]


def time_of_day(epoch_minutes: int, longitude: float) -> str:
    hour = float(true_solar_minutes(epoch_minutes, longitude)) / 60.0
    if hour < 5 or hour >= 20:
        return "night"
    if hour < 10:
        return "morning"
    if hour < 14:
        return "noon"
    if hour < 17:
        return "afternoon"
    return "evening"


def elevation_level(elevation_deg: float) -> str:
    if elevation_deg < 20.0:
        return "low"
    if elevation_deg < 45.0:
        return "medium"
    return "high"


def _slope(y: np.ndarray) -> float:
    t = np.arange(len(y), dtype=np.float64)
    t -= t.mean()
    return float(np.dot(t, y - y.mean()) / np.dot(t, t))


def trend(y: np.ndarray) -> str:
    """Least-squares slope classified against 5% of the context std per step."""
    y = np.asarray(y, dtype=np.float64)
    sd = y.std()
    if len(y) < 2 or sd == 0.0:
        return "flat"
    s = _slope(y)
    if abs(s) < TREND_FLAT_FRACTION * sd:
        return "flat"
    return "increase" if s > 0 else "decrease"


def variability(y: np.ndarray) -> str:
    """Residual std about the linear trend relative to the mean absolute level."""
    y = np.asarray(y, dtype=np.float64)
    if y.std() == 0.0:
        return "stable"
    t = np.arange(len(y), dtype=np.float64)
    resid = y - np.polyval(np.polyfit(t, y, 1), t)
    scale = np.abs(y).mean()
    if scale == 0.0:
        return "stable"
    return "variable" if resid.std() > VARIABLE_RESIDUAL_FRACTION * scale else "stable"


def coherence(x: np.ndarray, y: np.ndarray) -> str:
    if np.std(x) == 0.0 or np.std(y) == 0.0:
        return "none"
    r = float(np.corrcoef(x, y)[0, 1])
    if r > COHERENCE_MIN_ABS_R:
        return "positive"
    if r < -COHERENCE_MIN_ABS_R:
        return "negative"
    return "none"


def response_delay(irradiance: np.ndarray, power: np.ndarray, max_lag: int = 2) -> str:
    """Lag in {0..max_lag} maximizing correlation between irradiance and power changes."""
    dx = np.diff(np.asarray(irradiance, dtype=np.float64))
    dy = np.diff(np.asarray(power, dtype=np.float64))
    best, best_r = 0, -np.inf
    for lag in range(max_lag + 1):
        a = dx[: len(dx) - lag]
        b = dy[lag:]
        if len(a) < 2 or a.std() == 0.0 or b.std() == 0.0:
            continue
        r = float(np.corrcoef(a, b)[0, 1])
        if r > best_r:
            best, best_r = lag, r
    return DELAYS[best]


def irradiance_gap(nwp: np.ndarray, obs: np.ndarray) -> str:
    level = max(float(np.mean(np.abs(obs))), float(np.mean(np.abs(nwp))))
    if level == 0.0:
        return "small"
    rel = float(np.mean(np.abs(nwp - obs))) / level
    if rel < 0.1:
        return "small"
    if rel < 0.3:
        return "medium"
    return "large"


def cloud_indicator(ghi: float, clear: float, humidity_level: str) -> str:
    """Clearness index at the last step, nudged one category cloudier by high humidity.

    There is no cloud feature among the inputs, so this is a heuristic.
    """
    if clear <= 0.0:
        idx = {"low": 0, "medium": 1, "high": 2}[humidity_level]
    else:
        k = ghi / clear
        idx = 0 if k >= 0.85 else (1 if k >= 0.6 else 2)
        if humidity_level == "high":
            idx = min(idx + 1, 2)
    return CLOUD[idx]


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def extract_fields(
    window: NumericWindow,
    site: SiteMetadata,
    now: int,
    horizon: int,
    bins: BinEdges,
    site_index: int | None = None,
) -> PromptFields:
    """Summarize one site's window (``[L, D]`` slice of ``window``) into prompt fields."""
    idx = site.site_id if site_index is None else site_index
    values = window.values[idx] if window.values.ndim == 3 else window.values
    if values.shape[0] < CONTEXT_LONG_STEPS:
        raise PromptError(f"window has {values.shape[0]} steps, need >= {CONTEXT_LONG_STEPS}")
    names = window.feature_names

    def col(name):
        return values[:, names.index(name)]

    power = col("power")
    ghi = col("lmd_ghi")
    short = slice(-CONTEXT_SHORT_STEPS, None)
    long = slice(-CONTEXT_LONG_STEPS, None)
    elev = float(solar_elevation(now, site.latitude, site.longitude))
    humidity_level = bins.level(idx, "lmd_humidity", col("lmd_humidity")[-1])

    f = PromptFields()
    f["task"] = "pv_power_forecasting"
    f["target"] = "power"
    f["output"] = "per_station_multi_step_sequence"
    f["forecast_steps"] = str(int(horizon))
    f["step_minutes"] = "15"
    f["context_short_steps"] = str(CONTEXT_SHORT_STEPS)
    f["context_long_steps"] = str(CONTEXT_LONG_STEPS)
    f["site_latitude_band"] = _band_label("latitude", site.latitude)
    f["site_longitude_band"] = _band_label("longitude", site.longitude)
    f["season"] = season_of(now, site.latitude)
    f["time_of_day"] = time_of_day(now, site.longitude)
    f["solar_elevation"] = elevation_level(elev)
    f["power_last_bin"] = bins.level(idx, "power", power[-1])
    f["power_trend_short"] = trend(power[short])
    f["power_trend_long"] = trend(power[long])
    f["power_variability_short"] = variability(power[short])
    f["irradiance_last_bin"] = bins.level(idx, "lmd_ghi", ghi[-1])
    f["irradiance_trend_short"] = trend(ghi[short])
    f["irradiance_trend_long"] = trend(ghi[long])
    f["irradiance_variability_short"] = variability(ghi[short])
    f["temperature_last_bin"] = bins.level(idx, "lmd_temperature", col("lmd_temperature")[-1])
    f["humidity_last_bin"] = humidity_level
    f["wind_speed_last_bin"] = bins.level(idx, "lmd_wind_speed", col("lmd_wind_speed")[-1])
    f["pressure_last_bin"] = bins.level(idx, "lmd_pressure", col("lmd_pressure")[-1])
    f["cloud_indicator"] = cloud_indicator(float(ghi[-1]), float(clear_sky_ghi(elev)), humidity_level)
    f["irradiance_power_coherence_short"] = coherence(ghi[short], power[short])
    f["irradiance_to_power_response_delay"] = response_delay(ghi[long], power[long])
    f["forecast_observation_irradiance_gap"] = irradiance_gap(col("nwp_ghi")[short], ghi[short])
    return f


def render_prompt(fields) -> str:
    """Join ``key=value`` pairs with `` | `` in canonical field order."""
    if not fields:
        raise PromptError("no prompt fields given")
    pf = fields if isinstance(fields, PromptFields) else PromptFields(fields)
    pf.validate()
    return " | ".join(f"{k}={pf[k]}" for k in FIELD_ORDER)


def parse_prompt(text: str) -> PromptFields:
    """Inverse of :func:`render_prompt`; tolerant of line wrapping."""
    flat = " ".join(text.split())
    out = PromptFields()
    for part in flat.split("|"):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise PromptError(f"malformed prompt segment: {part!r}")
        out[key.strip()] = value.strip()
    out.validate()
    return out

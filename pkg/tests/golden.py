"""A hand-built site window whose prompt is the reference summer-noon example."""

from datetime import datetime, timezone

import numpy as np

from solar_vlm import prompt as P
from solar_vlm.data import FEATURE_NAMES, STEP_MINUTES, NumericWindow, SiteMetadata

REFERENCE_PROMPT = """task=pv_power_forecasting | target=power |
output=per_station_multi_step_sequence |
forecast_steps=48 | step_minutes=15 |
context_short_steps=12 | context_long_steps=48 |
site_latitude_band=latitude_38_to_40 |
site_longitude_band=longitude_113_to_115 |
season=summer | time_of_day=noon | solar_elevation=high |
power_last_bin=medium | power_trend_short=increase |
power_trend_long=increase | power_variability_short=stable |
irradiance_last_bin=high | irradiance_trend_short=increase |
irradiance_trend_long=increase | irradiance_variability_short=variable |
temperature_last_bin=high | humidity_last_bin=medium |
wind_speed_last_bin=low | pressure_last_bin=medium |
cloud_indicator=likely_cloudy |
irradiance_power_coherence_short=positive |
irradiance_to_power_response_delay=delay_1_step |
forecast_observation_irradiance_gap=small"""

SITE = SiteMetadata(0, 39.2, 114.3, "golden")
# 04:30 UTC is close to local solar noon at 114.3 E; solar elevation is about 74 degrees
NOW = int(datetime(2023, 6, 21, 4, 30, tzinfo=timezone.utc).timestamp() // 60)

# (low, high) tercile edges in the order of the binned features
EDGES = {
    "power": (100.0, 250.0),
    "lmd_ghi": (150.0, 300.0),
    "lmd_temperature": (10.0, 25.0),
    "lmd_humidity": (40.0, 60.0),
    "lmd_wind_speed": (2.0, 5.0),
    "lmd_pressure": (890.0, 910.0),
}


def golden_window(steps=48):
    """Irradiance ramps up with fast cloud flicker; power follows the ramp one step later."""
    t = np.arange(steps, dtype=float)
    flicker = 30.0 * np.array([np.sin(1.7 * i) + 0.6 * np.sin(3.1 * i + 0.4) for i in range(steps)])
    ghi = 200.0 + 5.0 * t + flicker
    power = np.empty(steps)
    power[0] = 100.0
    power[1:] = 0.5 * (200.0 + 5.0 * t[:-1]) + 0.03 * flicker[:-1]
    values = np.ones((steps, len(FEATURE_NAMES)))

    def put(name, v):
        values[:, FEATURE_NAMES.index(name)] = v

    put("lmd_ghi", ghi)
    put("nwp_ghi", 1.05 * ghi)
    put("nwp_dni", ghi)
    put("power", power)
    put("lmd_temperature", 30.0)
    put("lmd_humidity", 50.0)
    put("lmd_wind_speed", 1.0)
    put("lmd_pressure", 900.0)
    timestamps = NOW - STEP_MINUTES * np.arange(steps - 1, -1, -1)
    return NumericWindow(values[None], timestamps, list(FEATURE_NAMES))


def golden_bins():
    names = list(P._BINNED_FEATURES)
    edges = np.array([[EDGES[n] for n in names]])
    return P.BinEdges(names, edges)

"""Solar geometry helpers (NOAA general solar position approximation)."""

import numpy as np

MINUTES_PER_DAY = 1440


def _fractional_year(epoch_minutes):
    days = np.floor_divide(epoch_minutes, MINUTES_PER_DAY)
    minute_of_day = epoch_minutes - days * MINUTES_PER_DAY
    # 1970-01-01 was day-of-year 1; the error from ignoring leap years is tiny for angles
    doy = np.mod(days, 365.2425) + 1.0
    return 2.0 * np.pi / 365.0 * (doy - 1.0 + (minute_of_day / 60.0 - 12.0) / 24.0), minute_of_day


def true_solar_minutes(epoch_minutes, longitude):
    """Minutes since local solar midnight, in [0, 1440)."""
    epoch_minutes = np.asarray(epoch_minutes, dtype=np.float64)
    g, minute_of_day = _fractional_year(epoch_minutes)
    eqtime = 229.18 * (
        0.000075
        + 0.001868 * np.cos(g)
        - 0.032077 * np.sin(g)
        - 0.014615 * np.cos(2 * g)
        - 0.040849 * np.sin(2 * g)
    )
    return np.mod(minute_of_day + eqtime + 4.0 * np.asarray(longitude), MINUTES_PER_DAY)


def solar_elevation(epoch_minutes, latitude, longitude):
    """Solar elevation angle in degrees for UTC epoch minutes."""
    epoch_minutes = np.asarray(epoch_minutes, dtype=np.float64)
    g, _ = _fractional_year(epoch_minutes)
    decl = (
        0.006918
        - 0.399912 * np.cos(g)
        + 0.070257 * np.sin(g)
        - 0.006758 * np.cos(2 * g)
        + 0.000907 * np.sin(2 * g)
        - 0.002697 * np.cos(3 * g)
        + 0.00148 * np.sin(3 * g)
    )
    hour_angle = np.deg2rad(true_solar_minutes(epoch_minutes, longitude) / 4.0 - 180.0)
    lat = np.deg2rad(np.asarray(latitude, dtype=np.float64))
    cos_zen = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(hour_angle)
    return 90.0 - np.rad2deg(np.arccos(np.clip(cos_zen, -1.0, 1.0)))


def clear_sky_ghi(elevation_deg):
    """Simple clear-sky global horizontal irradiance (W/m^2); exactly zero below the horizon."""
    s = np.clip(np.sin(np.deg2rad(elevation_deg)), 0.0, None)
    return 1000.0 * s ** 1.15

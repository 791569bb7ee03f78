"""Dataset schema, synthetic multi-site generator, normalization and windowing."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .solar import clear_sky_ghi, solar_elevation, true_solar_minutes

logger = logging.getLogger(__name__)

STEP_MINUTES = 15
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES
EARTH_RADIUS_KM = 6371.0

NWP_FEATURES = [
    "nwp_ghi",
    "nwp_dni",
    "nwp_temperature",
    "nwp_humidity",
    "nwp_wind_speed",
    "nwp_wind_direction",
    "nwp_pressure",
]
LMD_FEATURES = [
    "lmd_ghi",
    "lmd_temperature",
    "lmd_humidity",
    "lmd_wind_speed",
    "lmd_wind_direction",
    "lmd_pressure",
]
FEATURE_NAMES = NWP_FEATURES + LMD_FEATURES + ["power"]
POWER_INDEX = FEATURE_NAMES.index("power")
NUM_FEATURES = len(FEATURE_NAMES)

DEFAULT_START = int(datetime(2023, 6, 1, tzinfo=timezone.utc).timestamp() // 60)
DEFAULT_CENTER = (39.0, 114.5)


class DataError(ValueError):
    """Raised for malformed or inconsistent data."""


@dataclass(frozen=True)
class SiteMetadata:
    site_id: int
    latitude: float
    longitude: float
    name: str = ""

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude out of range: {self.longitude}")


def check_sites(sites: Sequence[SiteMetadata]) -> None:
    ids = [s.site_id for s in sites]
    if sorted(ids) != list(range(len(sites))) or ids != sorted(ids):
        raise DataError(f"site ids must be 0..M-1 in order, got {ids}")


@dataclass
class NumericWindow:
    values: np.ndarray  # [M, L, D]
    timestamps: np.ndarray  # [L] epoch minutes
    feature_names: list = field(default_factory=lambda: list(FEATURE_NAMES))

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[1] != len(self.timestamps):
            raise DataError(f"window shape {self.values.shape} does not match {len(self.timestamps)} timestamps")
        if not np.all(np.isfinite(self.values)):
            raise DataError("window contains non-finite values")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) != STEP_MINUTES):
            raise DataError("window timestamps are not on a 15-minute stride")

    @property
    def power_index(self) -> int:
        return self.feature_names.index("power")


@dataclass
class ForecastTarget:
    power: np.ndarray  # [M, T]
    horizon_minutes: np.ndarray  # [T] epoch minutes


@dataclass
class SyntheticDataset:
    sites: list
    series: np.ndarray  # [M, steps, D]
    timestamps: np.ndarray  # [steps]
    cloud_cover: np.ndarray  # [M, steps] regional cloud fraction seen from above
    feature_names: list = field(default_factory=lambda: list(FEATURE_NAMES))

    @property
    def num_steps(self) -> int:
        return self.series.shape[1]


def _haversine_matrix(lat, lon, radius=EARTH_RADIUS_KM):
    lat = np.deg2rad(np.asarray(lat))
    lon = np.deg2rad(np.asarray(lon))
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def cloud_correlation(distance_km, length_km: float = 100.0):
    """Correlation of the latent cloud field between two points ``distance_km`` apart."""
    return np.exp(-np.asarray(distance_km, dtype=np.float64) / length_km)


def _correlated_noise(rng, chol, shape_t):
    return rng.standard_normal((shape_t, chol.shape[0])) @ chol.T


def make_synthetic_dataset(
    num_sites: int,
    num_days: int,
    seed: int,
    *,
    start_minutes: int = DEFAULT_START,
    center: tuple = DEFAULT_CENTER,
    spread_deg: float = 1.5,
    correlation_length_km: float = 100.0,
    cloud_lead_steps: int = 8,
    sites: Sequence[SiteMetadata] | None = None,
) -> SyntheticDataset:
    """Generate a reproducible multi-site PV dataset at 15-minute resolution.

    Power follows the clear-sky bell attenuated by a latent cloud field that is
    spatially correlated with ``exp(-d / correlation_length_km)``. The returned
    ``cloud_cover`` is the regional (satellite-view) cloud fraction, which leads
    the cloud attenuation felt at the panel by ``cloud_lead_steps`` steps.
    """
    if num_sites <= 0 or num_days <= 0:
        raise DataError("num_sites and num_days must be positive")
    if num_sites < 2:
        raise DataError("num_sites must be >= 2 (the station graph needs neighbours)")
    if num_days < 4:
        raise DataError("num_days must be >= 4")

    rng = np.random.default_rng(seed)
    if sites is None:
        offsets = rng.uniform(-spread_deg, spread_deg, size=(num_sites, 2))
        sites = [
            SiteMetadata(i, round(center[0] + offsets[i, 0], 4), round(center[1] + offsets[i, 1], 4), f"PV{i + 1:02d}")
            for i in range(num_sites)
        ]
    else:
        sites = list(sites)
        if len(sites) != num_sites:
            raise DataError("len(sites) must equal num_sites")
    check_sites(sites)
    m = num_sites
    steps = num_days * STEPS_PER_DAY
    ts = start_minutes + STEP_MINUTES * np.arange(steps, dtype=np.int64)
    lat = np.array([s.latitude for s in sites])
    lon = np.array([s.longitude for s in sites])

    # Latent cloud process on unique locations so co-located sites share it bit-for-bit.
    coords, inverse = np.unique(np.stack([lat, lon], axis=1), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    corr = cloud_correlation(_haversine_matrix(coords[:, 0], coords[:, 1]), correlation_length_km)
    chol = np.linalg.cholesky(corr + 1e-10 * np.eye(len(coords)))
    total = steps + cloud_lead_steps
    phi = math.exp(-1.0 / 12.0)  # ~3 h decorrelation of fast cloud texture
    fast = np.empty((total, len(coords)))
    fast[0] = _correlated_noise(rng, chol, 1)[0]
    innov = _correlated_noise(rng, chol, total) * math.sqrt(1 - phi**2)
    for t in range(1, total):
        fast[t] = phi * fast[t - 1] + innov[t]
    n_days = total // STEPS_PER_DAY + 2
    day_level = _correlated_noise(rng, chol, n_days)
    # smooth daily regime: linear interpolation between day anchors
    grid = np.arange(total) / STEPS_PER_DAY
    regime = np.stack([np.interp(grid, np.arange(n_days), day_level[:, j]) for j in range(len(coords))], axis=1)
    latent = (0.8 * regime + 0.6 * fast) / 1.0
    cloud = 1.0 / (1.0 + np.exp(-2.0 * (latent - 0.2)))  # [total, U] in (0, 1)
    cloud = cloud[:, inverse]  # [total, M]
    cloud_region = cloud[cloud_lead_steps:].T  # satellite view leads the panel
    cloud_local = cloud[:steps].T

    elev = solar_elevation(ts[None, :], lat[:, None], lon[:, None])  # [M, steps]
    clear = clear_sky_ghi(elev)
    solar_min = true_solar_minutes(ts[None, :], lon[:, None])
    hour_phase = 2 * np.pi * (solar_min / 1440.0)
    diurnal = -np.cos(hour_phase - 2 * np.pi * 3 / 24)  # peaks ~15:00 local

    transmission = 1.0 - 0.75 * cloud_local
    ghi = clear * transmission * (1.0 + 0.02 * rng.standard_normal((m, steps)))
    ghi = np.clip(ghi, 0.0, None)
    dni = 0.85 * clear * (1.0 - cloud_local) ** 1.5
    # forecast cloud = smoothed local cloud plus forecast error
    fc_err = 0.15 * rng.standard_normal((m, steps))
    kernel = np.ones(9) / 9.0
    cloud_fc = np.clip(
        np.stack([np.convolve(c, kernel, mode="same") for c in cloud_local]) + fc_err, 0.0, 1.0
    )
    nwp_ghi = clear * (1.0 - 0.75 * cloud_fc)
    nwp_dni = 0.85 * clear * (1.0 - cloud_fc) ** 1.5

    base_temp = rng.uniform(20.0, 26.0, size=(m, 1))
    temp = base_temp + 6.0 * diurnal - 3.0 * cloud_local + 0.3 * rng.standard_normal((m, steps))
    humid = np.clip(55.0 - 12.0 * diurnal + 25.0 * cloud_local + 1.0 * rng.standard_normal((m, steps)), 5, 100)
    wind = np.abs(3.0 + 1.2 * diurnal + 1.5 * cloud_local + 0.4 * rng.standard_normal((m, steps)))
    wdir = np.mod(180.0 + np.cumsum(3.0 * rng.standard_normal((m, steps)), axis=1), 360.0)
    drift = np.cumsum(0.05 * rng.standard_normal((m, steps)), axis=1)
    pressure = 1005.0 + 1.5 * np.sin(2 * hour_phase) + drift - 2.0 * cloud_local

    def fc(x, scale):
        return x + scale * rng.standard_normal(x.shape)

    capacity = rng.uniform(20.0, 50.0, size=(m, 1))  # MW
    derate = 1.0 - 0.004 * (temp - 25.0)
    power = capacity * (clear / 1000.0) * transmission * derate
    power = np.where(clear > 0, np.clip(power, 0.0, None), 0.0)

    series = np.stack(
        [
            nwp_ghi,
            nwp_dni,
            fc(temp, 1.0),
            np.clip(fc(humid, 4.0), 0, 100),
            np.abs(fc(wind, 0.8)),
            np.mod(fc(wdir, 15.0), 360.0),
            fc(pressure, 0.8),
            ghi,
            temp,
            humid,
            wind,
            wdir,
            pressure,
            power,
        ],
        axis=-1,
    )
    return SyntheticDataset(sites=list(sites), series=series, timestamps=ts, cloud_cover=cloud_region)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormalizationStats:
    mean: np.ndarray  # [M, D]
    std: np.ndarray  # [M, D]
    floored: np.ndarray  # [M, D] bool, True where the raw std was below the floor

    def apply(self, series: np.ndarray) -> np.ndarray:
        """Normalize ``[M, ..., D]`` data."""
        shape = (self.mean.shape[0],) + (1,) * (series.ndim - 2) + (self.mean.shape[1],)
        z = (series - self.mean.reshape(shape)) / self.std.reshape(shape)
        # constant training features carry no information; pin them to exactly zero
        return np.where(self.floored.reshape(shape), 0.0, z)

    def invert(self, series: np.ndarray) -> np.ndarray:
        shape = (self.mean.shape[0],) + (1,) * (series.ndim - 2) + (self.mean.shape[1],)
        return series * self.std.reshape(shape) + self.mean.reshape(shape)

    def invert_power(self, power: np.ndarray, power_index: int = POWER_INDEX) -> np.ndarray:
        """Map normalized power ``[..., M, T]`` back to physical units."""
        mu = self.mean[:, power_index][:, None]
        sd = self.std[:, power_index][:, None]
        return power * sd + mu

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "floored": self.floored.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), np.asarray(d["floored"], dtype=bool))


def fit_normalizer(train_series: np.ndarray, floor: float = 1e-6) -> NormalizationStats:
    """Per-site, per-feature z-score statistics from ``[M, steps, D]`` training data."""
    if train_series.size == 0 or train_series.shape[1] == 0:
        raise DataError("training split is empty")
    mean = train_series.mean(axis=1)
    std = train_series.std(axis=1)
    floored = std < floor
    if np.any(floored):
        logger.warning("constant features flagged (std floored at %g): %s", floor, np.argwhere(floored).tolist())
    return NormalizationStats(mean, np.where(floored, floor, std), floored)


# ---------------------------------------------------------------------------
# Splitting and windowing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitBounds:
    train: tuple
    val: tuple
    test: tuple

    def as_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def chronological_split(num_steps: int, ratios=(0.7, 0.1, 0.2)) -> SplitBounds:
    """Half-open ``[start, stop)`` step ranges for train/val/test."""
    if not math.isclose(sum(ratios), 1.0):
        raise DataError("split ratios must sum to 1")
    a = int(round(num_steps * ratios[0]))
    b = a + int(round(num_steps * ratios[1]))
    return SplitBounds((0, a), (a, b), (b, num_steps))


def count_windows(steps: int, lookback: int, horizon: int, stride: int) -> int:
    if steps < lookback + horizon:
        return 0
    return (steps - lookback - horizon) // stride + 1


def slide_windows(
    series: np.ndarray,
    timestamps: np.ndarray,
    lookback: int,
    horizon: int,
    stride: int = 1,
    power_index: int = POWER_INDEX,
    feature_names: Sequence[str] = FEATURE_NAMES,
) -> Iterator[tuple]:
    """Yield ``(NumericWindow, ForecastTarget)`` pairs in chronological order."""
    if lookback < 1 or horizon < 1 or stride < 1:
        raise DataError("lookback, horizon and stride must be >= 1")
    steps = series.shape[1]
    n = count_windows(steps, lookback, horizon, stride)
    if n == 0:
        logger.warning("series of %d steps is too short for L=%d, T=%d", steps, lookback, horizon)
        return
    for w in range(n):
        s = w * stride
        window = NumericWindow(series[:, s : s + lookback], timestamps[s : s + lookback], list(feature_names))
        target = ForecastTarget(
            series[:, s + lookback : s + lookback + horizon, power_index],
            timestamps[s + lookback : s + lookback + horizon],
        )
        yield window, target


def window_starts(steps: int, lookback: int, horizon: int, stride: int) -> np.ndarray:
    return np.arange(count_windows(steps, lookback, horizon, stride)) * stride


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def save_dataset(ds: SyntheticDataset, out_dir, seed: int | None = None, ratios=(0.7, 0.1, 0.2)) -> dict:
    """Write ``site_<id>.csv`` files, ``sites.csv``, ``scenes.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sites.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "name", "latitude", "longitude"])
        for s in ds.sites:
            w.writerow([s.site_id, s.name, _fmt(s.latitude), _fmt(s.longitude)])
    for i, s in enumerate(ds.sites):
        with open(out / f"site_{s.site_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(ds.feature_names) + ["timestamp"])
            for t in range(ds.num_steps):
                w.writerow([_fmt(v) for v in ds.series[i, t]] + [int(ds.timestamps[t])])
    with open(out / "scenes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"cloud_{s.site_id}" for s in ds.sites])
        for t in range(ds.num_steps):
            w.writerow([int(ds.timestamps[t])] + [_fmt(v) for v in ds.cloud_cover[:, t]])
    bounds = chronological_split(ds.num_steps, ratios)
    manifest = {
        "feature_names": list(ds.feature_names),
        "power_index": list(ds.feature_names).index("power"),
        "stride_minutes": STEP_MINUTES,
        "num_sites": len(ds.sites),
        "num_steps": ds.num_steps,
        "start_minutes": int(ds.timestamps[0]),
        "splits": bounds.as_dict(),
        "split_timestamps": {
            k: [int(ds.timestamps[a]), int(ds.timestamps[b - 1])] if b > a else None
            for k, (a, b) in bounds.as_dict().items()
        },
        "seed": seed,
        "files": {
            "sites": "sites.csv",
            "scenes": "scenes.csv",
            "series": [f"site_{s.site_id}.csv" for s in ds.sites],
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(path) -> SyntheticDataset:
    """Read a dataset written by :func:`save_dataset`. NaN/Inf values are rejected."""
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads((root / "manifest.json").read_text())
    sites = []
    with open(root / manifest["files"]["sites"], newline="") as fh:
        for row in csv.DictReader(fh):
            sites.append(SiteMetadata(int(row["id"]), float(row["latitude"]), float(row["longitude"]), row["name"]))
    check_sites(sites)
    names = manifest["feature_names"]
    arrays = []
    timestamps = None
    for s in sites:
        p = root / f"site_{s.site_id}.csv"
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:-1] != names or header[-1] != "timestamp":
                raise DataError(f"{p}: header does not match manifest feature order")
            rows = [[float(v) for v in r] for r in reader]
        arr = np.asarray(rows)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{p}: non-finite values are not allowed")
        ts = arr[:, -1].astype(np.int64)
        if timestamps is None:
            timestamps = ts
        elif not np.array_equal(ts, timestamps):
            raise DataError(f"{p}: timestamps differ from other sites")
        arrays.append(arr[:, :-1])
    if np.any(np.diff(timestamps) != manifest["stride_minutes"]):
        raise DataError("timestamps are not on a constant stride")
    cloud = np.zeros((len(sites), len(timestamps)))
    scenes = root / manifest["files"].get("scenes", "scenes.csv")
    if scenes.exists():
        with open(scenes, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            cloud = np.asarray([[float(v) for v in r[1:]] for r in reader]).T
    return SyntheticDataset(sites=sites, series=np.stack(arrays), timestamps=timestamps, cloud_cover=cloud, feature_names=names)

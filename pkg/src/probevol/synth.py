"""Seeded generator of a synthetic road network with known hourly volumes.

Each station has two carriageways (directions A and B). True volumes follow
AADT x day factor x diurnal share, perturbed by weather, holidays, a daily
level shock and autocorrelated hourly noise. Probe vehicles are a binomial
thinning of each weight class in each half hour at the station's penetration
rate. Speeds fall monotonically with the volume-to-capacity ratio.
"""

from __future__ import annotations

import csv
import datetime as dt
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .features import (
    WEATHER_CATEGORIES, HolidayCalendar, HourlyObservation, StationMeta,
    TIME_FORMAT, write_holidays, write_observations, write_stations,
)
from .metrics import capacity_lookup

# (stationary weight, severity in [0, 1], visibility mi, precipitation in/hr)
_WEATHER_TRAITS = {
    "Clear": (30, 0.0, 10.0, 0.0),
    "Mostly Cloudy": (12, 0.0, 10.0, 0.0),
    "Overcast": (10, 0.05, 9.0, 0.0),
    "Scattered Clouds": (10, 0.0, 10.0, 0.0),
    "Partly Cloudy": (14, 0.0, 10.0, 0.0),
    "Unknown": (1.5, 0.0, 10.0, 0.0),
    "Thunderstorm": (0.6, 0.5, 5.0, 0.2),
    "Light Rain": (5, 0.2, 7.0, 0.03),
    "Light Snow": (0.5, 0.5, 3.0, 0.02),
    "Light Drizzle": (1.5, 0.1, 8.0, 0.01),
    "Rain": (2.5, 0.4, 5.0, 0.12),
    "Heavy Rain": (1.0, 0.7, 2.5, 0.4),
    "Squalls": (0.1, 0.6, 5.0, 0.1),
    "Haze": (2.5, 0.05, 5.0, 0.0),
    "Freezing Rain": (0.1, 0.9, 3.0, 0.1),
    "Light Freezing Rain": (0.1, 0.7, 5.0, 0.03),
    "Drizzle": (0.8, 0.15, 6.0, 0.02),
    "Light Thunderstorms and Rain": (1.0, 0.35, 6.0, 0.08),
    "Heavy Thunderstorms and Rain": (0.4, 0.8, 2.0, 0.5),
    "Thunderstorms and Rain": (0.6, 0.6, 4.0, 0.25),
    "Mist": (1.2, 0.1, 3.0, 0.0),
    "Fog": (0.6, 0.4, 0.5, 0.0),
    "Light Freezing Drizzle": (0.05, 0.6, 4.0, 0.01),
    "Light Freezing Fog": (0.05, 0.5, 1.0, 0.0),
    "Heavy Drizzle": (0.2, 0.3, 4.0, 0.05),
    "Light Thunderstorms and Snow": (0.02, 0.7, 2.0, 0.05),
    "Snow": (0.2, 0.8, 1.5, 0.08),
    "Blowing Snow": (0.05, 0.9, 0.5, 0.05),
    "Heavy Snow": (0.05, 1.0, 0.3, 0.2),
    "Shallow Fog": (0.3, 0.2, 2.0, 0.0),
    "Ice Pellets": (0.03, 0.8, 3.0, 0.05),
    "Patches of Fog": (0.4, 0.15, 3.0, 0.0),
    "Light Ice Pellets": (0.03, 0.6, 4.0, 0.02),
}
_FREEZING = {"Light Snow", "Freezing Rain", "Light Freezing Rain", "Light Freezing Drizzle",
             "Light Freezing Fog", "Light Thunderstorms and Snow", "Snow", "Blowing Snow",
             "Heavy Snow", "Ice Pellets", "Light Ice Pellets"}

# Mon..Sun nominal day-of-week demand, rescaled to sum to 7
NOMINAL_DAY_FACTOR = np.array([0.98, 1.0, 1.02, 1.04, 1.12, 0.96, 0.88])
NOMINAL_DAY_FACTOR = NOMINAL_DAY_FACTOR * 7 / NOMINAL_DAY_FACTOR.sum()

_HOURS = np.arange(24)


def _bump(center, width):
    return np.exp(-0.5 * ((_HOURS - center) / width) ** 2)


def diurnal_shares(weekend: bool, am_weight: float = 1.0, pm_weight: float = 1.0,
                   shift: float = 0.0, midday: float = 1.0, night: float = 1.0) -> np.ndarray:
    """Share of daily volume in each hour; weekdays have AM and PM peaks.

    ``shift`` moves the peaks (hours), ``midday`` scales the daytime plateau
    and ``night`` the overnight floor, so stations can differ in shape.
    """
    if weekend:
        curve = 0.06 * night + 0.9 * midday * _bump(13.5 + shift, 4.0) + 0.15 * _bump(19.0 + shift, 2.5)
    else:
        curve = (0.05 * night + 0.55 * midday * _bump(12.5, 4.5) + 0.95 * am_weight * _bump(7.8 + shift, 1.3)
                 + 0.95 * pm_weight * _bump(17.0 + shift, 1.7))
    trough = 0.35 * night
    curve = curve * (trough + (1 - trough) / (1 + np.exp(-(_HOURS - 5.0))))   # overnight trough
    return curve / curve.sum()


def congestion_factor(vc_ratio):
    """Speed as a fraction of free-flow speed; nonincreasing in v/c."""
    x = np.maximum(np.asarray(vc_ratio, dtype=float), 0.0)
    return (1.0 - 0.22 * np.sqrt(x)) / (1.0 + 2.0 * np.maximum(x - 0.8, 0.0) ** 2)


@dataclass
class GeneratorConfig:
    n_stations: int = 10
    start_date: dt.date = dt.date(2016, 6, 1)
    n_days: int = 90
    seed: int = 0
    penetration_range: tuple = (0.008, 0.045)
    penetration_by_road_type: bool = True   # fleets favour Interstates; see _PENETRATION_BAND
    weight_class_shares: tuple = (0.86, 0.05, 0.09)
    day_noise: float = 0.08          # sd of log daily level shock at the reference per-lane volume
    hour_noise: float = 0.12         # marginal sd of log hourly deviation
    hour_noise_corr: float = 0.6     # lag-1 autocorrelation of the hourly deviation
    directional_peaking: float = 0.45  # max AM/PM imbalance between directions
    aadt_error: float = 0.25         # sd of log error in the reported AADT (US roads)
    shape_spread: float = 1.0        # scale of station-specific diurnal shape variation
    speed_noise: float = 0.6         # mi/h
    weather_persistence: float = 0.92
    adverse_weather_range: tuple = (0.7, 1.0)
    holiday_factor: float = 0.75

    def validate(self) -> None:
        lo, hi = self.penetration_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"penetration range must lie in (0, 1), got {self.penetration_range}")
        shares = np.asarray(self.weight_class_shares, dtype=float)
        if shares.shape != (3,) or np.any(shares < 0) or abs(shares.sum() - 1) > 1e-9:
            raise ConfigError("weight_class_shares must be three nonnegative fractions summing to 1")
        if self.n_stations < 1 or self.n_days < 1:
            raise ConfigError("need at least one station and one day")
        if not 0 <= self.weather_persistence < 1:
            raise ConfigError("weather_persistence must be in [0, 1)")
        wlo, whi = self.adverse_weather_range
        if not 0 < wlo <= whi <= 1:
            raise ConfigError("adverse_weather_range must satisfy 0 < low <= high <= 1")
        for name in ("day_noise", "hour_noise", "aadt_error", "speed_noise", "shape_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not -1 < self.hour_noise_corr < 1:
            raise ConfigError("hour_noise_corr must be in (-1, 1)")

    def transition_matrix(self) -> np.ndarray:
        """Stay with probability ``weather_persistence``, else redraw from the
        stationary mix."""
        pi = self.stationary_weather()
        k = len(WEATHER_CATEGORIES)
        return self.weather_persistence * np.eye(k) + (1 - self.weather_persistence) * np.tile(pi, (k, 1))

    @staticmethod
    def stationary_weather() -> np.ndarray:
        w = np.array([_WEATHER_TRAITS[c][0] for c in WEATHER_CATEGORIES], dtype=float)
        return w / w.sum()


@dataclass
class StationTruth:
    penetration_rate: float
    true_aadt: float             # per carriageway
    free_flow_speed: float


@dataclass
class SyntheticWorld:
    config: GeneratorConfig
    stations: list               # StationMeta, two per station
    observations: list           # HourlyObservation, station-major then time
    truth: dict                  # (station_id, direction) -> StationTruth
    calendar: HolidayCalendar = field(default_factory=HolidayCalendar)


_ROAD_TYPES = (("Interstate", 0.4), ("US", 0.3), ("MD", 0.3))
# Sub-interval of the log penetration range each road type draws from.
# Commercial fleets that report positions concentrate on Interstates.
_PENETRATION_BAND = {"Interstate": (0.75, 1.0), "US": (0.35, 0.6), "MD": (0.0, 0.25)}
# Multiplier on ``aadt_error``: Interstate AADT comes from permanent counters,
# state routes mostly from short counts factored up to annual values.
_AADT_ERROR_SCALE = {"Interstate": 0.6, "US": 1.0, "MD": 1.4}
# Daily vehicles per lane at which the noise and shape settings apply as given.
_VOLATILITY_REF = 15000.0


def _draw_station_layout(rng, cfg):
    """Road attributes, daily vehicles per lane per direction, and penetration."""
    road_type = _ROAD_TYPES[rng.choice(3, p=[p for _, p in _ROAD_TYPES])][0]
    if road_type == "Interstate":
        road_class, lanes = "Motorway", int(rng.choice([2, 3]))
        limit = float(rng.choice([55, 65]))
        per_lane = rng.uniform(12000, 24000)
    elif road_type == "US":
        road_class = "Motorway" if rng.random() < 0.5 else "Trunk"
        lanes = int(rng.choice([2, 3]))
        limit = float(rng.choice([50, 55]))
        per_lane = rng.uniform(7000, 16000)
    else:
        road_class, lanes = "Trunk", 2
        limit = float(rng.choice([40, 45, 50]))
        per_lane = rng.uniform(5000, 11000)
    lo, hi = np.log(cfg.penetration_range)
    a, b = _PENETRATION_BAND[road_type] if cfg.penetration_by_road_type else (0.0, 1.0)
    penetration = float(np.exp(lo + (hi - lo) * rng.uniform(a, b)))
    return road_type, road_class, lanes, limit, per_lane, penetration


def _weather_series(rng, cfg, n_hours):
    trans = cfg.transition_matrix()
    cum = np.cumsum(trans, axis=1)
    pi = cfg.stationary_weather()
    state = int(rng.choice(len(pi), p=pi))
    u = rng.random(n_hours)
    states = np.empty(n_hours, dtype=int)
    for t in range(n_hours):
        state = min(int(np.searchsorted(cum[state], u[t], side="right")), len(pi) - 1)
        states[t] = state
    return states


def _ar1(rng, n, sd, rho):
    eps = rng.normal(0.0, sd * np.sqrt(1 - rho ** 2), n)
    out = np.empty(n)
    prev = rng.normal(0.0, sd)
    for t in range(n):
        prev = rho * prev + eps[t]
        out[t] = prev
    return out


def generate_world(config: GeneratorConfig) -> SyntheticWorld:
    """Deterministic in ``config.seed``; stations use derived seeds
    ``(seed, station_index)`` and can be generated independently."""
    cfg = config
    cfg.validate()
    start = dt.datetime.combine(cfg.start_date, dt.time(0))
    n_hours = cfg.n_days * 24
    # one extra leading hour feeds the "half hour before" probe window
    times = [start + dt.timedelta(hours=h) for h in range(-1, n_hours)]
    years = sorted({t.year for t in times})
    calendar = HolidayCalendar.federal(years)
    weekday = np.array([t.weekday() for t in times])
    hour = np.array([t.hour for t in times])
    day_index = np.array([(t.date() - cfg.start_date).days for t in times])
    holiday = np.array([calendar.holiday(t.date()) is not None for t in times])
    weekend_like = (weekday >= 5) | holiday
    day_of_year = np.array([t.timetuple().tm_yday for t in times])

    severity = np.array([_WEATHER_TRAITS[c][1] for c in WEATHER_CATEGORIES])
    vis_base = np.array([_WEATHER_TRAITS[c][2] for c in WEATHER_CATEGORIES])
    precip_base = np.array([_WEATHER_TRAITS[c][3] for c in WEATHER_CATEGORIES])
    freezing = np.array([c in _FREEZING for c in WEATHER_CATEGORIES])
    wlo, whi = cfg.adverse_weather_range
    shares = np.asarray(cfg.weight_class_shares, dtype=float)

    stations, observations, truth = [], [], {}
    for s_idx in range(cfg.n_stations):
        rng = np.random.default_rng([cfg.seed, s_idx])
        road_type, road_class, lanes, limit, per_lane, penetration = _draw_station_layout(rng, cfg)
        station_id = f"S{s_idx + 1:03d}"
        lat, lon = 38.0 + rng.uniform(0, 1.6), -79.4 + rng.uniform(0, 4.0)

        wx = _weather_series(rng, cfg, len(times))
        seasonal = 58 - 22 * np.cos(2 * np.pi * (day_of_year - 15) / 365.25)
        temperature = seasonal + 9 * np.sin(2 * np.pi * (hour - 9) / 24) + rng.normal(0, 3, len(times))
        temperature = np.where(freezing[wx], np.minimum(temperature, 31.0), temperature)
        temperature = np.round(temperature, 1)
        visibility = np.round(np.clip(vis_base[wx] * rng.uniform(0.8, 1.0, len(times)), 0.1, 10.0), 1)
        precipitation = np.round(precip_base[wx] * rng.exponential(1.0, len(times)), 2)
        weather_mult = whi - (whi - wlo) * severity[wx]

        weekend_boost = rng.uniform(0.9, 1.1)
        station_day = NOMINAL_DAY_FACTOR * np.where(np.arange(7) >= 5, weekend_boost, 1.0)
        station_day = station_day * 7 / station_day.sum()
        tilt = rng.uniform(0, cfg.directional_peaking)
        total_aadt = 2 * per_lane * lanes    # both directions
        split = rng.uniform(0.45, 0.55)
        ffs = float(limit + rng.uniform(2, 8))
        facility = "freeway" if road_class == "Motorway" else "multilane"
        capacity = capacity_lookup(ffs, facility) * lanes
        # lighter roads carry relatively more irregular traffic
        volatility = float(np.clip(_VOLATILITY_REF / per_lane, 0.6, 2.5))
        spread = cfg.shape_spread
        day_sd, hour_sd = cfg.day_noise * volatility, cfg.hour_noise * volatility
        shape = dict(shift=rng.uniform(-1.0, 1.0) * spread,
                     midday=float(np.exp(rng.normal(0, 0.25 * spread))),
                     night=float(np.exp(rng.normal(0, 0.4 * spread))))
        # drawn before any series: binomial sampling consumes a data-dependent
        # number of variates, which would otherwise tie these to the volumes
        aadt_log_error = rng.normal(0, cfg.aadt_error * _AADT_ERROR_SCALE[road_type], 2)

        directions = (("A", split, 1 + tilt, 1 - tilt), ("B", 1 - split, 1 - tilt, 1 + tilt))
        for d_idx, (direction, frac, am, pm) in enumerate(directions):
            aadt = total_aadt * frac
            wk_share = diurnal_shares(False, am, pm, **shape)
            we_share = diurnal_shares(True, **shape)
            share = np.where(weekend_like, we_share[hour], wk_share[hour])
            level = station_day[weekday] * np.where(holiday, cfg.holiday_factor, 1.0)
            day_shock = rng.normal(-0.5 * day_sd ** 2, day_sd, cfg.n_days + 1)
            hour_dev = _ar1(rng, len(times), hour_sd, cfg.hour_noise_corr) - 0.5 * hour_sd ** 2
            mean_volume = aadt * level * share * weather_mult * np.exp(day_shock[day_index + 1] + hour_dev)
            volume = np.maximum(np.rint(mean_volume), 0).astype(np.int64)

            first = rng.binomial(volume, 0.5)
            halves = np.stack([first, volume - first], axis=1)               # (T, 2)
            class_counts = rng.multinomial(halves, shares)                   # (T, half, class)
            probes = rng.binomial(class_counts, penetration)
            speed_noise = rng.normal(0, cfg.speed_noise, len(times))
            speed = ffs * congestion_factor(volume / capacity) + speed_noise
            speed = np.round(np.clip(speed, 1.0, 1.2 * ffs), 1)
            reported_aadt = round(float(aadt * np.exp(aadt_log_error[d_idx])), 1)
            profile = reported_aadt * NOMINAL_DAY_FACTOR[weekday] * np.where(
                weekday >= 5, diurnal_shares(True)[hour], diurnal_shares(False)[hour])

            meta = StationMeta(station_id, direction, road_type, road_class, lanes, limit,
                               reported_aadt, round(lat, 5), round(lon, 5))
            stations.append(meta)
            truth[meta.key] = StationTruth(penetration, aadt, ffs)
            for t in range(1, len(times)):
                counts = tuple(
                    int(probes[t, half, c]) if half < 2 else int(probes[t - 1, 1, c])
                    for c in range(3) for half in (0, 1, 2)
                )
                observations.append(HourlyObservation(
                    station_id=station_id,
                    direction=direction,
                    timestamp=times[t],
                    probe_counts=counts,
                    avg_speed=float(speed[t]),
                    free_flow_speed=round(ffs, 1),
                    temperature=float(temperature[t]),
                    visibility=float(visibility[t]),
                    precipitation=float(precipitation[t]),
                    weather_desc=WEATHER_CATEGORIES[wx[t]],
                    profile_estimate=round(float(profile[t]), 2),
                    target_volume=float(volume[t]),
                ))
    return SyntheticWorld(cfg, stations, observations, truth, calendar)


DATASET_FILES = {
    "observations": "observations.csv",
    "stations": "stations.csv",
    "holidays": "holidays.txt",
    "truth": "truth.csv",
}


def export_dataset(world: SyntheticWorld, out_dir) -> dict:
    """Writes observations, stations, holidays and the ground-truth sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, v) for k, v in DATASET_FILES.items()}
    write_observations(paths["observations"], world.observations)
    write_stations(paths["stations"], world.stations)
    write_holidays(paths["holidays"], world.calendar)
    with open(paths["truth"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "direction", "timestamp", "true_volume", "penetration_rate"])
        for o in world.observations:
            t = world.truth[o.key]
            w.writerow([o.station_id, o.direction, o.timestamp.strftime(TIME_FORMAT),
                        int(o.target_volume), repr(t.penetration_rate)])
    return paths

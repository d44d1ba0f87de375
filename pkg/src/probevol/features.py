"""Encoding of carriageway-hour observations into the 84-column feature layout.

Column layout::

    0-8    probe counts, class-major: (light, medium, heavy) x (first half,
           second half, half hour before)
    9-10   average speed, free-flow speed
    11-13  temperature, visibility, precipitation
    14-46  weather description one-hot (WEATHER_CATEGORIES order)
    47-53  lanes, speed limit, motorway, trunk, Interstate, US, MD
    54-77  hour-of-day one-hot (hour 0 at column 54)
    78-79  Saturday, Sunday
    80-82  Washington's Birthday, Independence Day, Columbus Day
    83     profile estimate

Also holds the CSV readers/writers for observations, stations and holidays.
"""

from __future__ import annotations

import csv
import datetime as dt
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, StructuralError

WEATHER_CATEGORIES = (
    "Clear", "Mostly Cloudy", "Overcast", "Scattered Clouds", "Partly Cloudy",
    "Unknown", "Thunderstorm", "Light Rain", "Light Snow", "Light Drizzle",
    "Rain", "Heavy Rain", "Squalls", "Haze", "Freezing Rain",
    "Light Freezing Rain", "Drizzle", "Light Thunderstorms and Rain",
    "Heavy Thunderstorms and Rain", "Thunderstorms and Rain", "Mist", "Fog",
    "Light Freezing Drizzle", "Light Freezing Fog", "Heavy Drizzle",
    "Light Thunderstorms and Snow", "Snow", "Blowing Snow", "Heavy Snow",
    "Shallow Fog", "Ice Pellets", "Patches of Fog", "Light Ice Pellets",
)
_WEATHER_INDEX = {name.lower(): i for i, name in enumerate(WEATHER_CATEGORIES)}
UNKNOWN_WEATHER = WEATHER_CATEGORIES.index("Unknown")

HOLIDAYS = ("Washington's Birthday", "Independence Day", "Columbus Day")
ROAD_TYPES = ("Interstate", "US", "MD")
ROAD_CLASSES = ("Motorway", "Trunk")
DIRECTIONS = ("A", "B")
WEIGHT_CLASSES = ("light", "medium", "heavy")
WINDOWS = ("first", "second", "before")

N_FEATURES = 84
PROBE = slice(0, 9)
SPEED = slice(9, 11)
WEATHER_NUMERIC = slice(11, 14)
WEATHER_ONEHOT = slice(14, 47)
INFRA = slice(47, 54)
ROAD_CLASS_ONEHOT = slice(49, 51)
ROAD_TYPE_ONEHOT = slice(51, 54)
TEMPORAL = slice(54, 83)
HOUR_ONEHOT = slice(54, 78)
PROFILE_COL = 83

FEATURE_NAMES = (
    [f"probe_{c}_{w}" for c in WEIGHT_CLASSES for w in WINDOWS]
    + ["avg_speed", "free_flow_speed", "temperature", "visibility", "precipitation"]
    + [f"weather={name}" for name in WEATHER_CATEGORIES]
    + ["lanes", "speed_limit"]
    + [f"class={c}" for c in ROAD_CLASSES]
    + [f"type={t}" for t in ROAD_TYPES]
    + [f"hour={h}" for h in range(24)]
    + ["saturday", "sunday"]
    + [f"holiday={h}" for h in HOLIDAYS]
    + ["profile_estimate"]
)
assert len(FEATURE_NAMES) == N_FEATURES

INDICATOR_COLUMNS = tuple(
    list(range(WEATHER_ONEHOT.start, WEATHER_ONEHOT.stop))
    + list(range(ROAD_CLASS_ONEHOT.start, ROAD_TYPE_ONEHOT.stop))
    + list(range(TEMPORAL.start, TEMPORAL.stop))
)

TIME_FORMAT = "%Y-%m-%d %H:00"


@dataclass(frozen=True)
class StationMeta:
    """One carriageway (station + direction). ``aadt`` is directional vehicles/day."""

    station_id: str
    direction: str
    road_type: str
    road_class: str
    lanes: int
    speed_limit: float
    aadt: float
    latitude: float = 0.0
    longitude: float = 0.0

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise DataError(f"station {self.station_id}: direction must be A or B, got {self.direction!r}")
        if self.road_type not in ROAD_TYPES:
            raise DataError(f"station {self.station_id}: unknown road type {self.road_type!r}")
        if self.road_class not in ROAD_CLASSES:
            raise DataError(f"station {self.station_id}: unknown road class {self.road_class!r}")
        if self.lanes < 1:
            raise DataError(f"station {self.station_id}: lanes must be >= 1")
        if not self.aadt > 0:
            raise DataError(f"station {self.station_id}: aadt must be positive")
        if not 25 <= self.speed_limit <= 75:
            raise DataError(f"station {self.station_id}: speed limit {self.speed_limit} outside [25, 75]")

    @property
    def key(self) -> tuple:
        return (self.station_id, self.direction)

    @property
    def facility(self) -> str:
        """Capacity-table facility: motorways are freeways, the rest multilane."""
        return "freeway" if self.road_class == "Motorway" else "multilane"


@dataclass
class HourlyObservation:
    station_id: str
    direction: str
    timestamp: dt.datetime
    probe_counts: tuple      # 9 ints, class-major
    avg_speed: float
    free_flow_speed: float
    temperature: float
    visibility: float
    precipitation: float
    weather_desc: str
    profile_estimate: float
    target_volume: Optional[float] = None

    @property
    def key(self) -> tuple:
        return (self.station_id, self.direction)


class HolidayCalendar:
    """Maps calendar dates to one of the three encoded holidays."""

    def __init__(self, entries: Optional[dict] = None):
        self.entries = {}
        for day, name in (entries or {}).items():
            if name not in HOLIDAYS:
                raise DataError(f"unsupported holiday {name!r}; expected one of {HOLIDAYS}")
            self.entries[day] = name

    def holiday(self, day: dt.date) -> Optional[str]:
        return self.entries.get(day)

    @classmethod
    def federal(cls, years: Iterable[int]) -> "HolidayCalendar":
        """Third Monday of February, July 4, second Monday of October."""
        entries = {}
        for year in years:
            entries[_nth_monday(year, 2, 3)] = "Washington's Birthday"
            entries[dt.date(year, 7, 4)] = "Independence Day"
            entries[_nth_monday(year, 10, 2)] = "Columbus Day"
        return cls(entries)


def _nth_monday(year: int, month: int, n: int) -> dt.date:
    first = dt.date(year, month, 1)
    offset = (7 - first.weekday()) % 7
    return first + dt.timedelta(days=offset + 7 * (n - 1))


def encode_weather(temperature, visibility, precipitation, weather_desc) -> np.ndarray:
    out = np.zeros(3 + len(WEATHER_CATEGORIES))
    out[:3] = (temperature, visibility, precipitation)
    idx = _WEATHER_INDEX.get(str(weather_desc).strip().lower(), UNKNOWN_WEATHER)
    out[3 + idx] = 1.0
    return out


def encode_temporal(timestamp: dt.datetime, calendar: Optional[HolidayCalendar] = None) -> np.ndarray:
    out = np.zeros(29)
    out[timestamp.hour] = 1.0
    weekday = timestamp.weekday()
    out[24] = float(weekday == 5)
    out[25] = float(weekday == 6)
    if calendar is not None:
        name = calendar.holiday(timestamp.date())
        if name is not None:
            out[26 + HOLIDAYS.index(name)] = 1.0
    return out


def encode_infrastructure(meta: StationMeta) -> np.ndarray:
    out = np.zeros(7)
    out[0] = meta.lanes
    out[1] = meta.speed_limit
    out[2 + ROAD_CLASSES.index(meta.road_class)] = 1.0
    out[4 + ROAD_TYPES.index(meta.road_type)] = 1.0
    return out


def assemble(obs: HourlyObservation, meta: StationMeta, calendar: Optional[HolidayCalendar] = None):
    """Returns ``(features, target)``; target is NaN when the observation has none."""
    if obs.key != meta.key:
        raise StructuralError(f"observation {obs.key} paired with station {meta.key}")
    if len(obs.probe_counts) != 9:
        raise StructuralError(f"expected 9 probe counts, got {len(obs.probe_counts)}")
    row = np.empty(N_FEATURES)
    row[PROBE] = obs.probe_counts
    row[SPEED] = (obs.avg_speed, obs.free_flow_speed)
    row[11:47] = encode_weather(obs.temperature, obs.visibility, obs.precipitation, obs.weather_desc)
    row[INFRA] = encode_infrastructure(meta)
    row[TEMPORAL] = encode_temporal(obs.timestamp, calendar)
    row[PROFILE_COL] = obs.profile_estimate
    target = float("nan") if obs.target_volume is None else float(obs.target_volume)
    return row, target


@dataclass(frozen=True)
class Standardizer:
    """Z-score scaling of continuous columns; indicator columns pass through."""

    mean: np.ndarray
    std: np.ndarray
    exempt: tuple = INDICATOR_COLUMNS

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise StructuralError(f"standardizer fitted on {self.mean.shape[0]} columns, got {X.shape[-1]}")
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "exempt": list(self.exempt)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float), tuple(d["exempt"]))


def fit_standardizer(rows, exempt: Sequence[int] = INDICATOR_COLUMNS) -> Standardizer:
    """Fit on training rows only. Constant columns get std 1."""
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("cannot fit a standardizer on an empty row set")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    exempt = tuple(int(i) for i in exempt if i < X.shape[1])
    mean[list(exempt)] = 0.0
    std[list(exempt)] = 1.0
    return Standardizer(mean, std, exempt)


# --- CSV contracts -----------------------------------------------------------

OBSERVATION_COLUMNS = (
    ["station_id", "direction", "timestamp"]
    + [f"probe_{c}_{w}" for c in WEIGHT_CLASSES for w in WINDOWS]
    + ["avg_speed", "free_flow_speed", "temperature", "visibility", "precipitation",
       "weather_desc", "profile_estimate", "target_volume"]
)
OPTIONAL_OBSERVATION_COLUMNS = ("target_volume",)
STATION_COLUMNS = (
    "station_id", "direction", "road_type", "road_class", "lanes",
    "speed_limit", "aadt", "latitude", "longitude",
)


def _check_header(header, expected, optional, path):
    if header is None:
        raise DataError(f"{path}: empty file")
    unknown = [c for c in header if c not in expected]
    if unknown:
        raise DataError(f"{path}: unknown columns {unknown}")
    missing = [c for c in expected if c not in header and c not in optional]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate columns")


def _num(text):
    return repr(float(text)) if isinstance(text, float) else str(text)


def write_observations(path, observations: Iterable[HourlyObservation], with_target: bool = True) -> None:
    cols = OBSERVATION_COLUMNS if with_target else OBSERVATION_COLUMNS[:-1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for o in observations:
            row = [o.station_id, o.direction, o.timestamp.strftime(TIME_FORMAT)]
            row += [int(c) for c in o.probe_counts]
            row += [_num(float(v)) for v in (o.avg_speed, o.free_flow_speed, o.temperature,
                                              o.visibility, o.precipitation)]
            row += [o.weather_desc, _num(float(o.profile_estimate))]
            if with_target:
                row.append("" if o.target_volume is None else _num(float(o.target_volume)))
            writer.writerow(row)


def read_observations(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, OBSERVATION_COLUMNS, OPTIONAL_OBSERVATION_COLUMNS, path)
        for lineno, rec in enumerate(reader, start=2):
            try:
                probes = tuple(int(rec[f"probe_{c}_{w}"]) for c in WEIGHT_CLASSES for w in WINDOWS)
                if min(probes) < 0:
                    raise ValueError("negative probe count")
                target = rec.get("target_volume")
                obs = HourlyObservation(
                    station_id=rec["station_id"],
                    direction=rec["direction"],
                    timestamp=dt.datetime.strptime(rec["timestamp"], TIME_FORMAT),
                    probe_counts=probes,
                    avg_speed=float(rec["avg_speed"]),
                    free_flow_speed=float(rec["free_flow_speed"]),
                    temperature=float(rec["temperature"]),
                    visibility=float(rec["visibility"]),
                    precipitation=float(rec["precipitation"]),
                    weather_desc=rec["weather_desc"],
                    profile_estimate=float(rec["profile_estimate"]),
                    target_volume=float(target) if target not in (None, "") else None,
                )
            except (ValueError, TypeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if obs.target_volume is not None and obs.target_volume < 0:
                raise DataError(f"{path}:{lineno}: negative target volume")
            out.append(obs)
    return out


def write_stations(path, stations: Iterable[StationMeta]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATION_COLUMNS)
        for s in stations:
            writer.writerow([s.station_id, s.direction, s.road_type, s.road_class, s.lanes,
                             _num(float(s.speed_limit)), _num(float(s.aadt)),
                             _num(float(s.latitude)), _num(float(s.longitude))])


def read_stations(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, STATION_COLUMNS, ("latitude", "longitude"), path)
        for lineno, rec in enumerate(reader, start=2):
            try:
                out.append(StationMeta(
                    station_id=rec["station_id"],
                    direction=rec["direction"],
                    road_type=rec["road_type"],
                    road_class=rec["road_class"],
                    lanes=int(rec["lanes"]),
                    speed_limit=float(rec["speed_limit"]),
                    aadt=float(rec["aadt"]),
                    latitude=float(rec.get("latitude") or 0.0),
                    longitude=float(rec.get("longitude") or 0.0),
                ))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    keys = [s.key for s in out]
    if len(set(keys)) != len(keys):
        raise DataError(f"{path}: duplicate (station_id, direction) rows")
    return out


def write_holidays(path, calendar: HolidayCalendar) -> None:
    with open(path, "w") as fh:
        for day in sorted(calendar.entries):
            fh.write(f"{day.isoformat()},{calendar.entries[day]}\n")


def read_holidays(path) -> HolidayCalendar:
    """One ``YYYY-MM-DD,Name`` per line; blank lines and ``#`` comments ignored."""
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            day, _, name = line.partition(",")
            try:
                entries[dt.date.fromisoformat(day.strip())] = name.strip()
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return HolidayCalendar(entries)


# --- dataset assembly ----------------------------------------------------------

@dataclass
class Dataset:
    """Encoded rows plus the per-row bookkeeping the evaluation needs.

    ``X`` holds raw (unstandardized) features; ``y`` targets (NaN if absent).
    """

    X: np.ndarray
    y: np.ndarray
    station_ids: np.ndarray
    directions: np.ndarray
    timestamps: np.ndarray            # datetime64[h]
    stations: dict                    # (station_id, direction) -> StationMeta
    calendar: HolidayCalendar = field(default_factory=HolidayCalendar)

    def __len__(self):
        return self.X.shape[0]

    @property
    def carriageways(self) -> list:
        """Row-order-independent sorted list of (station_id, direction) keys."""
        return sorted(set(zip(self.station_ids.tolist(), self.directions.tolist())))

    @property
    def station_list(self) -> list:
        return sorted(set(self.station_ids.tolist()))

    def aadt(self) -> np.ndarray:
        return np.array([self.stations[k].aadt for k in zip(self.station_ids, self.directions)])

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], self.y[mask], self.station_ids[mask], self.directions[mask],
                       self.timestamps[mask], self.stations, self.calendar)


def build_dataset(observations: Sequence[HourlyObservation], stations: Sequence[StationMeta],
                  calendar: Optional[HolidayCalendar] = None) -> Dataset:
    calendar = calendar or HolidayCalendar()
    by_key = {s.key: s for s in stations}
    n = len(observations)
    X = np.empty((n, N_FEATURES))
    y = np.empty(n)
    for i, obs in enumerate(observations):
        meta = by_key.get(obs.key)
        if meta is None:
            raise DataError(f"observation for unknown carriageway {obs.key}")
        X[i], y[i] = assemble(obs, meta, calendar)
    return Dataset(
        X=X,
        y=y,
        station_ids=np.array([o.station_id for o in observations], dtype=object),
        directions=np.array([o.direction for o in observations], dtype=object),
        timestamps=np.array([np.datetime64(o.timestamp, "h") for o in observations], dtype="datetime64[h]"),
        stations=by_key,
        calendar=calendar,
    )


def load_dataset(observations_path, stations_path, holidays_path=None) -> Dataset:
    for p in (observations_path, stations_path, holidays_path):
        if p is not None and not os.path.exists(p):
            raise DataError(f"missing input file {p}")
    calendar = read_holidays(holidays_path) if holidays_path else HolidayCalendar()
    return build_dataset(read_observations(observations_path), read_stations(stations_path), calendar)

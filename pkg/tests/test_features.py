import datetime as dt

import numpy as np
import pytest
from hypothesis import given, strategies as st

from probevol.errors import DataError, StructuralError
from probevol.features import (
    FEATURE_NAMES, HOLIDAYS, HOUR_ONEHOT, INDICATOR_COLUMNS, N_FEATURES, OBSERVATION_COLUMNS,
    PROFILE_COL, ROAD_CLASS_ONEHOT, ROAD_TYPE_ONEHOT, ROAD_CLASSES, ROAD_TYPES, WEATHER_CATEGORIES,
    WEATHER_ONEHOT, HolidayCalendar, HourlyObservation, StationMeta, assemble, build_dataset,
    encode_temporal, encode_weather, fit_standardizer, load_dataset, read_holidays, read_observations,
    read_stations, write_holidays, write_observations, write_stations,
)


def make_meta(**kw):
    base = dict(station_id="S1", direction="A", road_type="Interstate", road_class="Motorway",
                lanes=3, speed_limit=65.0, aadt=40000.0)
    base.update(kw)
    return StationMeta(**base)


def make_obs(**kw):
    base = dict(station_id="S1", direction="A", timestamp=dt.datetime(2016, 7, 4, 8),
                probe_counts=(3, 4, 2, 0, 1, 0, 1, 0, 2), avg_speed=61.5, free_flow_speed=68.0,
                temperature=75.0, visibility=10.0, precipitation=0.0, weather_desc="Clear",
                profile_estimate=2100.0, target_volume=2300.0)
    base.update(kw)
    return HourlyObservation(**base)


observations = st.builds(
    make_obs,
    station_id=st.just("S1"),
    timestamp=st.datetimes(dt.datetime(2015, 1, 1), dt.datetime(2018, 12, 31)).map(
        lambda t: t.replace(minute=0, second=0, microsecond=0)),
    probe_counts=st.tuples(*[st.integers(0, 500)] * 9),
    avg_speed=st.floats(1, 90),
    temperature=st.floats(-20, 110),
    visibility=st.floats(0, 10),
    precipitation=st.floats(0, 3),
    weather_desc=st.sampled_from(WEATHER_CATEGORIES + ("Volcanic Ash", "")),
)
stations = st.builds(make_meta, road_type=st.sampled_from(ROAD_TYPES), road_class=st.sampled_from(ROAD_CLASSES),
                     lanes=st.integers(1, 6), speed_limit=st.sampled_from([40.0, 55.0, 65.0]))


def test_layout_constants():
    assert N_FEATURES == 84 and len(FEATURE_NAMES) == 84
    assert len(WEATHER_CATEGORIES) == 33
    assert PROFILE_COL == 83
    assert FEATURE_NAMES[0] == "probe_light_first" and FEATURE_NAMES[8] == "probe_heavy_before"


@given(observations, stations)
def test_block_sums(obs, meta):
    row, _ = assemble(obs, meta, HolidayCalendar.federal([2015, 2016, 2017, 2018]))
    assert row.shape == (84,)
    assert row[WEATHER_ONEHOT].sum() == 1
    assert row[HOUR_ONEHOT].sum() == 1
    assert row[ROAD_CLASS_ONEHOT].sum() == 1
    assert row[ROAD_TYPE_ONEHOT].sum() == 1
    assert set(np.unique(row[list(INDICATOR_COLUMNS)])) <= {0.0, 1.0}
    assert np.all(np.isfinite(row))


def test_assemble_example():
    cal = HolidayCalendar.federal([2016])
    row, target = assemble(make_obs(), make_meta(), cal)
    assert target == 2300.0
    assert list(row[:9]) == [3, 4, 2, 0, 1, 0, 1, 0, 2]
    assert row[9] == 61.5 and row[10] == 68.0
    assert row[14 + WEATHER_CATEGORIES.index("Clear")] == 1
    assert row[47] == 3 and row[48] == 65.0
    assert row[49] == 1 and row[51] == 1           # Motorway, Interstate
    assert row[54 + 8] == 1                        # 08:00
    assert row[78] == 0 and row[79] == 0           # Monday
    assert row[80 + HOLIDAYS.index("Independence Day")] == 1
    assert row[83] == 2100.0


def test_missing_target_is_nan():
    _, target = assemble(make_obs(target_volume=None), make_meta())
    assert np.isnan(target)


def test_weekend_flags():
    sat = encode_temporal(dt.datetime(2016, 7, 2, 0))
    sun = encode_temporal(dt.datetime(2016, 7, 3, 23))
    assert sat[24] == 1 and sat[25] == 0 and sat[0] == 1
    assert sun[24] == 0 and sun[25] == 1 and sun[23] == 1


def test_unrecognised_weather_goes_to_unknown():
    enc = encode_weather(50, 10, 0, "Volcanic Ash")
    assert enc[3 + WEATHER_CATEGORIES.index("Unknown")] == 1
    enc = encode_weather(50, 10, 0, "  heavy RAIN ")
    assert enc[3 + WEATHER_CATEGORIES.index("Heavy Rain")] == 1


def test_mismatched_station():
    with pytest.raises(StructuralError):
        assemble(make_obs(), make_meta(station_id="S2"))
    with pytest.raises(StructuralError):
        assemble(make_obs(probe_counts=(1, 2, 3)), make_meta())


def test_station_validation():
    with pytest.raises(DataError):
        make_meta(road_type="County")
    with pytest.raises(DataError):
        make_meta(lanes=0)
    with pytest.raises(DataError):
        make_meta(direction="N")


def test_federal_holidays():
    cal = HolidayCalendar.federal([2016])
    assert cal.holiday(dt.date(2016, 2, 15)) == "Washington's Birthday"
    assert cal.holiday(dt.date(2016, 7, 4)) == "Independence Day"
    assert cal.holiday(dt.date(2016, 10, 10)) == "Columbus Day"
    assert cal.holiday(dt.date(2016, 12, 25)) is None
    with pytest.raises(DataError):
        HolidayCalendar({dt.date(2016, 12, 25): "Christmas Day"})


def test_standardizer_exempts_indicators():
    rng = np.random.default_rng(0)
    cal = HolidayCalendar.federal([2016])
    rows = np.array([assemble(make_obs(probe_counts=tuple(rng.integers(0, 9, 9)),
                                       avg_speed=float(rng.uniform(30, 70))), make_meta(), cal)[0]
                     for _ in range(50)])
    std = fit_standardizer(rows)
    Z = std.apply(rows)
    np.testing.assert_array_equal(Z[:, list(INDICATOR_COLUMNS)], rows[:, list(INDICATOR_COLUMNS)])
    assert abs(Z[:, 9].mean()) < 1e-12 and abs(Z[:, 9].std() - 1) < 1e-12
    assert np.all(std.std > 0)      # constant columns get std 1


def test_csv_round_trip(tmp_path):
    obs = [make_obs(), make_obs(direction="B", target_volume=None, weather_desc="Light Rain")]
    metas = [make_meta(), make_meta(direction="B", aadt=39000.5)]
    cal = HolidayCalendar.federal([2016])
    write_observations(tmp_path / "o.csv", obs)
    write_stations(tmp_path / "s.csv", metas)
    write_holidays(tmp_path / "h.txt", cal)
    assert read_observations(tmp_path / "o.csv") == obs
    assert read_stations(tmp_path / "s.csv") == metas
    assert read_holidays(tmp_path / "h.txt").entries == cal.entries
    header = (tmp_path / "o.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == tuple(OBSERVATION_COLUMNS)
    ds = load_dataset(tmp_path / "o.csv", tmp_path / "s.csv", tmp_path / "h.txt")
    assert ds.X.shape == (2, 84) and np.isnan(ds.y[1])
    assert ds.carriageways == [("S1", "A"), ("S1", "B")]


def test_target_column_optional(tmp_path):
    write_observations(tmp_path / "o.csv", [make_obs()], with_target=False)
    assert read_observations(tmp_path / "o.csv")[0].target_volume is None


def test_schema_errors(tmp_path):
    p = tmp_path / "o.csv"
    write_observations(p, [make_obs()])
    text = p.read_text()
    (tmp_path / "extra.csv").write_text(text.replace("target_volume", "target_volume,bogus", 1))
    with pytest.raises(DataError, match="unknown columns"):
        read_observations(tmp_path / "extra.csv")
    (tmp_path / "missing.csv").write_text(text.replace("avg_speed,", "", 1))
    with pytest.raises(DataError, match="missing columns"):
        read_observations(tmp_path / "missing.csv")
    lines = text.splitlines()
    (tmp_path / "bad.csv").write_text(lines[0] + "\n" + lines[1].replace("61.5", "fast") + "\n")
    with pytest.raises(DataError, match=":2:"):
        read_observations(tmp_path / "bad.csv")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.csv", tmp_path / "nope2.csv")


def test_unknown_carriageway_rejected():
    with pytest.raises(DataError):
        build_dataset([make_obs(direction="B")], [make_meta()])

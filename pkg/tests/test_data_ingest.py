from datetime import date, time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buscast import data_ingest
from buscast.data_ingest import (
    DEFAULT_TIMETABLE,
    RidershipRecord,
    RouteDataset,
    ServiceWeather,
    WeatherCategory,
    WeatherObservation,
    binarize_weather,
    build_route_dataset,
    join_weather_to_services,
    parse_ridership_csv,
    parse_service_weather_csv,
    parse_weather_csv,
    write_ridership_csv,
    write_service_weather_csv,
)
from buscast.errors import (
    DuplicateKey,
    EmptyDataset,
    HourOutOfRange,
    MalformedRow,
    MissingColumn,
    MissingTimetableEntry,
    MissingWeather,
    UnknownCategory,
)
from buscast.synth import SynthConfig, generate


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestParseRidership:
    def test_direct_field_mapping(self, tmp_path):
        path = _write(tmp_path, "r.csv", "date,service_index,stop_index,ridership\n2021-10-01,1,1,3\n")
        records = parse_ridership_csv(path)
        assert records == [RidershipRecord(date(2021, 10, 1), 1, 1, 3)]

    def test_negative_count_rejected(self, tmp_path):
        path = _write(tmp_path, "r.csv", "date,service_index,stop_index,ridership\n2021-10-01,1,1,-2\n")
        with pytest.raises(MalformedRow):
            parse_ridership_csv(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = _write(
            tmp_path,
            "r.csv",
            "date,service_index,stop_index,ridership\n"
            "2021-10-01,1,1,3\n2021-10-01,1,1,4\n",
        )
        with pytest.raises(DuplicateKey):
            parse_ridership_csv(path)

    def test_missing_column(self, tmp_path):
        path = _write(tmp_path, "r.csv", "date,service_index,stop_index\n2021-10-01,1,1\n")
        with pytest.raises(MissingColumn):
            parse_ridership_csv(path)

    def test_bad_date_mentions_line(self, tmp_path):
        path = _write(tmp_path, "r.csv", "date,service_index,stop_index,ridership\nnot-a-date,1,1,3\n")
        with pytest.raises(MalformedRow, match=":2"):
            parse_ridership_csv(path)

    def test_column_remapping(self, tmp_path):
        path = _write(tmp_path, "r.csv", "day,svc,stop,count\n2021-10-01,2,3,7\n")
        records = parse_ridership_csv(
            path, {"date": "day", "service_index": "svc", "stop_index": "stop", "ridership": "count"}
        )
        assert records == [RidershipRecord(date(2021, 10, 1), 2, 3, 7)]

    def test_row_order_preserved(self, tmp_path):
        path = _write(
            tmp_path,
            "r.csv",
            "date,service_index,stop_index,ridership\n"
            "2021-10-02,1,1,5\n2021-10-01,1,1,3\n",
        )
        records = parse_ridership_csv(path)
        assert [r.service_date.day for r in records] == [2, 1]


class TestParseWeather:
    def test_direct_mapping(self, tmp_path):
        path = _write(tmp_path, "w.csv", "date,hour,category,precipitation_mm\n2021-10-01,7,Sunny,0.0\n")
        obs = parse_weather_csv(path)
        assert obs == [WeatherObservation(date(2021, 10, 1), 7, WeatherCategory.SUNNY, 0.0)]

    def test_hour_out_of_range(self, tmp_path):
        path = _write(tmp_path, "w.csv", "date,hour,category,precipitation_mm\n2021-10-01,3,Sunny,0.0\n")
        with pytest.raises(HourOutOfRange):
            parse_weather_csv(path)

    def test_unknown_category(self, tmp_path):
        path = _write(tmp_path, "w.csv", "date,hour,category,precipitation_mm\n2021-10-01,7,Hail,0.0\n")
        with pytest.raises(UnknownCategory):
            parse_weather_csv(path)

    def test_spaced_labels_and_aliases(self, tmp_path):
        path = _write(
            tmp_path,
            "w.csv",
            "date,hour,category,precipitation_mm\n"
            "2021-10-01,7,Rain showers,1.0\n2021-10-01,8,hare,0.0\n",
        )
        obs = parse_weather_csv(path, aliases={"hare": "Sunny"})
        assert obs[0].category is WeatherCategory.RAIN_SHOWERS
        assert obs[1].category is WeatherCategory.SUNNY

    def test_alias_to_unknown_target(self, tmp_path):
        path = _write(tmp_path, "w.csv", "date,hour,category,precipitation_mm\n")
        with pytest.raises(UnknownCategory):
            parse_weather_csv(path, aliases={"x": "Blizzard"})

    def test_duplicate_hour(self, tmp_path):
        path = _write(
            tmp_path,
            "w.csv",
            "date,hour,category,precipitation_mm\n"
            "2021-10-01,7,Sunny,0.0\n2021-10-01,7,Rain,1.0\n",
        )
        with pytest.raises(DuplicateKey):
            parse_weather_csv(path)

    def test_negative_precipitation(self, tmp_path):
        path = _write(tmp_path, "w.csv", "date,hour,category,precipitation_mm\n2021-10-01,7,Rain,-1.0\n")
        with pytest.raises(MalformedRow):
            parse_weather_csv(path)


class TestBinarize:
    def test_cloudy_is_dry(self):
        obs = WeatherObservation(date(2021, 10, 1), 7, WeatherCategory.CLOUDY, 0.0)
        assert binarize_weather(obs) == (False, 0.0)

    def test_freezing_rain_is_wet(self):
        obs = WeatherObservation(date(2021, 10, 1), 7, WeatherCategory.FREEZING_RAIN, 1.5)
        assert binarize_weather(obs) == (True, 1.5)

    def test_other_is_wet_even_without_precipitation(self):
        obs = WeatherObservation(date(2021, 10, 1), 7, WeatherCategory.OTHER, 0.0)
        assert binarize_weather(obs) == (True, 0.0)

    def test_total_function_four_wet_two_dry(self):
        flags = {
            cat: binarize_weather(WeatherObservation(date(2021, 10, 1), 7, cat, 0.0))[0]
            for cat in WeatherCategory
        }
        assert sum(flags.values()) == 4
        assert not flags[WeatherCategory.SUNNY] and not flags[WeatherCategory.CLOUDY]


class TestJoin:
    def test_floor_of_departure_time(self):
        records = [RidershipRecord(date(2021, 10, 1), 1, 1, 3)]
        weather = [WeatherObservation(date(2021, 10, 1), 6, WeatherCategory.SUNNY, 0.0)]
        joined = join_weather_to_services(records, weather, {1: time(6, 40)})
        assert joined == [ServiceWeather(date(2021, 10, 1), 1, False, 0.0)]

    def test_late_service(self):
        records = [RidershipRecord(date(2021, 10, 1), 2, 1, 3)]
        weather = [WeatherObservation(date(2021, 10, 1), 22, WeatherCategory.RAIN, 2.0)]
        joined = join_weather_to_services(records, weather, {2: time(22, 30)})
        assert joined == [ServiceWeather(date(2021, 10, 1), 2, True, 2.0)]

    def test_missing_weather(self):
        records = [RidershipRecord(date(2021, 10, 2), 1, 1, 3)]
        weather = [WeatherObservation(date(2021, 10, 1), 6, WeatherCategory.SUNNY, 0.0)]
        with pytest.raises(MissingWeather):
            join_weather_to_services(records, weather, {1: time(6, 40)})

    def test_missing_timetable_entry(self):
        records = [RidershipRecord(date(2021, 10, 1), 9, 1, 3)]
        weather = [WeatherObservation(date(2021, 10, 1), 6, WeatherCategory.SUNNY, 0.0)]
        with pytest.raises(MissingTimetableEntry):
            join_weather_to_services(records, weather, {1: time(6, 40)})


def _complete_inputs(n_days=2, n_stops=5, services=26):
    config = SynthConfig(n_days=n_days, n_stops=n_stops, services_per_day=services, seed=1)
    records, observations = generate(config)
    weather = join_weather_to_services(records, observations, config.timetable)
    return records, weather, config


class TestBuildRouteDataset:
    def test_counts_complete_services(self):
        records, weather, config = _complete_inputs()
        ds = build_route_dataset(records, weather, 5, 26, config.timetable)
        assert len(ds.complete_services) == 52
        assert ds.incomplete_services == ()

    def test_missing_stop_flags_incomplete(self):
        records, weather, config = _complete_inputs()
        key = (records[0].service_date, records[0].service_index)
        records = [
            r
            for r in records
            if not (r.service_date == key[0] and r.service_index == key[1] and r.stop_index == 3)
        ]
        ds = build_route_dataset(records, weather, 5, 26, config.timetable)
        assert ds.incomplete_services == (key,)
        assert len(ds.complete_services) == 51

    def test_empty_rejected(self):
        with pytest.raises(EmptyDataset):
            build_route_dataset([], [], 5, 26, DEFAULT_TIMETABLE)

    def test_out_of_range_indices_rejected(self):
        records, weather, config = _complete_inputs()
        bad = records + [RidershipRecord(records[0].service_date, 1, 6, 1)]
        with pytest.raises(MalformedRow):
            build_route_dataset(bad, weather, 5, 26, config.timetable)

    def test_chronological_sort_total(self):
        records, weather, config = _complete_inputs()
        ds = build_route_dataset(reversed(records), weather, 5, 26, config.timetable)
        keys = [(r.service_date, r.service_index, r.stop_index) for r in ds.records]
        assert keys == sorted(keys)

    def test_every_service_needs_weather(self):
        records, weather, config = _complete_inputs()
        with pytest.raises(MissingWeather):
            build_route_dataset(records, weather[:-1], 5, 26, config.timetable)


class TestRoundTrips:
    def test_dataset_cache_round_trip(self, tmp_path, small_dataset):
        path = tmp_path / "dataset.json"
        small_dataset.save(path)
        assert RouteDataset.load(path) == small_dataset

    def test_csv_round_trip(self, tmp_path):
        records, weather, config = _complete_inputs()
        r_path, w_path = tmp_path / "r.csv", tmp_path / "w.csv"
        write_ridership_csv(records, r_path)
        write_service_weather_csv(weather, w_path)
        ds = build_route_dataset(records, weather, 5, 26, config.timetable)
        ds2 = build_route_dataset(
            parse_ridership_csv(r_path), parse_service_weather_csv(w_path), 5, 26, config.timetable
        )
        assert ds == ds2

    @given(
        rows=st.lists(
            st.tuples(
                st.dates(min_value=date(2021, 1, 1), max_value=date(2022, 12, 31)),
                st.integers(min_value=1, max_value=26),
                st.integers(min_value=1, max_value=5),
                st.integers(min_value=0, max_value=500),
            ),
            min_size=1,
            max_size=50,
            unique_by=lambda row: row[:3],
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_ridership_csv_round_trip_property(self, rows, tmp_path_factory):
        records = [RidershipRecord(*row) for row in rows]
        path = tmp_path_factory.mktemp("rt") / "r.csv"
        write_ridership_csv(records, path)
        assert parse_ridership_csv(path) == records


def test_synthetic_rain_counts_match_binarization(small_dataset):
    # every joined flag agrees with re-binarizing through the category sets
    config = SynthConfig(n_days=30, seed=11)
    records, observations = generate(config)
    wet = {(o.obs_date, o.obs_hour) for o in observations if o.category in data_ingest.RAIN_CATEGORIES}
    for sw in small_dataset.weather.values():
        hour = config.timetable[sw.service_index].hour
        assert sw.rain_flag == ((sw.service_date, hour) in wet)


def test_next_service_key_wraps_days():
    assert data_ingest.next_service_key((date(2021, 10, 1), 26), 26) == (date(2021, 10, 2), 1)
    assert data_ingest.next_service_key((date(2021, 10, 1), 3), 26) == (date(2021, 10, 1), 4)


def test_full_year_observation_count():
    # 18 hourly rows per day (6:00 through 23:00) over 365 days
    _, observations = generate(SynthConfig(n_days=365, seed=0))
    assert len(observations) == 6570

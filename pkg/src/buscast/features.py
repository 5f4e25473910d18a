"""Feature encoding and window construction.

Each complete service becomes one feature row per stop. The full row layout,
in fixed order, is

    [scaled ridership | day-of-week one-hot (7) | service-number one-hot (S)
     | rain-flag one-hot (2) | scaled precipitation]

with blocks dropped according to the :class:`FeatureSpec`. Ridership is
min-max scaled per stop, precipitation globally; both scalers are fitted on
the training split only. Day-of-week indices run Monday=0 .. Sunday=6, and
the rain one-hot is [no-rain, rain].

Rows are sliced into stride-1 look-back windows. Windows never span a gap
left by an excluded incomplete service: a window is always L truly
consecutive timetable slots.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_ingest import RouteDataset, ServiceKey, keys_adjacent
from .errors import (
    BadArgs,
    BadBoundaries,
    EmptyDataset,
    EmptyInput,
    IndexOutOfRange,
    MisalignedBatches,
    TooShort,
)

N_WEEKDAYS = 7
N_RAIN_CLASSES = 2


@dataclass(frozen=True)
class FeatureSpec:
    """Which feature blocks a method feeds into its input layer."""

    use_day_of_week: bool
    use_service_number: bool
    use_rain: bool
    services_per_day: int
    use_ridership: bool = True

    @property
    def dimension(self) -> int:
        dim = 1 if self.use_ridership else 0
        if self.use_day_of_week:
            dim += N_WEEKDAYS
        if self.use_service_number:
            dim += self.services_per_day
        if self.use_rain:
            dim += N_RAIN_CLASSES + 1
        return dim


@dataclass(frozen=True)
class ScalerParams:
    """Min-max bounds for one scaled channel, fitted on the training split."""

    min: float
    max: float


@dataclass(frozen=True)
class ScalerSet:
    ridership: dict[int, ScalerParams]
    precipitation: ScalerParams


@dataclass(frozen=True)
class FeatureMatrix:
    """Encoded rows for one stop, chronological, with contiguity segments."""

    stop_index: int
    rows: np.ndarray  # (T, D) float64
    targets: np.ndarray  # (T,) float64, raw ridership
    keys: tuple[ServiceKey, ...]
    segments: tuple[tuple[int, int], ...]  # half-open contiguous runs


@dataclass(frozen=True)
class WindowedDataset:
    """Per-stop supervised windows: X[i] covers services i..i+L-1, y[i] the next one."""

    stop_index: int
    x: np.ndarray  # (N, L, D) float64
    y: np.ndarray  # (N, 1) float64, raw ridership of the predicted service
    look_back: int
    index_map: tuple[ServiceKey, ...]  # key of the predicted service per window


@dataclass(frozen=True)
class AlignedWindows:
    """Window streams of all stops aligned on identical target services."""

    xs: tuple[np.ndarray, ...]  # one (N, L, D) tensor per stop
    y: np.ndarray  # (N, n_stops) raw targets, column b-1 = stop b
    look_back: int
    index_map: tuple[ServiceKey, ...]

    @property
    def n_samples(self) -> int:
        return self.y.shape[0]

    @property
    def n_stops(self) -> int:
        return self.y.shape[1]


def fit_scaler(values: Sequence[float] | np.ndarray) -> ScalerParams:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyInput("cannot fit a scaler on an empty sequence")
    return ScalerParams(min=float(values.min()), max=float(values.max()))


def scale(x: float | np.ndarray, params: ScalerParams):
    """(x - min) / (max - min); a constant channel maps to 0. No clipping."""
    span = params.max - params.min
    if span == 0.0:
        return np.zeros_like(np.asarray(x, dtype=np.float64)) if isinstance(x, np.ndarray) else 0.0
    return (x - params.min) / span


def inverse_scale(x: float | np.ndarray, params: ScalerParams):
    return x * (params.max - params.min) + params.min


def one_hot(index: int, cardinality: int) -> np.ndarray:
    if not 0 <= index < cardinality:
        raise IndexOutOfRange(f"index {index} outside [0, {cardinality})")
    vec = np.zeros(cardinality, dtype=np.float64)
    vec[index] = 1.0
    return vec


def fit_scalers(train: RouteDataset, spec: FeatureSpec) -> ScalerSet:
    """Per-stop ridership bounds plus global precipitation bounds, train split only."""
    ridership = {
        stop: fit_scaler([r.ridership for r in train.records if r.stop_index == stop])
        for stop in range(1, train.n_stops + 1)
    }
    if spec.use_rain:
        precipitation = fit_scaler([sw.precipitation_mm for sw in train.weather.values()])
    else:
        precipitation = ScalerParams(0.0, 0.0)
    return ScalerSet(ridership=ridership, precipitation=precipitation)


def encode_service(record, service_weather, spec: FeatureSpec, scalers: ScalerSet) -> np.ndarray:
    """One feature row, blocks concatenated in the fixed documented order."""
    parts: list[np.ndarray] = []
    if spec.use_ridership:
        scaled = scale(float(record.ridership), scalers.ridership[record.stop_index])
        parts.append(np.array([scaled], dtype=np.float64))
    if spec.use_day_of_week:
        parts.append(one_hot(record.service_date.weekday(), N_WEEKDAYS))
    if spec.use_service_number:
        parts.append(one_hot(record.service_index - 1, spec.services_per_day))
    if spec.use_rain:
        parts.append(one_hot(int(service_weather.rain_flag), N_RAIN_CLASSES))
        scaled_precip = scale(service_weather.precipitation_mm, scalers.precipitation)
        parts.append(np.array([scaled_precip], dtype=np.float64))
    return np.concatenate(parts)


def encode_stop(dataset: RouteDataset, stop_index: int, spec: FeatureSpec, scalers: ScalerSet) -> FeatureMatrix:
    """Encode every complete service at one stop, tracking contiguity segments."""
    keys = dataset.complete_services
    if not keys:
        raise EmptyDataset("no complete services to encode")
    rows = np.empty((len(keys), spec.dimension), dtype=np.float64)
    targets = np.empty(len(keys), dtype=np.float64)
    segments: list[tuple[int, int]] = []
    start = 0
    for i, key in enumerate(keys):
        record = dataset.rows_for_service(key)[stop_index]
        rows[i] = encode_service(record, dataset.weather[key], spec, scalers)
        targets[i] = float(record.ridership)
        if i > 0 and not keys_adjacent(keys[i - 1], key, dataset.services_per_day):
            segments.append((start, i))
            start = i
    segments.append((start, len(keys)))
    return FeatureMatrix(
        stop_index=stop_index,
        rows=rows,
        targets=targets,
        keys=tuple(keys),
        segments=tuple(segments),
    )


def build_windows(matrix: FeatureMatrix, look_back: int) -> WindowedDataset:
    """Stride-1 windows within each contiguous segment; N = sum(T_seg - L)."""
    if look_back < 1:
        raise BadArgs(f"look-back must be >= 1, got {look_back}")
    xs: list[np.ndarray] = []
    ys: list[float] = []
    index_map: list[ServiceKey] = []
    for seg_start, seg_end in matrix.segments:
        for i in range(seg_start, seg_end - look_back):
            xs.append(matrix.rows[i : i + look_back])
            ys.append(matrix.targets[i + look_back])
            index_map.append(matrix.keys[i + look_back])
    if not xs:
        raise TooShort(
            f"no segment longer than look-back {look_back} at stop {matrix.stop_index}"
        )
    x = np.stack(xs).astype(np.float64)
    y = np.array(ys, dtype=np.float64).reshape(-1, 1)
    return WindowedDataset(matrix.stop_index, x, y, look_back, tuple(index_map))


def align_windows(per_stop: Sequence[WindowedDataset]) -> AlignedWindows:
    """Stack per-stop windows; all streams must target the same services."""
    if not per_stop:
        raise EmptyInput("no per-stop windows to align")
    first = per_stop[0]
    for w in per_stop[1:]:
        if w.index_map != first.index_map or w.look_back != first.look_back:
            raise MisalignedBatches(
                f"stop {w.stop_index} windows do not align with stop {first.stop_index}"
            )
    y = np.column_stack([w.y[:, 0] for w in per_stop])
    return AlignedWindows(
        xs=tuple(w.x for w in per_stop),
        y=y,
        look_back=first.look_back,
        index_map=first.index_map,
    )


def chronological_split(
    dataset: RouteDataset, boundaries: tuple[date, date]
) -> tuple[RouteDataset, RouteDataset, RouteDataset]:
    """Partition by service date: train <= b1 < validation <= b2 < test."""
    train_end, val_end = boundaries
    if train_end >= val_end:
        raise BadBoundaries(f"boundaries not strictly increasing: {train_end} >= {val_end}")
    lo, hi = dataset.date_range()
    one_day = timedelta(days=1)
    try:
        train = dataset.subset_by_dates(lo, train_end)
        val = dataset.subset_by_dates(train_end + one_day, val_end)
        test = dataset.subset_by_dates(val_end + one_day, hi)
    except EmptyDataset as exc:
        raise BadBoundaries(f"boundaries {boundaries} leave an empty split") from exc
    return train, val, test


def scale_targets(aligned: AlignedWindows, scalers: ScalerSet) -> AlignedWindows:
    """Copy of the aligned windows with targets min-max scaled per stop."""
    y = aligned.y.copy()
    for col in range(y.shape[1]):
        params = scalers.ridership[col + 1]
        span = params.max - params.min
        y[:, col] = 0.0 if span == 0.0 else (y[:, col] - params.min) / span
    return replace(aligned, y=y)


def single_stop_view(aligned: AlignedWindows, column: int) -> AlignedWindows:
    """One stop's stream out of an aligned set (column is zero-based)."""
    return AlignedWindows(
        xs=(aligned.xs[column],),
        y=aligned.y[:, column : column + 1],
        look_back=aligned.look_back,
        index_map=aligned.index_map,
    )


def subset_by_targets(aligned: AlignedWindows, keys: set[ServiceKey]) -> AlignedWindows:
    """Restrict windows to those predicting one of ``keys`` (order preserved)."""
    mask = [i for i, key in enumerate(aligned.index_map) if key in keys]
    if not mask:
        raise EmptyInput("no windows left after target restriction")
    idx = np.array(mask, dtype=np.intp)
    return AlignedWindows(
        xs=tuple(x[idx] for x in aligned.xs),
        y=aligned.y[idx],
        look_back=aligned.look_back,
        index_map=tuple(aligned.index_map[i] for i in mask),
    )


@dataclass(frozen=True)
class PreparedData:
    """Windowed train/validation/test streams plus the scalers that made them."""

    train: AlignedWindows
    val: AlignedWindows
    test: AlignedWindows
    scalers: ScalerSet
    spec: FeatureSpec


def encode_windows(
    dataset: RouteDataset, spec: FeatureSpec, scalers: ScalerSet, look_back: int
) -> AlignedWindows:
    """Encode and window every stop of one dataset with pre-fitted scalers."""
    per_stop = [
        build_windows(encode_stop(dataset, stop, spec, scalers), look_back)
        for stop in range(1, dataset.n_stops + 1)
    ]
    return align_windows(per_stop)


def prepare_windows(
    dataset: RouteDataset,
    boundaries: tuple[date, date],
    spec: FeatureSpec,
    look_back: int,
) -> PreparedData:
    """Split chronologically, fit scalers on train, encode and window each split."""
    train_ds, val_ds, test_ds = chronological_split(dataset, boundaries)
    scalers = fit_scalers(train_ds, spec)
    return PreparedData(
        train=encode_windows(train_ds, spec, scalers, look_back),
        val=encode_windows(val_ds, spec, scalers, look_back),
        test=encode_windows(test_ds, spec, scalers, look_back),
        scalers=scalers,
        spec=spec,
    )


TENSOR_MAGIC = b"BCT1"


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Binary tensor container: magic, dim count, dims, row-major float64 payload."""
    array = np.ascontiguousarray(array, dtype=np.float64)
    with Path(path).open("wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise BadArgs(f"{path}: not a buscast tensor file")
    ndim = struct.unpack_from("<I", raw, 4)[0]
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    offset = 8 + 8 * ndim
    expected = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(raw, dtype="<f8", count=expected, offset=offset)
    if data.size != expected:
        raise BadArgs(f"{path}: truncated tensor payload")
    return data.reshape(shape).copy()


def feature_matrix_to_csv(matrix: FeatureMatrix, path: str | Path) -> None:
    """Inspection export: one row per service with its key and raw target."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["date", "service_index", "target"]
            + [f"f{j}" for j in range(matrix.rows.shape[1])]
        )
        for i, (day, svc) in enumerate(matrix.keys):
            writer.writerow(
                [day.isoformat(), svc, repr(float(matrix.targets[i]))]
                + [repr(float(v)) for v in matrix.rows[i]]
            )

"""Time-series ingestion, normalization, chronological split, and windowing.

The bundled synthetic generator stands in for the private river-monitoring
data: a yearly and a weekly sinusoid around 9 mg/L plus Gaussian noise,
clamped to a plausible dissolved-oxygen range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_SERIES_LENGTH = 16  # window plus one target

DEFAULT_COLUMN = "dissolved_oxygen"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DataError("time series must be one-dimensional")
        if v.size and not np.all(np.isfinite(v)):
            raise DataError("time series contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class NormalizationParams:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DataError("normalization needs max > min")


@dataclass(frozen=True)
class WindowedDataset:
    """Chronological (x, y) pairs: x = values[i .. i+w), y = values[i+w]."""

    x: np.ndarray  # [n, window]
    y: np.ndarray  # [n]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError("windowed dataset shapes are inconsistent")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.x.shape[0]


def load_csv(path, column_name: str = DEFAULT_COLUMN) -> TimeSeries:
    """Read one numeric column from a headered CSV, in file order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        if column_name not in reader.fieldnames:
            raise DataError(
                f"{path}: no column {column_name!r}; "
                f"available: {', '.join(reader.fieldnames)}"
            )
        values = []
        for row_no, row in enumerate(reader, start=2):
            cell = row[column_name]
            try:
                values.append(float(cell))
            except (TypeError, ValueError):
                raise DataError(
                    f"{path}: row {row_no}: non-numeric value {cell!r} "
                    f"in column {column_name!r}"
                ) from None
    if not values:
        raise DataError(f"{path}: column {column_name!r} has no rows")
    return TimeSeries(np.array(values), source=str(path))


def save_csv(series: TimeSeries, path, column_name: str = DEFAULT_COLUMN) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", column_name])
        for day, value in enumerate(series.values):
            writer.writerow([day, repr(float(value))])


def generate_synthetic(seed: int, n_days: int) -> TimeSeries:
    """Seeded surrogate dissolved-oxygen series (mg/L), clamped to [4, 14]."""
    if n_days < MIN_SERIES_LENGTH:
        raise DataError(f"need at least {MIN_SERIES_LENGTH} days")
    rng = np.random.default_rng(seed)
    t = np.arange(n_days, dtype=float)
    values = (
        9.0
        + 2.5 * np.sin(2 * np.pi * t / 365.25)
        + 0.5 * np.sin(2 * np.pi * t / 7.0)
        + rng.normal(0.0, 0.25, size=n_days)
    )
    return TimeSeries(np.clip(values, 4.0, 14.0), source=f"synthetic(seed={seed})")


def chronological_split(series: TimeSeries, train_fraction: float = 0.7):
    """First floor(fraction * L) values for training, the rest for testing."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must be in (0, 1)")
    n_train = int(np.floor(train_fraction * len(series)))
    train = series.values[:n_train]
    test = series.values[n_train:]
    if len(train) < MIN_SERIES_LENGTH or len(test) < MIN_SERIES_LENGTH:
        raise DataError(
            f"degenerate split: {len(train)}/{len(test)} values "
            f"(each side needs >= {MIN_SERIES_LENGTH})"
        )
    return (
        TimeSeries(train.copy(), source=series.source),
        TimeSeries(test.copy(), source=series.source),
    )


def fit_minmax(train: TimeSeries) -> NormalizationParams:
    lo = float(train.values.min())
    hi = float(train.values.max())
    if hi == lo:
        raise DataError("constant training series; min-max scaling undefined")
    return NormalizationParams(lo, hi)


def apply_minmax(series: TimeSeries, p: NormalizationParams) -> TimeSeries:
    """x' = (x - min) / (max - min); values outside [0, 1] are kept as-is."""
    scaled = (series.values - p.min) / (p.max - p.min)
    return TimeSeries(scaled, source=series.source)


def invert_minmax(values: np.ndarray, p: NormalizationParams) -> np.ndarray:
    return np.asarray(values) * (p.max - p.min) + p.min


def make_windows(series: TimeSeries, window_length: int = 15) -> WindowedDataset:
    """All length-w windows at stride 1, each paired with the following value."""
    v = series.values
    if len(v) < window_length + 1:
        raise DataError(f"series too short to window: {len(v)} < {window_length + 1}")
    n = len(v) - window_length
    idx = np.arange(window_length)[None, :] + np.arange(n)[:, None]
    return WindowedDataset(v[idx], v[window_length:])


@dataclass(frozen=True)
class ForecastDataset:
    """Windowed, normalized train/validation pair ready for the training loop."""

    train: WindowedDataset
    val: WindowedDataset
    normalization: NormalizationParams
    window_length: int = 15


def prepare_forecast_dataset(
    series: TimeSeries,
    train_fraction: float = 0.7,
    window_length: int = 15,
) -> ForecastDataset:
    """Split chronologically, fit min-max on the training segment only, then
    window each segment independently (no window straddles the boundary)."""
    train_raw, test_raw = chronological_split(series, train_fraction)
    norm = fit_minmax(train_raw)
    train = make_windows(apply_minmax(train_raw, norm), window_length)
    val = make_windows(apply_minmax(test_raw, norm), window_length)
    return ForecastDataset(train, val, norm, window_length)

"""Power-trace ingestion, 6 s resampling, normalisation and seq2point windows."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd

from eltnilm.container import read_container, write_container
from eltnilm.errors import ConfigError, DataError

SAMPLE_PERIOD = 6
DEFAULT_INPUT_LEN = 599
CACHE_VERSION = 1


@dataclass
class PowerSeries:
    name: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise DataError(f"{self.name}: timestamps and values must be equal-length 1-D arrays")
        if np.isnan(self.values).any():
            raise DataError(f"{self.name}: NaN power values")
        if len(self.timestamps) > 1 and (np.diff(self.timestamps) <= 0).any():
            raise DataError(f"{self.name}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)


def load_channel(path, name: Optional[str] = None) -> PowerSeries:
    """Read a ``timestamp,power`` CSV.

    Rows whose power is missing, non-numeric or NaN are dropped. Timestamps
    must be integer epoch seconds, strictly increasing; violations raise
    :class:`DataError` naming the file line.
    """
    path = Path(path)
    name = name or path.stem
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    if list(df.columns) != ["timestamp", "power"]:
        raise DataError(f"{path}: header must be 'timestamp,power', got {','.join(df.columns)!r}")
    ts = pd.to_numeric(df["timestamp"], errors="coerce")
    bad = ts.isna() | (ts != ts.round())
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}: line {row + 2}: timestamp {df['timestamp'].iloc[row]!r} is not an integer")
    power = pd.to_numeric(df["power"], errors="coerce").to_numpy(dtype=np.float64)
    keep = np.isfinite(power)
    lines = np.flatnonzero(keep) + 2
    ts = ts.to_numpy()[keep].astype(np.int64)
    power = power[keep]
    if len(ts) > 1:
        back = np.flatnonzero(np.diff(ts) <= 0)
        if len(back):
            raise DataError(f"{path}: line {lines[back[0] + 1]}: timestamp {ts[back[0] + 1]} is not after {ts[back[0]]}")
    return PowerSeries(name, ts, power)


def write_channel(path, series: PowerSeries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"timestamp": series.timestamps, "power": series.values}).to_csv(path, index=False)


@dataclass
class Segment:
    """A gap-free run of resampled bins. ``appliance`` is None for mains-only data."""

    timestamps: np.ndarray
    mains: np.ndarray
    appliance: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.timestamps)


def _bin_means(series: PowerSeries, t0: int, t1: int, period: int) -> tuple:
    sel = (series.timestamps >= t0) & (series.timestamps <= t1)
    bins = (series.timestamps[sel] - t0) // period
    n_bins = (t1 - t0) // period + 1
    sums = np.bincount(bins, weights=series.values[sel], minlength=n_bins)
    counts = np.bincount(bins, minlength=n_bins)
    means = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    return means, counts


def _split_runs(keep: np.ndarray) -> list:
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1) + 1
    return np.split(idx, breaks)


def resample(channels: list, period: int = SAMPLE_PERIOD) -> list:
    """Average each channel into left-closed ``period``-second bins over the
    common time range and return the gap-free runs where every channel has
    data, as lists of per-channel arrays with bin start times."""
    empty = [c.name for c in channels if len(c) == 0]
    if empty:
        raise DataError(f"cannot resample empty channel(s): {', '.join(empty)}")
    t0 = max(int(c.timestamps[0]) for c in channels)
    t1 = min(int(c.timestamps[-1]) for c in channels)
    if t1 < t0:
        raise DataError("channels do not overlap in time: " + ", ".join(c.name for c in channels))
    binned = [_bin_means(c, t0, t1, period) for c in channels]
    keep = np.logical_and.reduce([counts > 0 for _, counts in binned])
    starts = t0 + period * np.arange(len(keep), dtype=np.int64)
    return [(starts[run], [means[run] for means, _ in binned]) for run in _split_runs(keep)]


def align_resample(mains: PowerSeries, appliance: PowerSeries, period: int = SAMPLE_PERIOD) -> list:
    """Pair mains and appliance readings on a common ``period`` grid.

    A bin holds the mean of the raw samples falling in it. Bins missing either
    channel are dropped, splitting the output into contiguous segments.
    """
    return [Segment(ts, m, a) for ts, (m, a) in resample([mains, appliance], period)]


def resample_mains(mains: PowerSeries, period: int = SAMPLE_PERIOD) -> list:
    return [Segment(ts, m) for ts, (m,) in resample([mains], period)]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"normalisation std must be > 0, got {self.std}")

    def normalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["mean"]), float(d["std"]))


def fit_normalize(values, stats: Optional[NormStats] = None) -> tuple:
    """Standardise ``values``; fit the statistics first unless ``stats`` is given."""
    values = np.asarray(values, dtype=np.float64)
    if stats is None:
        std = float(values.std())
        if not std > 0:
            raise DataError("cannot normalise a constant series (std == 0)")
        stats = NormStats(float(values.mean()), std)
    return stats.normalize(values), stats


def window_count(length: int, input_len: int = DEFAULT_INPUT_LEN, stride: int = 1) -> int:
    if input_len % 2 == 0:
        raise ConfigError("input_len must be odd")
    if length < input_len:
        return 0
    return (length - input_len) // stride + 1


def window_slices(length: int, input_len: int = DEFAULT_INPUT_LEN, stride: int = 1) -> tuple:
    """Number of windows in a segment and an iterator of ``(start, midpoint)``."""
    n = window_count(length, input_len, stride)
    half = (input_len - 1) // 2
    return n, ((s, s + half) for s in range(0, n * stride, stride))


@dataclass
class WindowSample:
    input: np.ndarray
    label: float
    origin: int
    label_time: int


class WindowSet:
    """Every sliding window over a set of resampled segments.

    Windows are materialised on demand from the stored segments; inputs are
    normalised mains, labels the normalised appliance value at the window
    midpoint.
    """

    def __init__(self, segments: list, mains_stats: NormStats, appliance_stats: Optional[NormStats],
                 input_len: int = DEFAULT_INPUT_LEN, stride: int = 1):
        self.segments = list(segments)
        self.mains_stats = mains_stats
        self.appliance_stats = appliance_stats
        self.input_len = input_len
        self.stride = stride
        lengths = [len(s) for s in self.segments]
        bases = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        self._timestamps = np.concatenate([s.timestamps for s in self.segments]) if self.segments else np.zeros(0, np.int64)
        self._mains = mains_stats.normalize(np.concatenate([s.mains for s in self.segments])) if self.segments else np.zeros(0)
        has_app = self.segments and all(s.appliance is not None for s in self.segments)
        self._app_watts = np.concatenate([s.appliance for s in self.segments]) if has_app else None
        starts = []
        for base, n in zip(bases, lengths):
            count, _ = window_slices(n, input_len, stride)
            starts.append(base + stride * np.arange(count, dtype=np.int64))
        self.starts = np.concatenate(starts) if starts else np.zeros(0, np.int64)
        self._half = (input_len - 1) // 2

    def __len__(self) -> int:
        return len(self.starts)

    def _mid(self, idx) -> np.ndarray:
        return self.starts[idx] + self._half

    def inputs(self, idx) -> np.ndarray:
        rows = self.starts[np.atleast_1d(idx)]
        return self._mains[rows[:, None] + np.arange(self.input_len)]

    def truth_watts(self, idx=None) -> np.ndarray:
        if self._app_watts is None:
            raise DataError("window set has no appliance channel")
        idx = np.arange(len(self)) if idx is None else idx
        return self._app_watts[self._mid(idx)]

    def labels(self, idx=None) -> np.ndarray:
        return self.appliance_stats.normalize(self.truth_watts(idx))

    def label_times(self, idx=None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else idx
        return self._timestamps[self._mid(idx)]

    def sample(self, i: int) -> WindowSample:
        label = float(self.labels([i])[0]) if self._app_watts is not None else float("nan")
        return WindowSample(self.inputs([i])[0], label, int(self._timestamps[self.starts[i]]),
                            int(self.label_times([i])[0]))

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, idx) -> "WindowSet":
        out = WindowSet.__new__(WindowSet)
        out.__dict__.update(self.__dict__)
        out.starts = self.starts[np.asarray(idx, dtype=np.int64)]
        return out


def fit_stats(segments: list) -> tuple:
    """Mains and appliance statistics over training segments."""
    _, mains = fit_normalize(np.concatenate([s.mains for s in segments]))
    _, app = fit_normalize(np.concatenate([s.appliance for s in segments]))
    return mains, app


# dataset manifest


@dataclass
class House:
    name: str
    role: str
    channels: dict = field(default_factory=dict)


@dataclass
class Manifest:
    houses: list
    thresholds: dict = field(default_factory=dict)

    def by_role(self, role: str) -> list:
        return [h for h in self.houses if h.role == role]


def load_manifest(path) -> Manifest:
    """Read a manifest mapping houses to channel CSVs.

    ``[house:<name>]`` sections hold ``role = train|test`` and one
    ``<channel> = <csv path>`` entry per channel (``mains`` required). An
    optional ``[thresholds]`` section gives on-thresholds in watts for
    appliances outside the built-in table.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    houses, thresholds = [], {}
    for section in parser.sections():
        if section == "thresholds":
            thresholds = {k: float(v) for k, v in parser[section].items()}
            continue
        if not section.startswith("house:"):
            raise ConfigError(f"{path}: unknown section [{section}]")
        body = dict(parser[section])
        role = body.pop("role", None)
        if role not in ("train", "test"):
            raise ConfigError(f"{path}: [{section}] role must be 'train' or 'test'")
        if "mains" not in body:
            raise ConfigError(f"{path}: [{section}] has no mains channel")
        channels = {k: (path.parent / v).resolve() for k, v in body.items()}
        houses.append(House(section.split(":", 1)[1], role, channels))
    return Manifest(houses, thresholds)


def write_manifest(path, manifest: Manifest) -> None:
    parser = configparser.ConfigParser()
    base = Path(path).parent.resolve()
    for house in manifest.houses:
        sec = f"house:{house.name}"
        parser[sec] = {"role": house.role}
        for ch, p in house.channels.items():
            p = Path(p).resolve()
            parser[sec][ch] = str(p.relative_to(base)) if p.is_relative_to(base) else str(p)
    if manifest.thresholds:
        parser["thresholds"] = {k: repr(float(v)) for k, v in manifest.thresholds.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def house_segments(house: House, appliance: str, period: int = SAMPLE_PERIOD) -> list:
    if appliance not in house.channels:
        raise DataError(f"house {house.name} has no channel {appliance!r}")
    mains = load_channel(house.channels["mains"], "mains")
    app = load_channel(house.channels[appliance], appliance)
    return align_resample(mains, app, period)


# window cache


def save_cache(path, segments: list, mains_stats: NormStats, appliance_stats: NormStats,
               input_len: int = DEFAULT_INPUT_LEN, meta: Optional[dict] = None) -> None:
    counts = [window_count(len(s), input_len) for s in segments]
    header = {
        "format_version": CACHE_VERSION,
        "input_len": input_len,
        "window_counts": counts,
        "total_windows": int(sum(counts)),
        "segment_lengths": [len(s) for s in segments],
        "mains_stats": mains_stats.to_dict(),
        "appliance_stats": appliance_stats.to_dict(),
        **(meta or {}),
    }
    arrays = {}
    for i, s in enumerate(segments):
        arrays[f"seg{i:05d}/timestamps"] = s.timestamps.astype("<i8")
        arrays[f"seg{i:05d}/mains"] = s.mains.astype("<f8")
        arrays[f"seg{i:05d}/appliance"] = s.appliance.astype("<f8")
    write_container(path, header, arrays)


@dataclass
class WindowCache:
    segments: list
    mains_stats: NormStats
    appliance_stats: NormStats
    input_len: int
    meta: dict

    def windows(self, stride: int = 1) -> WindowSet:
        return WindowSet(self.segments, self.mains_stats, self.appliance_stats, self.input_len, stride)


def load_cache(path) -> WindowCache:
    meta, arrays = read_container(path)
    if meta.get("format_version") != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {meta.get('format_version')}")
    segments = [
        Segment(arrays[f"seg{i:05d}/timestamps"], arrays[f"seg{i:05d}/mains"], arrays[f"seg{i:05d}/appliance"])
        for i in range(len(meta["segment_lengths"]))
    ]
    return WindowCache(segments, NormStats.from_dict(meta["mains_stats"]),
                       NormStats.from_dict(meta["appliance_stats"]), int(meta["input_len"]), meta)

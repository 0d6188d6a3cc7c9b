"""Traffic-count ingestion and the windowed dataset pipeline.

Raw per-movement counts are summed into fixed-width bins (15 minutes by
default), cut into rolling windows whose label is the next bin, split
chronologically and normalized.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySelectionError, NumericError, RowError, SchemaError, UsageError

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M"
RAW_COLUMNS = ("intersection_id", "timestamp", "direction", "vehicle_class", "volume")
WINDOW_LEN = 12
BIN_MINUTES = 15
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class RawRecord:
    intersection_id: str
    timestamp: datetime
    direction: str
    vehicle_class: str
    volume: float
    row: int = 0


@dataclass
class VolumeSeries:
    bin_start: list
    volume: np.ndarray
    gaps: list = field(default_factory=list)
    intersection_id: Optional[str] = None
    bin_minutes: int = BIN_MINUTES

    def __len__(self):
        return len(self.volume)


@dataclass(frozen=True)
class NormStats:
    center: float
    scale: float
    scheme: str = "zscore"
    fit_scope: str = "train_only"

    def __post_init__(self):
        if not self.scale > 0:
            raise NumericError(f"normalization scale must be positive, got {self.scale}")

    def to_dict(self) -> dict:
        return {
            "norm.center": repr(float(self.center)),
            "norm.scale": repr(float(self.scale)),
            "norm.scheme": self.scheme,
            "norm.fit_scope": self.fit_scope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["norm.center"]), float(d["norm.scale"]), d["norm.scheme"], d["norm.fit_scope"])


@dataclass
class WindowedDataset:
    series: np.ndarray          # (n,), in the current (possibly normalized) space
    windows: np.ndarray         # (N, window_len, features)
    labels: np.ndarray          # (N,)
    window_len: int = WINDOW_LEN
    sizes: Optional[tuple] = None   # (n_train, n_val, n_test)
    norm: Optional[NormStats] = None

    def __len__(self):
        return len(self.labels)

    def split_range(self, name: str) -> range:
        if self.sizes is None:
            raise UsageError("dataset has not been split")
        if name not in SPLIT_NAMES:
            raise UsageError(f"split must be one of {SPLIT_NAMES}, got {name!r}")
        n_train, n_val, n_test = self.sizes
        start = {"train": 0, "val": n_train, "test": n_train + n_val}[name]
        stop = start + {"train": n_train, "val": n_val, "test": n_test}[name]
        return range(start, stop)

    def arrays(self, name: Optional[str] = None):
        """Model-ready ``(x_seq, y)``: ``x_seq`` is ``(T, features, N)``, ``y`` is ``(1, N)``."""
        idx = slice(None)
        if name is not None:
            r = self.split_range(name)
            idx = slice(r.start, r.stop)
        w = self.windows[idx]
        return np.ascontiguousarray(w.transpose(1, 2, 0)), self.labels[idx].reshape(1, -1).copy()


# ---------------------------------------------------------------------------
# ingestion


def _open_text(source):
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        return open(source, newline="", encoding="utf-8")
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_raw(source, columns: Optional[dict] = None) -> list:
    """Parse a raw count CSV into ``RawRecord`` objects.

    ``source`` is a path, a file object, or CSV text. ``columns`` maps the
    canonical column names to the names used in the file.
    """
    colmap = {c: c for c in RAW_COLUMNS}
    if columns:
        unknown = set(columns) - set(RAW_COLUMNS)
        if unknown:
            raise UsageError(f"unknown canonical columns in remapping: {sorted(unknown)}")
        colmap.update(columns)
    fh = _open_text(source)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError("input file is empty (no header row)") from None
        header = [h.strip() for h in header]
        missing = [colmap[c] for c in RAW_COLUMNS if colmap[c] not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        pos = {c: header.index(colmap[c]) for c in RAW_COLUMNS}
        records = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
            ts_text = row[pos["timestamp"]].strip()
            try:
                ts = datetime.strptime(ts_text, TIMESTAMP_FORMAT)
            except ValueError:
                raise RowError(line, f"unparseable timestamp {ts_text!r} (expected YYYY-MM-DD HH:MM)") from None
            vol_text = row[pos["volume"]].strip()
            try:
                vol = float(vol_text)
            except ValueError:
                raise RowError(line, f"unparseable volume {vol_text!r}") from None
            if not math.isfinite(vol) or vol < 0:
                raise RowError(line, f"volume must be a finite non-negative number, got {vol_text!r}")
            records.append(RawRecord(
                intersection_id=row[pos["intersection_id"]].strip(),
                timestamp=ts,
                direction=row[pos["direction"]].strip(),
                vehicle_class=row[pos["vehicle_class"]].strip(),
                volume=vol,
                row=line,
            ))
        return records
    finally:
        if fh is not source:
            fh.close()


def _floor_bin(ts: datetime, minutes: int) -> datetime:
    base = ts.replace(second=0, microsecond=0)
    offset = (base.hour * 60 + base.minute) % minutes
    return base - timedelta(minutes=offset)


def aggregate(records: Sequence[RawRecord], bin_minutes: int = BIN_MINUTES, intersection: Optional[str] = None) -> VolumeSeries:
    """Total volume per bin over all directions and vehicle classes.

    Interior bins with no records are filled with 0 and listed in ``gaps``.
    """
    if bin_minutes < 1 or (24 * 60) % bin_minutes:
        raise UsageError(f"bin_minutes must divide a day, got {bin_minutes}")
    records = list(records)
    if not records:
        raise UsageError("no records to aggregate")
    if intersection is not None:
        records = [r for r in records if r.intersection_id == intersection]
        if not records:
            raise EmptySelectionError(f"no records matched intersection {intersection!r}")
    ids = sorted({r.intersection_id for r in records})
    if len(ids) > 1:
        raise UsageError(f"records span {len(ids)} intersections ({', '.join(ids[:5])}); pass an intersection filter")
    sums: dict = {}
    for r in records:
        sums.setdefault(_floor_bin(r.timestamp, bin_minutes), []).append(r.volume)
    first, last = min(sums), max(sums)
    step = timedelta(minutes=bin_minutes)
    n = int((last - first) / step) + 1
    starts = [first + k * step for k in range(n)]
    # fsum is exact, so totals do not depend on record order
    volume = np.array([math.fsum(sums.get(b, ())) for b in starts], dtype=np.float64)
    gaps = [b for b in starts if b not in sums]
    return VolumeSeries(starts, volume, gaps, ids[0], bin_minutes)


# ---------------------------------------------------------------------------
# dataset construction


def build_windows(series, window_len: int = WINDOW_LEN) -> WindowedDataset:
    values = np.asarray(series.volume if isinstance(series, VolumeSeries) else series, dtype=np.float64)
    if values.ndim != 1:
        raise UsageError(f"series must be one-dimensional, got shape {values.shape}")
    if window_len < 1:
        raise UsageError("window_len must be >= 1")
    if len(values) < window_len + 1:
        raise UsageError(f"series too short: need at least {window_len + 1} bins, got {len(values)}")
    n = len(values) - window_len
    windows = np.lib.stride_tricks.sliding_window_view(values, window_len)[:n].copy()
    return WindowedDataset(
        series=values.copy(),
        windows=windows.reshape(n, window_len, 1),
        labels=values[window_len:].copy(),
        window_len=window_len,
    )


def split(ds: WindowedDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> WindowedDataset:
    """Chronological, contiguous train/val/test split."""
    if len(fractions) != 3:
        raise UsageError("need exactly three split fractions")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"split fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    n = len(ds)
    n_train = int(math.floor(n * fractions[0] + 1e-9))
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = n - n_train - n_val
    sizes = (n_train, n_val, n_test)
    empty = [name for name, k in zip(SPLIT_NAMES, sizes) if k <= 0]
    if empty:
        raise UsageError(f"split {tuple(fractions)} of {n} samples leaves {', '.join(empty)} empty")
    return replace(ds, sizes=sizes)


def fit_values(ds: WindowedDataset, fit_scope: str) -> np.ndarray:
    """Series values that normalization statistics are computed from."""
    if fit_scope == "whole_dataset":
        return ds.series
    if fit_scope == "train_only":
        if ds.sizes is None:
            raise UsageError("train_only normalization needs a split dataset")
        # every value seen by a training window or label, nothing later
        return ds.series[: ds.sizes[0] + ds.window_len]
    raise UsageError(f"fit_scope must be 'train_only' or 'whole_dataset', got {fit_scope!r}")


def fit_norm(values: np.ndarray, scheme: str = "zscore", fit_scope: str = "train_only") -> NormStats:
    values = np.asarray(values, dtype=np.float64)
    if scheme == "zscore":
        center, scale = float(np.mean(values)), float(np.std(values))
    elif scheme == "minmax":
        center, scale = float(np.min(values)), float(np.max(values) - np.min(values))
    else:
        raise UsageError(f"scheme must be 'zscore' or 'minmax', got {scheme!r}")
    if not scale > 0 or not math.isfinite(scale):
        raise NumericError(f"cannot normalize: fit data gives scale {scale} (constant or non-finite data)")
    return NormStats(center, scale, scheme, fit_scope)


def apply_norm(values, stats: NormStats):
    return (np.asarray(values, dtype=np.float64) - stats.center) / stats.scale


def denormalize(values, stats: NormStats):
    return np.asarray(values, dtype=np.float64) * stats.scale + stats.center


def normalize(ds: WindowedDataset, scheme: str = "zscore", fit_scope: str = "train_only"):
    if ds.norm is not None:
        raise UsageError("dataset is already normalized")
    stats = fit_norm(fit_values(ds, fit_scope), scheme, fit_scope)
    out = replace(
        ds,
        series=apply_norm(ds.series, stats),
        windows=apply_norm(ds.windows, stats),
        labels=apply_norm(ds.labels, stats),
        norm=stats,
    )
    return out, stats


def prepare_dataset(series, window_len=WINDOW_LEN, fractions=(0.8, 0.1, 0.1), scheme="zscore", fit_scope="train_only") -> WindowedDataset:
    """build_windows -> split -> normalize."""
    ds = split(build_windows(series, window_len), fractions)
    ds, _ = normalize(ds, scheme, fit_scope)
    return ds


def synthetic_series(
    n_bins: int = 5000,
    period: int = 96,
    level: float = 100.0,
    amplitude: float = 50.0,
    phi: float = 0.8,
    noise_sigma: float = 5.0,
    seed: int = 0,
    start: datetime = datetime(2020, 1, 1),
) -> VolumeSeries:
    """Daily sinusoid plus AR(1) noise on a 15-minute grid."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_bins)
    eps = rng.normal(0.0, noise_sigma, size=n_bins)
    ar = np.zeros(n_bins)
    for k in range(1, n_bins):
        ar[k] = phi * ar[k - 1] + eps[k]
    volume = level + amplitude * np.sin(2.0 * np.pi * t / period) + ar
    step = timedelta(minutes=BIN_MINUTES)
    return VolumeSeries([start + k * step for k in range(n_bins)], volume, [], "synthetic")


# ---------------------------------------------------------------------------
# files


def write_series_csv(series: VolumeSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_start", "total_volume"])
        for b, v in zip(series.bin_start, series.volume):
            w.writerow([b.strftime(TIMESTAMP_FORMAT), repr(float(v))])


def read_series_csv(path) -> VolumeSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise UsageError(f"{path}: empty series file") from None
        for col in ("bin_start", "total_volume"):
            if col not in header:
                raise SchemaError(f"{path}: missing required column: {col}")
        ib, iv = header.index("bin_start"), header.index("total_volume")
        starts, vols = [], []
        for row in reader:
            if not row:
                continue
            try:
                starts.append(datetime.strptime(row[ib].strip(), TIMESTAMP_FORMAT))
                vols.append(float(row[iv]))
            except (ValueError, IndexError):
                raise RowError(reader.line_num, f"malformed series row {row!r}") from None
    return VolumeSeries(starts, np.array(vols, dtype=np.float64))


def write_gap_report(series: VolumeSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("gap_bin_start\n")
        for g in series.gaps:
            fh.write(g.strftime(TIMESTAMP_FORMAT) + "\n")


def write_manifest(path, entries: dict) -> None:
    """Plain ``key=value`` lines, sorted by key."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(entries):
            fh.write(f"{k}={entries[k]}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise RowError(n, f"manifest line is not key=value: {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def dataset_manifest(ds: WindowedDataset) -> dict:
    entries = {"window_len": str(ds.window_len), "n_samples": str(len(ds))}
    if ds.sizes is not None:
        entries.update({f"split.{k}": str(v) for k, v in zip(SPLIT_NAMES, ds.sizes)})
    if ds.norm is not None:
        entries.update(ds.norm.to_dict())
    return entries

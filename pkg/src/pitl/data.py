"""Time-indexed datasets: CSV I/O, [-1, 1] scaling, sequential splits, windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

TIME_COLUMN = "t_days"
TARGET_COLUMN = "S_O"


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"{message} at row {row}, column {column!r}")
        self.row = row
        self.column = column


class OrderError(DataError):
    pass


class StatsError(DataError):
    pass


@dataclass
class Dataset:
    name: str
    t: np.ndarray
    features: np.ndarray  # (N, F)
    feature_names: list[str]
    target: np.ndarray  # (N,)
    target_name: str = TARGET_COLUMN
    provenance: str = ""
    dropped_rows: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(len(self.t), len(self.feature_names))
        if feats.ndim != 2 or feats.shape[1] != len(self.feature_names):
            raise DataError(f"feature table of shape {feats.shape} does not match {len(self.feature_names)} names")
        self.features = feats
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if len(self.target) != len(self.t):
            raise DataError("target length differs from time column")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise OrderError(f"time column of {self.name!r} is not strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def rows(self, start: int, stop: int | None = None) -> Dataset:
        sl = slice(start, stop)
        return replace(self, t=self.t[sl].copy(), features=self.features[sl].copy(), target=self.target[sl].copy())

    def select(self, columns: Sequence[str]) -> Dataset:
        unknown = [c for c in columns if c not in self.feature_names]
        if unknown:
            raise KeyError(f"unknown columns {unknown}; available {self.feature_names}")
        idx = [self.feature_names.index(c) for c in columns]
        return replace(self, features=self.features[:, idx].copy(), feature_names=list(columns))

    def column(self, name: str) -> np.ndarray:
        if name == self.target_name:
            return self.target
        if name == TIME_COLUMN:
            return self.t
        return self.features[:, self.feature_names.index(name)]

    @property
    def columns(self) -> list[str]:
        return [*self.feature_names, self.target_name]

    def table(self) -> np.ndarray:
        """(N, F + 1) array of features then target."""
        return np.column_stack([self.features, self.target])


def write_csv(ds: Dataset, path) -> None:
    """``t_days``, features..., target; numbers at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIME_COLUMN, *ds.feature_names, ds.target_name])
        for k in range(len(ds)):
            row = [ds.t[k], *ds.features[k], ds.target[k]]
            w.writerow([format(float(v), ".17g") for v in row])


def ingest_csv(path, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a time column and a target column")
        rows, dropped = [], 0
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(raw)}", lineno, header[min(len(raw), len(header)) - 1])
            cells = [c.strip() for c in raw]
            if any(c == "" for c in cells):
                dropped += 1
                continue
            vals = []
            for col, c in zip(header, cells):
                try:
                    v = float(c)
                except ValueError:
                    raise ParseError(f"cannot parse {c!r} as a number", lineno, col) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {c!r}", lineno, col)
                vals.append(v)
            rows.append(vals)
    if dropped:
        logger.warning("%s: dropped %d row(s) with missing cells", path, dropped)
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    t = arr[:, 0]
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        bad = int(np.argmin(np.diff(t) > 0)) + 1
        raise OrderError(f"{path}: time column not strictly increasing at data row {bad + 1}")
    return Dataset(
        name=name or path.stem,
        t=t,
        features=arr[:, 1:-1],
        feature_names=header[1:-1],
        target=arr[:, -1],
        target_name=header[-1],
        provenance=f"ingested from {path.name}",
        dropped_rows=dropped,
    )


@dataclass
class NormStats:
    """Per-column min/max fitted on training rows; maps each column to [-1, 1]."""

    columns: list[str]
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        degenerate = [c for c, lo, hi in zip(self.columns, self.min, self.max) if not hi > lo]
        if degenerate:
            raise StatsError(f"degenerate columns (max == min): {degenerate}")

    def _idx(self, name: str) -> int:
        return self.columns.index(name)

    def scale_column(self, name: str, x):
        k = self._idx(name)
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.min[k]) / (self.max[k] - self.min[k]) - 1.0

    def unscale_column(self, name: str, x):
        k = self._idx(name)
        return (np.asarray(x, dtype=np.float64) + 1.0) * 0.5 * (self.max[k] - self.min[k]) + self.min[k]

    def span(self, name: str) -> float:
        k = self._idx(name)
        return float(self.max[k] - self.min[k])

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(list(d["columns"]), d["min"], d["max"])


def fit_stats(train: Dataset) -> NormStats:
    if len(train) == 0:
        raise StatsError("cannot fit normalization on zero rows")
    tab = train.table()
    return NormStats(train.columns, tab.min(axis=0), tab.max(axis=0))


def _check_columns(ds: Dataset, stats: NormStats) -> None:
    if ds.columns != stats.columns:
        raise StatsError(f"dataset columns {ds.columns} do not match stats columns {stats.columns}")


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    """x' = 2 (x - min) / (max - min) - 1 per column; values outside the
    training range map outside [-1, 1]."""
    _check_columns(ds, stats)
    span = stats.max - stats.min
    tab = 2.0 * (ds.table() - stats.min) / span - 1.0
    return replace(ds, features=tab[:, :-1], target=tab[:, -1])


def denormalize(ds: Dataset, stats: NormStats) -> Dataset:
    _check_columns(ds, stats)
    span = stats.max - stats.min
    tab = (ds.table() + 1.0) * 0.5 * span + stats.min
    return replace(ds, features=tab[:, :-1], target=tab[:, -1])


def split_sequential(ds: Dataset, train_ratio: float = 0.9, validation_len: int = 200) -> tuple[Dataset, Dataset, Dataset]:
    """Chronological train / test / validation blocks, never shuffled.

    The last ``validation_len`` rows form the validation block; the first
    ``floor(train_ratio * rest)`` of the remaining rows are training rows.
    """
    if not 0.0 < train_ratio <= 1.0:
        raise DataError(f"train_ratio must be in (0, 1], got {train_ratio}")
    if validation_len < 0:
        raise DataError("validation_len must be >= 0")
    rest = len(ds) - validation_len
    n_train = int(math.floor(train_ratio * rest + 1e-9))
    if rest < 1 or n_train < 1:
        raise DataError(f"{len(ds)} rows are not enough for validation_len={validation_len} and ratio={train_ratio}")
    return ds.rows(0, n_train), ds.rows(n_train, rest), ds.rows(rest, len(ds))


@dataclass
class WindowBatch:
    """Sliding windows (stride 1) of T consecutive rows within one split.

    ``x[k]`` holds rows k .. k+T-1 and ``y[k]`` the target of the last of them.
    """

    x: np.ndarray  # (N, T, F)
    y: np.ndarray  # (N,)
    t: np.ndarray  # (N, T) time stamps of every row in the window
    feature_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def target_t(self) -> np.ndarray:
        return self.t[:, -1]

    def __getitem__(self, sl) -> WindowBatch:
        if not isinstance(sl, slice):
            raise TypeError("WindowBatch supports slicing only (order must be preserved)")
        return WindowBatch(self.x[sl], self.y[sl], self.t[sl], self.feature_names)

    def tail(self, n: int) -> WindowBatch:
        return self[max(len(self) - n, 0):]


def n_windows(n_rows: int, T: int) -> int:
    return max(n_rows - T + 1, 0)


def make_windows(split: Dataset, T: int = 5) -> WindowBatch:
    if T < 1:
        raise DataError("window length T must be >= 1")
    n = len(split)
    if n < T:
        raise DataError(f"split {split.name!r} has {n} rows, fewer than the window length {T}")
    idx = np.arange(n - T + 1)[:, None] + np.arange(T)[None, :]
    return WindowBatch(split.features[idx], split.target[idx[:, -1]].copy(), split.t[idx], list(split.feature_names))


def derive_industrial(
    ds: Dataset,
    seed: int,
    noise_std_frac: float,
    keep_columns: Sequence[str],
    n_points: int,
    name: str | None = None,
) -> Dataset:
    """Truncate to ``n_points`` rows, keep ``keep_columns`` + target, add
    seeded Gaussian noise with per-column std = ``noise_std_frac`` x column std."""
    if n_points > len(ds):
        raise DataError(f"n_points={n_points} exceeds dataset length {len(ds)}")
    sub = ds.rows(0, n_points).select(keep_columns)
    if noise_std_frac:
        rng = np.random.default_rng(seed)
        tab = sub.table()
        tab = tab + rng.normal(size=tab.shape) * (noise_std_frac * tab.std(axis=0))
        sub = replace(sub, features=tab[:, :-1], target=tab[:, -1])
    return replace(sub, name=name or f"{ds.name}_industrial", provenance=f"{ds.provenance}; derived industrial seed={seed} noise={noise_std_frac}")

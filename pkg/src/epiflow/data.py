"""Case-count ingestion from delimited text files."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CHANNEL_COLUMNS = {"I": "new_infected", "R": "new_recovered", "D": "new_dead"}


class DataValidationError(ValueError):
    pass


@dataclass(frozen=True)
class DataSchema:
    """Column mapping of an input file.

    ``columns`` maps model channels (I, R, D) to column names; I is required,
    R and D are used when present. Channels listed in ``cumulative`` hold
    running totals and are differenced to daily increments.
    """

    date_column: str = "date"
    columns: dict = field(default_factory=lambda: dict(CHANNEL_COLUMNS))
    cumulative: tuple[str, ...] = ()
    delimiter: str = ","
    region: str | None = None
    population: float = 83e6

    @classmethod
    def from_dict(cls, d: dict | None) -> "DataSchema":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data schema keys: {sorted(unknown)}")
        if "cumulative" in d:
            d["cumulative"] = tuple(d["cumulative"] or ())
        if "population" in d:
            d["population"] = float(d["population"])
        return cls(**d)

    def __post_init__(self):
        if "I" not in self.columns:
            raise ValueError("schema must map the infected channel 'I'")
        bad = set(self.columns) - set(CHANNEL_COLUMNS)
        if bad:
            raise ValueError(f"unknown channels in schema: {sorted(bad)}")


@dataclass(frozen=True)
class CaseDataset:
    region: str
    start: dt.date
    counts: np.ndarray  # (T, C) daily increments
    channels: tuple[str, ...]
    population: float = 83e6

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def dates(self) -> list[str]:
        return [(self.start + dt.timedelta(days=t)).isoformat() for t in range(len(self))]

    def future_dates(self, horizon: int) -> list[str]:
        return [(self.start + dt.timedelta(days=t)).isoformat() for t in range(len(self) + horizon)]

    def select(self, channels) -> "CaseDataset":
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise DataValidationError(f"{self.region}: data lacks channels {missing}")
        idx = [self.channels.index(c) for c in channels]
        return replace(self, counts=self.counts[:, idx], channels=tuple(channels))

    def concat(self, other: "CaseDataset") -> "CaseDataset":
        if other.channels != self.channels:
            raise ValueError("channel layouts differ")
        if len(other) and other.start != self.start + dt.timedelta(days=len(self)):
            raise ValueError("datasets are not contiguous")
        return replace(self, counts=np.concatenate([self.counts, other.counts]))

    def equals(self, other: "CaseDataset") -> bool:
        return (self.region, self.start, self.channels, self.population) == (
            other.region, other.start, other.channels, other.population) and np.array_equal(
            self.counts, other.counts)


def _parse_count(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataValidationError(f"line {line}: {column} value {text!r} is not a number") from None
    if not np.isfinite(value) or value != int(value):
        raise DataValidationError(f"line {line}: {column} value {text!r} is not an integer count")
    return value


def load_cases(path, schema: DataSchema | dict | None = None) -> CaseDataset:
    """Read, validate and (where declared) difference a case-count file."""
    schema = schema if isinstance(schema, DataSchema) else DataSchema.from_dict(schema)
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader((ln for ln in fh if not ln.startswith("#")), delimiter=schema.delimiter))
    if not rows:
        raise DataValidationError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if schema.date_column not in header:
        raise DataValidationError(f"{path}: missing date column {schema.date_column!r}")
    channels = tuple(ch for ch in ("I", "R", "D") if ch in schema.columns and schema.columns[ch] in header)
    if "I" not in channels:
        raise DataValidationError(f"{path}: missing infected column {schema.columns['I']!r}")
    date_idx = header.index(schema.date_column)
    col_idx = [header.index(schema.columns[ch]) for ch in channels]

    records = []
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            day = dt.date.fromisoformat(row[date_idx].strip())
        except (ValueError, IndexError):
            raise DataValidationError(f"line {line}: unparseable date {row[date_idx:date_idx + 1]}") from None
        values = [_parse_count(row[j].strip(), line, header[j]) for j in col_idx]
        records.append((day, line, values))
    if not records:
        raise DataValidationError(f"{path}: no data rows")

    records.sort(key=lambda r: r[0])
    seen = set()
    for day, line, _ in records:
        if day in seen:
            raise DataValidationError(f"line {line}: duplicated date {day.isoformat()}")
        seen.add(day)
    first, last = records[0][0], records[-1][0]
    span = (last - first).days + 1
    if span != len(records):
        missing = sorted(set(first + dt.timedelta(days=k) for k in range(span)) - seen)
        listed = ", ".join(d.isoformat() for d in missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataValidationError(f"{path}: {len(missing)} missing day(s): {listed}")

    counts = np.array([r[2] for r in records], dtype=np.float64)
    lines = [r[1] for r in records]
    for j, ch in enumerate(channels):
        if ch in schema.cumulative:
            counts[1:, j] = np.diff(counts[:, j])
        neg = np.flatnonzero(counts[:, j] < 0)
        if neg.size:
            kind = "decreasing cumulative" if ch in schema.cumulative else "negative"
            raise DataValidationError(
                f"line {lines[neg[0]]}: {kind} count in column {schema.columns[ch]!r}")
    return CaseDataset(schema.region or path.stem, first, counts, channels, schema.population)


def write_cases(path, ds: CaseDataset, schema: DataSchema | None = None) -> None:
    schema = schema or DataSchema()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        w.writerow([schema.date_column] + [schema.columns[ch] for ch in ds.channels])
        for date, row in zip(ds.dates, ds.counts):
            w.writerow([date] + [int(v) for v in row])


def split_train_holdout(ds: CaseDataset, holdout_days: int) -> tuple[CaseDataset, CaseDataset]:
    """Chronological split: the last ``holdout_days`` days become the holdout."""
    if holdout_days < 0:
        raise ValueError("holdout_days must be >= 0")
    if holdout_days >= len(ds):
        raise ValueError(f"holdout of {holdout_days} days leaves no training data (length {len(ds)})")
    cut = len(ds) - holdout_days
    train = replace(ds, counts=ds.counts[:cut].copy())
    holdout = replace(ds, start=ds.start + dt.timedelta(days=cut), counts=ds.counts[cut:].copy())
    return train, holdout


def load_directory(path, schema: DataSchema | dict | None = None, pattern: str = "*.csv") -> list[CaseDataset]:
    """Every matching file in a directory, one dataset per region, sorted by file name."""
    files = sorted(Path(path).glob(pattern))
    if not files:
        raise DataValidationError(f"{path}: no files matching {pattern}")
    base = schema if isinstance(schema, DataSchema) else DataSchema.from_dict(schema)
    return [load_cases(f, replace(base, region=None)) for f in files]

"""Observational media-mix panels: validation, CSV/JSON I/O and summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import (
    DateGapError,
    DuplicateDateError,
    MissingColumnError,
    MissingValueError,
    NegativeValueError,
    PanelValidationError,
)

MIN_LENGTH = 10
DEFAULT_SCHEMA = {"date": "date", "y": "sales", "x1": "spend", "v1": "v1", "v2": "v2", "v3": "v3"}
CORE = ("y", "x1", "v1", "v2", "v3")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MmmPanel:
    """Date-indexed sales, search spend, optional other spend and query volumes."""

    dates: tuple
    y: np.ndarray
    x1: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    x2: Mapping = field(default_factory=dict)

    def __post_init__(self):
        dates = tuple(self.dates)
        object.__setattr__(self, "dates", dates)
        for name in CORE:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "x2", MappingProxyType({k: _frozen(v) for k, v in dict(self.x2).items()}))
        n = len(dates)
        if n < MIN_LENGTH:
            raise PanelValidationError(f"panel has {n} rows, need at least {MIN_LENGTH}")
        for name, s in self.series().items():
            if s.shape != (n,):
                raise PanelValidationError(f"series {name} has length {s.size}, expected {n}")
            bad = np.flatnonzero(~np.isfinite(s))
            if bad.size:
                raise MissingValueError(f"missing value in {name} at row {bad[0] + 1}")
            neg = np.flatnonzero(s < 0)
            if neg.size:
                raise NegativeValueError(f"negative value in {name} at row {neg[0] + 1}")
        steps = {(b - a).days for a, b in zip(dates, dates[1:])}
        if len(steps) > 1 or (steps and min(steps) <= 0):
            raise PanelValidationError("dates must be strictly increasing with a constant step")

    def __len__(self):
        return len(self.dates)

    @property
    def category_volume(self) -> np.ndarray:
        return self.v1 + self.v2 + self.v3

    def series(self) -> dict:
        out = {name: getattr(self, name) for name in CORE}
        out.update({f"x2:{k}": v for k, v in self.x2.items()})
        return out

    def as_data(self) -> dict:
        """Flat name -> array mapping for model fitting (x2 channels by bare name)."""
        out = {name: np.asarray(getattr(self, name)) for name in CORE}
        out["category"] = self.category_volume
        out.update({k: np.asarray(v) for k, v in self.x2.items()})
        return out

    def replace(self, **changes) -> "MmmPanel":
        kw = {"dates": self.dates, "x2": dict(self.x2)}
        kw.update({name: getattr(self, name) for name in CORE})
        kw.update(changes)
        return MmmPanel(**kw)

    def slice(self, mask) -> "MmmPanel":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return MmmPanel(
            dates=[self.dates[i] for i in idx],
            x2={k: v[idx] for k, v in self.x2.items()},
            **{name: getattr(self, name)[idx] for name in CORE},
        )


def _parse_date(text, row, column):
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise PanelValidationError(f"row {row}, column {column!r}: cannot parse date {text!r}") from None


def _parse_number(text, row, column):
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan", "null"):
        raise MissingValueError(f"row {row}, column {column!r}: missing value")
    try:
        value = float(text)
    except ValueError:
        raise PanelValidationError(f"row {row}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise MissingValueError(f"row {row}, column {column!r}: non-finite value")
    if value < 0:
        raise NegativeValueError(f"row {row}, column {column!r}: negative value {text}")
    return value


def load_panel(path, schema: Mapping | None = None, x2_columns=()) -> MmmPanel:
    """Read and validate a panel CSV.

    ``schema`` maps panel fields (date, y, x1, v1, v2, v3) to CSV column
    names. Rows are numbered from 1 after the header.
    """
    schema = {**DEFAULT_SCHEMA, **dict(schema or {})}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema[k] for k in ("date",) + CORE] + list(x2_columns)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {missing}")
        records = []
        for row_no, row in enumerate(reader, 1):
            d = _parse_date(row[schema["date"]], row_no, schema["date"])
            vals = {k: _parse_number(row[schema[k]], row_no, schema[k]) for k in CORE}
            x2 = {c: _parse_number(row[c], row_no, c) for c in x2_columns}
            records.append((d, row_no, vals, x2))
    return _assemble(records)


def _assemble(records) -> MmmPanel:
    records.sort(key=lambda r: r[0])
    for (d0, r0, _, _), (d1, r1, _, _) in zip(records, records[1:]):
        if d0 == d1:
            raise DuplicateDateError(f"date {d0.isoformat()} appears on rows {r0} and {r1}")
    if len(records) < MIN_LENGTH:
        raise PanelValidationError(f"panel has {len(records)} rows, need at least {MIN_LENGTH}")
    dates = [r[0] for r in records]
    gaps = [(b - a).days for a, b in zip(dates, dates[1:])]
    step = min(gaps)
    for a, g in zip(dates, gaps):
        if g != step:
            missing = a + timedelta(days=step)
            raise DateGapError(f"gap in dates: {missing.isoformat()} is missing")
    x2_names = list(records[0][3])
    return MmmPanel(
        dates=dates,
        x2={c: [r[3][c] for r in records] for c in x2_names},
        **{k: [r[2][k] for r in records] for k in CORE},
    )


def panel_rows(panel: MmmPanel, schema: Mapping | None = None):
    schema = {**DEFAULT_SCHEMA, **dict(schema or {})}
    header = [schema[k] for k in ("date",) + CORE] + list(panel.x2)
    rows = []
    for i, d in enumerate(panel.dates):
        row = [d.isoformat()] + [repr(float(getattr(panel, k)[i])) for k in CORE]
        row += [repr(float(v[i])) for v in panel.x2.values()]
        rows.append(row)
    return header, rows


def save_panel(panel: MmmPanel, path, schema: Mapping | None = None) -> None:
    header, rows = panel_rows(panel, schema)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def panel_to_csv(panel: MmmPanel, schema: Mapping | None = None) -> str:
    header, rows = panel_rows(panel, schema)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def panel_to_json(panel: MmmPanel) -> str:
    payload = {"dates": [d.isoformat() for d in panel.dates]}
    payload.update({k: getattr(panel, k).tolist() for k in CORE})
    payload["x2"] = {k: v.tolist() for k, v in panel.x2.items()}
    return json.dumps(payload)


def panel_from_json(text: str) -> MmmPanel:
    data = json.loads(text)
    return MmmPanel(dates=[date.fromisoformat(d) for d in data["dates"]],
                    x2=data.get("x2", {}), **{k: data[k] for k in CORE})


def aggregate_weekly(panel: MmmPanel) -> MmmPanel:
    """Sum a daily panel within ISO weeks, dropping incomplete weeks.

    Each week is dated by its Monday.
    """
    steps = {(b - a).days for a, b in zip(panel.dates, panel.dates[1:])}
    if steps != {1}:
        raise PanelValidationError("weekly aggregation needs a daily panel")
    keys = [d.isocalendar()[:2] for d in panel.dates]
    groups: dict = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    full = [(key, idx) for key, idx in groups.items() if len(idx) == 7]
    names = list(CORE)
    out = {k: [] for k in names}
    x2 = {k: [] for k in panel.x2}
    dates = []
    for key, idx in full:
        dates.append(date.fromisocalendar(key[0], key[1], 1))
        for k in names:
            out[k].append(float(np.sum(getattr(panel, k)[idx])))
        for k, v in panel.x2.items():
            x2[k].append(float(np.sum(v[idx])))
    return MmmPanel(dates=dates, x2=x2, **out)


@dataclass(frozen=True)
class PanelSummary:
    names: tuple
    median: dict
    mean: dict
    sd: dict
    corr: np.ndarray
    undefined_pairs: tuple
    rescaled: dict = field(repr=False, default_factory=dict)

    def corr_of(self, a, b) -> float:
        return float(self.corr[self.names.index(a), self.names.index(b)])

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "median": self.median,
            "mean": self.mean,
            "sd": self.sd,
            "corr": [[None if math.isnan(c) else float(c) for c in row] for row in self.corr],
            "undefined_pairs": [list(p) for p in self.undefined_pairs],
        }


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return math.nan
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def summarize(panel: MmmPanel) -> PanelSummary:
    """Per-series location/scale and pairwise Pearson correlations.

    Pairs involving a zero-variance series get NaN and are listed in
    ``undefined_pairs``; the diagonal is always 1.
    """
    series = {k: np.asarray(v) for k, v in panel.series().items()}
    names = tuple(series)
    m = len(names)
    corr = np.eye(m)
    undefined = []
    for i in range(m):
        for j in range(i + 1, m):
            c = pearson(series[names[i]], series[names[j]])
            corr[i, j] = corr[j, i] = c
            if math.isnan(c):
                undefined.append((names[i], names[j]))
    med = {k: float(np.median(v)) for k, v in series.items()}
    rescaled = {k: (v / med[k] if med[k] != 0 else np.full_like(v, math.nan)) for k, v in series.items()}
    return PanelSummary(
        names,
        med,
        {k: float(np.mean(v)) for k, v in series.items()},
        {k: float(np.std(v, ddof=1)) for k, v in series.items()},
        corr,
        tuple(undefined),
        rescaled,
    )

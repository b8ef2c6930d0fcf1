"""Segment search queries by the URL mix of their organic results and build
daily target / competitor / general-interest volume series."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterable, Mapping
from urllib.parse import urlsplit

import numpy as np

from .errors import AlignmentError

log = logging.getLogger(__name__)

TARGET, COMPETITOR, GENERAL, IRRELEVANT = "target", "competitor", "general", "irrelevant"
SEGMENTS = (TARGET, COMPETITOR, GENERAL)


@dataclass(frozen=True)
class QueryLogRecord:
    query: str
    url: str
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"negative count for ({self.query!r}, {self.url!r})")


@dataclass(frozen=True)
class Thresholds:
    category_min: float = 0.5
    target_min: float = 0.5
    competitor_min: float = 0.5

    def __post_init__(self):
        for name in ("category_min", "target_min", "competitor_min"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


def _host(url: str) -> str:
    url = url.strip()
    parts = urlsplit(url if "//" in url else "//" + url)
    return (parts.hostname or "").lower().rstrip(".")


@dataclass(frozen=True)
class UrlTaxonomy:
    """Advertiser (group a), competitor (b) and category (c) sites.

    With ``match="domain"`` a URL belongs to a group when its host equals a
    listed domain or is a subdomain of it; with ``match="prefix"`` the
    entries are URL prefixes.
    """

    advertiser_domains: frozenset
    competitor_domains: frozenset = frozenset()
    category_domains: frozenset = frozenset()
    match: str = "domain"

    def __post_init__(self):
        sets = []
        for name in ("advertiser_domains", "competitor_domains", "category_domains"):
            s = frozenset(d.strip().lower() for d in getattr(self, name))
            object.__setattr__(self, name, s)
            sets.append(s)
        a, b, c = sets
        overlap = (a & b) | (a & c) | (b & c)
        if overlap:
            raise ValueError(f"taxonomy groups overlap: {sorted(overlap)}")
        if self.match not in ("domain", "prefix"):
            raise ValueError(f"unknown match mode {self.match!r}")

    @classmethod
    def from_json(cls, text: str, match: str = "domain") -> "UrlTaxonomy":
        d = json.loads(text)
        return cls(frozenset(d.get("advertiser", d.get("advertiser_domains", []))),
                   frozenset(d.get("competitors", d.get("competitor_domains", []))),
                   frozenset(d.get("category", d.get("category_domains", []))),
                   d.get("match", match))

    def _hit(self, url: str, entries) -> bool:
        if self.match == "prefix":
            u = url.strip().lower()
            return any(u.startswith(e) for e in entries)
        host = _host(url)
        return any(host == d or host.endswith("." + d) for d in entries)

    def group(self, url: str) -> str:
        if self._hit(url, self.advertiser_domains):
            return "a"
        if self._hit(url, self.competitor_domains):
            return "b"
        if self._hit(url, self.category_domains):
            return "c"
        return "d"


@dataclass(frozen=True)
class QueryClassification:
    query: str
    w_a: float
    w_b: float
    w_c: float
    w_d: float
    relevant: bool
    segment: str

    @property
    def w_total(self) -> float:
        return self.w_a + self.w_b + self.w_c + self.w_d

    @property
    def w_category(self) -> float:
        return self.w_a + self.w_b + self.w_c


def aggregate_log(log_records: Iterable[QueryLogRecord]) -> list:
    """Sum counts of repeated (query, url) pairs."""
    totals: dict = defaultdict(int)
    for r in log_records:
        totals[(r.query, r.url)] += r.count
    return [QueryLogRecord(q, u, c) for (q, u), c in totals.items()]


def assign_segment(w_a, w_b, w_c, w_d, thresholds: Thresholds = Thresholds()) -> str:
    """Segment rule for a relevant query; comparisons are strict."""
    w_category = w_a + w_b + w_c
    w_total = w_category + w_d
    if w_total <= 0 or w_category / w_total < thresholds.category_min:
        return IRRELEVANT
    if w_a / w_category > thresholds.target_min:
        return TARGET
    if w_b / w_category > thresholds.competitor_min:
        return COMPETITOR
    return GENERAL


def classify_queries(log_records: Iterable[QueryLogRecord], taxonomy: UrlTaxonomy,
                     thresholds: Thresholds = Thresholds()) -> list:
    """Classify each query in the log; output is sorted by query."""
    weights: dict = defaultdict(lambda: {"a": 0.0, "b": 0.0, "c": 0.0, "d": 0.0})
    has_advertiser: dict = defaultdict(bool)
    for r in aggregate_log(log_records):
        g = taxonomy.group(r.url)
        weights[r.query][g] += r.count
        if g == "a":
            has_advertiser[r.query] = True
    out = []
    for q in sorted(weights):
        w = weights[q]
        relevant = has_advertiser[q]
        if relevant and sum(w.values()) == 0:
            log.warning("query %r has no impressions; classified irrelevant", q)
        segment = assign_segment(w["a"], w["b"], w["c"], w["d"], thresholds) if relevant else IRRELEVANT
        out.append(QueryClassification(q, w["a"], w["b"], w["c"], w["d"], relevant, segment))
    return out


@dataclass(frozen=True)
class VolumePanel:
    dates: tuple
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray

    @property
    def category(self) -> np.ndarray:
        return self.v1 + self.v2 + self.v3

    def to_csv(self) -> str:
        lines = ["date,v1,v2,v3"]
        for i, d in enumerate(self.dates):
            lines.append(f"{d.isoformat()},{float(self.v1[i])!r},{float(self.v2[i])!r},{float(self.v3[i])!r}")
        return "\n".join(lines) + "\n"


def build_volume_panel(daily_counts: Iterable, classes: Iterable[QueryClassification]) -> VolumePanel:
    """Sum per-day search counts of each segment's queries.

    ``daily_counts`` yields ``(date, query, count)``. Queries without a
    classification count as irrelevant. Dates must form a contiguous daily
    grid; (date, query) pairs absent from the table count as zero.
    """
    seg = {c.query: c.segment for c in classes}
    if not seg:
        log.warning("empty classification set; volume panel is all zero")
    per_day: dict = defaultdict(lambda: [0.0, 0.0, 0.0])
    for d, q, count in daily_counts:
        if isinstance(d, str):
            try:
                d = date.fromisoformat(d)
            except ValueError:
                raise AlignmentError(f"unparseable date {d!r}") from None
        slot = per_day[d]
        s = seg.get(q, IRRELEVANT)
        if s in SEGMENTS:
            slot[SEGMENTS.index(s)] += float(count)
    dates = sorted(per_day)
    for a, b in zip(dates, dates[1:]):
        if b - a != timedelta(days=1):
            raise AlignmentError(f"daily counts skip from {a.isoformat()} to {b.isoformat()}")
    v = np.array([per_day[d] for d in dates], dtype=float).reshape(-1, 3)
    return VolumePanel(tuple(dates), v[:, 0].copy(), v[:, 1].copy(), v[:, 2].copy())


@dataclass(frozen=True)
class ScatterPoint:
    query: str
    share_advertiser: float
    share_category: float
    segment: str


def emit_classification_scatter(classes: Iterable[QueryClassification]):
    """Points (w_a / w_category, w_category / w_total) per relevant query.

    Returns ``(points, n_omitted)``; queries with no category impressions
    have no defined x coordinate and are only counted.
    """
    points, omitted = [], 0
    for c in classes:
        if not c.relevant:
            continue
        if c.w_category <= 0:
            omitted += 1
            continue
        points.append(ScatterPoint(c.query, c.w_a / c.w_category, c.w_category / c.w_total, c.segment))
    return points, omitted


# file formats

def read_query_log(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"query", "url", "count"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for i, row in enumerate(reader, 1):
            try:
                count = int(row["count"])
            except ValueError:
                raise ValueError(f"{path}: row {i}: count is not an integer: {row['count']!r}") from None
            if count < 0:
                raise ValueError(f"{path}: row {i}: negative count")
            out.append(QueryLogRecord(row["query"], row["url"], count))
    return out


def read_daily_counts(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"date", "query", "count"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for i, row in enumerate(reader, 1):
            try:
                d = date.fromisoformat(row["date"].strip())
                count = float(row["count"])
            except ValueError:
                raise ValueError(f"{path}: row {i}: bad date or count") from None
            if count < 0:
                raise ValueError(f"{path}: row {i}: negative count")
            out.append((d, row["query"], count))
    return out


def classification_csv(classes) -> str:
    lines = ["query,w_a,w_b,w_c,w_d,w_total,w_category,segment"]
    for c in classes:
        q = '"' + c.query.replace('"', '""') + '"' if ("," in c.query or '"' in c.query) else c.query
        lines.append(f"{q},{c.w_a:g},{c.w_b:g},{c.w_c:g},{c.w_d:g},{c.w_total:g},{c.w_category:g},{c.segment}")
    return "\n".join(lines) + "\n"


def scatter_csv(points) -> str:
    lines = ["query,share_advertiser,share_category,segment"]
    for p in points:
        q = '"' + p.query.replace('"', '""') + '"' if ("," in p.query or '"' in p.query) else p.query
        lines.append(f"{q},{float(p.share_advertiser)!r},{float(p.share_category)!r},{p.segment}")
    return "\n".join(lines) + "\n"

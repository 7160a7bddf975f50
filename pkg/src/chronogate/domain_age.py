"""
Registration-age oracle.

Ages come from newly-registered-domain (NRD) feed exports first.  When a
domain is absent from the feed, an SOA serial written in the RFC 1912
``YYYYMMDDnn`` convention can stand in as a coarse, date-only estimate.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from types import MappingProxyType
from typing import Iterable, Mapping, Optional, TextIO

from .dns_wire import SoaRdata

log = logging.getLogger(__name__)

UTC = dt.timezone.utc
FEED_HEADER = ("domain", "registered_at")
SERIAL_MIN_YEAR = 1983
SERIAL_MAX_YEAR = 2100
_LDH = frozenset("abcdefghijklmnopqrstuvwxyz0123456789-_")


class EmptyFeed(ValueError):
    """A feed produced no well-formed rows."""

    def __init__(self, message: str, stats: "IngestStats") -> None:
        super().__init__(message)
        self.stats = stats


class FeedRowError(ValueError):
    pass


class AgeSource(str, Enum):
    FEED = "Feed"
    SOA_HEURISTIC = "SoaHeuristic"


def parse_timestamp(text: str) -> dt.datetime:
    """Parse an ISO 8601 timestamp with an explicit UTC offset (``Z`` allowed).

    The result is converted to UTC and truncated to whole seconds.
    """
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        value = dt.datetime.fromisoformat(text)
    except ValueError as exc:
        raise FeedRowError(f"bad timestamp {text!r}") from exc
    if value.tzinfo is None:
        raise FeedRowError(f"timestamp {text!r} has no UTC offset")
    return value.astimezone(UTC).replace(microsecond=0)


def format_timestamp(value: dt.datetime) -> str:
    return value.astimezone(UTC).strftime("%Y-%m-%dT%H:%M:%SZ")


def canonical_domain(text: str) -> str:
    """Lowercase, strip the root dot, and check label syntax and length limits."""
    name = text.strip().lower().rstrip(".")
    labels = name.split(".")
    if not name or any(not l or len(l) > 63 for l in labels):
        raise FeedRowError(f"bad domain {text!r}")
    if len(name) > 253 or any(set(l) - _LDH for l in labels):
        raise FeedRowError(f"bad domain {text!r}")
    return name


# -- public suffix matching ------------------------------------------------------


class PublicSuffixList:
    def __init__(self, rules: Iterable[str]) -> None:
        self.exact: set[str] = set()
        self.wildcard: set[str] = set()
        self.exception: set[str] = set()
        for raw in rules:
            rule = raw.strip().lower()
            if not rule or rule.startswith("//"):
                continue
            if rule.startswith("!"):
                self.exception.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcard.add(rule[2:])
            else:
                self.exact.add(rule)

    def suffix_length(self, labels: list[str]) -> int:
        """Number of trailing labels forming the public suffix."""
        for i in range(len(labels)):
            candidate = ".".join(labels[i:])
            if candidate in self.exception:
                return len(labels) - i - 1
            if candidate in self.exact:
                return len(labels) - i
            if i + 1 < len(labels) and ".".join(labels[i + 1:]) in self.wildcard:
                return len(labels) - i
        return 1

    def registrable_domain(self, domain: str) -> Optional[str]:
        labels = domain.split(".")
        n = self.suffix_length(labels)
        if len(labels) <= n:
            return None
        return ".".join(labels[-(n + 1):])


@lru_cache(maxsize=1)
def default_suffix_list() -> PublicSuffixList:
    text = resources.files("chronogate").joinpath("data/public_suffix.txt").read_text("utf-8")
    return PublicSuffixList(text.splitlines())


def registrable_domain(domain: str) -> Optional[str]:
    return default_suffix_list().registrable_domain(domain)


# -- feed ingestion ------------------------------------------------------------


@dataclass(frozen=True)
class FeedRecord:
    domain: str
    registered_at: dt.datetime


@dataclass
class IngestStats:
    accepted: int = 0
    rejected: int = 0
    future: int = 0
    duplicates: int = 0
    comments: int = 0
    header_seen: bool = False

    def as_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "future": self.future,
            "duplicates": self.duplicates,
            "comments": self.comments,
            "header_seen": self.header_seen,
        }


@dataclass(frozen=True, eq=False)
class AgeIndex:
    """Immutable mapping of canonical domain to its earliest registration time.

    Equality compares the mapping only; ``stats`` describes the ingest that
    produced this index.
    """

    entries: Mapping[str, dt.datetime] = field(default_factory=dict)
    stats: IngestStats = field(default_factory=IngestStats)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    @classmethod
    def from_records(cls, records: Iterable[FeedRecord]) -> "AgeIndex":
        entries: dict[str, dt.datetime] = {}
        for rec in records:
            _keep_earliest(entries, rec.domain, rec.registered_at)
        return cls(entries)

    def get(self, domain: str) -> Optional[dt.datetime]:
        return self.entries.get(domain)

    def merged(self, other: "AgeIndex") -> "AgeIndex":
        entries = dict(self.entries)
        for domain, when in other.entries.items():
            _keep_earliest(entries, domain, when)
        return AgeIndex(entries, other.stats)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, domain: object) -> bool:
        return domain in self.entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AgeIndex):
            return NotImplemented
        return dict(self.entries) == dict(other.entries)


def _keep_earliest(entries: dict, domain: str, when: dt.datetime) -> bool:
    """Insert with earliest-wins; True if the domain was already present."""
    current = entries.get(domain)
    if current is None:
        entries[domain] = when
        return False
    if when < current:
        entries[domain] = when
    return True


def parse_feed_row(row: list[str]) -> FeedRecord:
    if len(row) != 2:
        raise FeedRowError(f"expected 2 fields, got {len(row)}")
    domain = canonical_domain(row[0])
    if "." not in domain:
        raise FeedRowError(f"{domain!r} has no dot")
    return FeedRecord(domain, parse_timestamp(row[1]))


def ingest_feed_csv(stream: TextIO, now: dt.datetime, base: Optional[AgeIndex] = None) -> AgeIndex:
    """Read an NRD CSV export into an index, merged over ``base`` if given.

    Malformed and future-dated rows are counted and skipped.  Raises
    EmptyFeed when no row is usable, since that points at a broken pipeline
    rather than a quiet day.
    """
    entries: dict[str, dt.datetime] = dict(base.entries) if base is not None else {}
    stats = IngestStats()
    first = True
    for row in csv.reader(line for line in stream if line.strip()):
        if row and row[0].lstrip().startswith("#"):
            stats.comments += 1
            continue
        if first:
            first = False
            if tuple(c.strip().lower() for c in row) == FEED_HEADER:
                stats.header_seen = True
                continue
        try:
            rec = parse_feed_row(row)
        except FeedRowError as exc:
            log.debug("skipping feed row %r: %s", row, exc)
            stats.rejected += 1
            continue
        if rec.registered_at > now:
            stats.rejected += 1
            stats.future += 1
            continue
        stats.accepted += 1
        if _keep_earliest(entries, rec.domain, rec.registered_at):
            stats.duplicates += 1
    if stats.future:
        log.warning("rejected %d future-dated feed rows", stats.future)
    if stats.accepted == 0:
        raise EmptyFeed("feed contains no well-formed rows", stats)
    return AgeIndex(entries, stats)


def load_feed(path, now: dt.datetime, base: Optional[AgeIndex] = None) -> AgeIndex:
    with open(path, encoding="utf-8", newline="") as fh:
        return ingest_feed_csv(fh, now, base)


# -- SOA serial heuristic ------------------------------------------------------------


def parse_rfc1912_serial(serial: int) -> Optional[tuple[dt.date, int]]:
    """Split a ``YYYYMMDDnn`` serial into (date, revision), or None."""
    if not 1_000_000_000 <= serial <= 0xFFFFFFFF:
        return None
    revision = serial % 100
    day = (serial // 100) % 100
    month = (serial // 10_000) % 100
    year = serial // 1_000_000
    if not SERIAL_MIN_YEAR <= year <= SERIAL_MAX_YEAR:
        return None
    try:
        return dt.date(year, month, day), revision
    except ValueError:
        return None


_NEGATIVE = "negative"
_PENDING = "pending"


class SoaCache:
    """Dates learned from SOA serials, plus negative and in-flight markers.

    Reads are lock-free dict lookups; all writes go through one lock.
    """

    def __init__(self) -> None:
        self._dates: dict[str, dt.date] = {}
        self._markers: dict[str, tuple[str, Optional[dt.datetime]]] = {}
        self._lock = threading.Lock()

    def get_date(self, domain: str) -> Optional[dt.date]:
        return self._dates.get(domain)

    def put_date(self, domain: str, day: dt.date) -> None:
        with self._lock:
            self._dates[domain] = day
            self._markers.pop(domain, None)

    def put_negative(self, domain: str, until: dt.datetime) -> None:
        with self._lock:
            self._markers[domain] = (_NEGATIVE, until)

    def has_entry(self, domain: str, now: dt.datetime) -> bool:
        if domain in self._dates:
            return True
        marker = self._markers.get(domain)
        if marker is None:
            return False
        kind, until = marker
        return kind == _PENDING or (until is not None and now < until)

    def claim_probe(self, domain: str, now: dt.datetime) -> bool:
        """Atomically mark a probe in flight; False if one is not needed."""
        with self._lock:
            if self.has_entry(domain, now):
                return False
            self._markers[domain] = (_PENDING, None)
            return True

    def __len__(self) -> int:
        return len(self._dates)


@dataclass(frozen=True)
class AgeVerdict:
    age: Optional[dt.timedelta] = None
    since: Optional[dt.datetime] = None
    source: Optional[AgeSource] = None

    @property
    def known(self) -> bool:
        return self.age is not None

    @classmethod
    def unknown(cls) -> "AgeVerdict":
        return cls()

    @classmethod
    def at(cls, since: dt.datetime, now: dt.datetime, source: AgeSource) -> "AgeVerdict":
        age = now - since
        if age < dt.timedelta(0):
            log.info("clamping negative age for registration at %s (now %s)", since, now)
            age = dt.timedelta(0)
        return cls(age, since, source)

    def as_dict(self) -> dict:
        if not self.known:
            return {"kind": "Unknown"}
        return {
            "kind": "Known",
            "age_hours": self.age.total_seconds() / 3600,
            "since": format_timestamp(self.since),
            "source": self.source.value,
        }


def _midnight(day: dt.date) -> dt.datetime:
    return dt.datetime(day.year, day.month, day.day, tzinfo=UTC)


def lookup_age(
    domain: str,
    now: dt.datetime,
    index: AgeIndex,
    soa_cache: Optional[SoaCache] = None,
) -> AgeVerdict:
    """Exact feed hit, then registrable-domain feed hit, then SOA cache."""
    apex = registrable_domain(domain)
    for key in (domain, apex):
        if key is not None:
            since = index.get(key)
            if since is not None:
                return AgeVerdict.at(since, now, AgeSource.FEED)
    if soa_cache is not None:
        for key in (domain, apex):
            if key is not None:
                day = soa_cache.get_date(key)
                if day is not None:
                    return AgeVerdict.at(_midnight(day), now, AgeSource.SOA_HEURISTIC)
    return AgeVerdict.unknown()


def apply_soa_heuristic(
    soa: SoaRdata, domain: str, now: dt.datetime, soa_cache: SoaCache
) -> Optional[AgeVerdict]:
    parsed = parse_rfc1912_serial(soa.serial)
    if parsed is None:
        return None
    day, _revision = parsed
    soa_cache.put_date(domain, day)
    return AgeVerdict.at(_midnight(day), now, AgeSource.SOA_HEURISTIC)

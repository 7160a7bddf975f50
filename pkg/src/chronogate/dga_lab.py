"""
Rendezvous-level model of a DGA-driven ransomware command channel.

Each simulated day the command server registers ``registered`` names out of
the day's generated list, ``lead_time`` before the agent starts querying.
The agent tries ``queries`` names from the same list, in random order,
without replacement.  A query connects only if the name is registered and
the defense (the real ``policy.evaluate`` over a real ``AgeIndex``) lets it
resolve.  Payment and key exchange collapse into the single rendezvous event.

Randomness is counter-based: every trial's choices come from splitmix64
keys derived from ``(seed, day, stream, slot)``.  A trial therefore gives the
same outcome whether it runs alone or inside a vectorized batch.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import itertools
import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, TextIO

import numpy as np

from .config import ConfigError, as_bool, as_float, as_int
from .domain_age import UTC, AgeIndex, FeedRecord, lookup_age
from .policy import Action, PolicyConfig, evaluate

DEFAULT_START = dt.date(2017, 8, 24)
QUERY_HOUR = 12
BRUTE_FORCE_LIMIT = 10**7
_BATCH_CELLS = 1 << 21

_ONES = (
    "", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
    "eighteen", "nineteen",
)
_TENS = ("", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety")


class TooLarge(ValueError):
    pass


class DgaKind(str, Enum):
    TOY_DATE = "toy-date"
    SEEDED_HASH = "seeded-hash"


def number_words(n: int) -> str:
    if not 1 <= n <= 99:
        raise ValueError(f"{n} outside 1..99")
    if n < 20:
        return _ONES[n]
    return _TENS[n // 10] + _ONES[n % 10]


def year_words(year: int) -> str:
    """2012 -> 'twentytwelve'; 2005 -> 'twentyohfive'; 2000 -> 'twothousand'."""
    if not 2000 <= year <= 2099:
        raise ValueError(f"toy DGA covers years 2000-2099, got {year}")
    yy = year - 2000
    if yy == 0:
        return "twothousand"
    if yy < 10:
        return "twentyoh" + _ONES[yy]
    return "twenty" + number_words(yy)


def date_words(day: dt.date) -> str:
    return number_words(day.month) + number_words(day.day) + year_words(day.year)


@dataclass(frozen=True)
class DgaSpec:
    kind: DgaKind = DgaKind.SEEDED_HASH
    domains_per_day: int = 250
    tld: str = "test"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DgaKind(self.kind))
        if self.domains_per_day < 1:
            raise ConfigError("domains_per_day must be positive")


def _hash_label(seed: int, day: dt.date, counter: int) -> str:
    digest = hashlib.blake2b(
        f"{seed}|{day.isoformat()}|{counter}".encode(), digest_size=12, person=b"chronogate-dga"
    ).digest()
    return "".join(chr(ord("a") + b % 26) for b in digest)


@lru_cache(maxsize=64)
def _generate_cached(spec: DgaSpec, day: dt.date) -> tuple[str, ...]:
    if spec.kind is DgaKind.TOY_DATE:
        stem = date_words(day)
        return tuple(f"{stem}{k}.{spec.tld}" for k in range(1, spec.domains_per_day + 1))
    names: list[str] = []
    seen: set[str] = set()
    counter = 0
    while len(names) < spec.domains_per_day:
        name = f"{_hash_label(spec.seed, day, counter)}.{spec.tld}"
        counter += 1
        if name not in seen:
            seen.add(name)
            names.append(name)
    return tuple(names)


def generate_domains(spec: DgaSpec, day: dt.date) -> list[str]:
    """The day's candidate rendezvous names, in generation order.

    ``toy-date`` spells the date out (month, day, year) and appends 1..D.
    ``seeded-hash`` maps blake2b(seed|date|counter) to 12 letters, skipping
    the rare repeat so the list always holds D distinct names.
    """
    return list(_generate_cached(spec, day))


@dataclass(frozen=True)
class DgaScenario:
    dga: DgaSpec
    registered: int
    queries: int
    lead_time: dt.timedelta = dt.timedelta(hours=3)
    defense: Optional[PolicyConfig] = None
    horizon_days: int = 1
    rng_seed: int = 0
    start_date: dt.date = DEFAULT_START

    def __post_init__(self) -> None:
        d = self.dga.domains_per_day
        if not 0 <= self.registered <= d:
            raise ConfigError(f"registered must be in 0..{d}")
        if not 0 <= self.queries <= d:
            raise ConfigError(f"queries must be in 0..{d}")
        if self.horizon_days < 1:
            raise ConfigError("horizon_days must be at least 1")

    def query_time(self, day_index: int) -> dt.datetime:
        day = self.start_date + dt.timedelta(days=day_index)
        return dt.datetime(day.year, day.month, day.day, QUERY_HOUR, tzinfo=UTC)


@dataclass(frozen=True)
class SimOutcome:
    success: bool
    rendezvous_day: Optional[int]
    queries_issued: int
    blocked_queries: int
    nx_queries: int
    alerted_queries: int = 0


@dataclass(frozen=True)
class TrialAggregate:
    trials: int
    successes: int
    success_rate: float
    mean_queries_to_success: Optional[float]

    @property
    def exact_rate(self) -> Fraction:
        return Fraction(self.successes, self.trials)


# -- counter-based randomness ------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM_REGISTER = 1
_STREAM_QUERY = 2


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _slot_keys(seeds: np.ndarray, day: int, stream: int, width: int) -> np.ndarray:
    """splitmix64 outputs: row i is the stream seeded by (seeds[i], day, stream)."""
    with np.errstate(over="ignore"):
        h = _mix(seeds + _GOLDEN)
        h = _mix(h ^ np.uint64((day << 2) | stream))
        steps = (np.arange(1, width + 1, dtype=np.uint64) * _GOLDEN)[None, :]
        return _mix(h[:, None] + steps)


def _smallest(keys: np.ndarray, k: int, ordered: bool) -> np.ndarray:
    """Column indices of the k smallest keys per row (ties broken by index)."""
    if k == 0:
        return np.empty((keys.shape[0], 0), dtype=np.int64)
    if k < keys.shape[1] and not ordered:
        return np.argpartition(keys, k - 1, axis=1)[:, :k]
    if k < keys.shape[1]:
        part = np.argpartition(keys, k - 1, axis=1)[:, :k]
        sub = np.take_along_axis(keys, part, axis=1)
        order = np.lexsort((part, sub), axis=1)
        return np.take_along_axis(part, order, axis=1)
    return np.argsort(keys, axis=1, kind="stable")


# -- defense per day --------------------------------------------------------------


@dataclass(frozen=True)
class _DayPlan:
    live: bool
    resolvable: np.ndarray  # name resolves if registered
    blocked: np.ndarray  # name is refused if registered
    alerted: np.ndarray


def _day_plan(sc: DgaScenario, day_index: int) -> _DayPlan:
    n = sc.dga.domains_per_day
    live = sc.lead_time >= dt.timedelta(0)
    if not live:
        none = np.zeros(n, dtype=bool)
        return _DayPlan(False, none, none, none)
    if sc.defense is None:
        return _DayPlan(True, np.ones(n, dtype=bool), np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))
    names = generate_domains(sc.dga, sc.start_date + dt.timedelta(days=day_index))
    now = sc.query_time(day_index)
    registered_at = now - sc.lead_time
    # Every candidate goes into the index; each is its own registrable
    # domain, so a name's verdict does not depend on which others are live.
    index = AgeIndex.from_records(FeedRecord(name, registered_at) for name in names)
    actions = [evaluate(name, lookup_age(name, now, index), sc.defense).action for name in names]
    blocked = np.array([a is Action.BLOCK for a in actions], dtype=bool)
    alerted = np.array([a is Action.ALERT_ONLY for a in actions], dtype=bool)
    return _DayPlan(True, ~blocked, blocked, alerted)


# -- engine ------------------------------------------------------------------------


@dataclass
class _Batch:
    success: np.ndarray
    rendezvous_day: np.ndarray  # 0 when no rendezvous
    queries: np.ndarray
    blocked: np.ndarray
    nx: np.ndarray
    alerted: np.ndarray


def _simulate(sc: DgaScenario, seeds: np.ndarray) -> _Batch:
    n = seeds.shape[0]
    width = sc.dga.domains_per_day
    out = _Batch(
        success=np.zeros(n, dtype=bool),
        rendezvous_day=np.zeros(n, dtype=np.int64),
        queries=np.zeros(n, dtype=np.int64),
        blocked=np.zeros(n, dtype=np.int64),
        nx=np.zeros(n, dtype=np.int64),
        alerted=np.zeros(n, dtype=np.int64),
    )
    chunk = max(1, _BATCH_CELLS // width)
    q = sc.queries
    for day in range(sc.horizon_days):
        active = np.flatnonzero(~out.success)
        if active.size == 0 or q == 0:
            break
        plan = _day_plan(sc, day)
        for start in range(0, active.size, chunk):
            rows = active[start:start + chunk]
            s = seeds[rows]
            registered = np.zeros((rows.size, width), dtype=bool)
            if plan.live and sc.registered:
                picks = _smallest(_slot_keys(s, day, _STREAM_REGISTER, width), sc.registered, ordered=False)
                np.put_along_axis(registered, picks, True, axis=1)
            tried = _smallest(_slot_keys(s, day, _STREAM_QUERY, width), q, ordered=True)
            hit_reg = np.take_along_axis(registered, tried, axis=1)
            connects = hit_reg & plan.resolvable[tried]
            won = connects.any(axis=1)
            first = np.where(won, connects.argmax(axis=1), q - 1)
            issued = first + 1
            within = np.arange(q)[None, :] < issued[:, None]
            reg_issued = hit_reg & within
            out.queries[rows] += issued
            out.blocked[rows] += (reg_issued & plan.blocked[tried]).sum(axis=1)
            out.alerted[rows] += (reg_issued & plan.alerted[tried]).sum(axis=1)
            out.nx[rows] += issued - reg_issued.sum(axis=1)
            out.success[rows] = won
            out.rendezvous_day[rows] = np.where(won, day + 1, 0)
    return out


def _seed_array(first: int, n: int) -> np.ndarray:
    base = np.uint64(first % 2**64)
    with np.errstate(over="ignore"):
        return base + np.arange(n, dtype=np.uint64)


def _outcome(batch: _Batch, i: int) -> SimOutcome:
    won = bool(batch.success[i])
    return SimOutcome(
        success=won,
        rendezvous_day=int(batch.rendezvous_day[i]) if won else None,
        queries_issued=int(batch.queries[i]),
        blocked_queries=int(batch.blocked[i]),
        nx_queries=int(batch.nx[i]),
        alerted_queries=int(batch.alerted[i]),
    )


def run_scenario(sc: DgaScenario) -> SimOutcome:
    return _outcome(_simulate(sc, _seed_array(sc.rng_seed, 1)), 0)


def simulate_trials(sc: DgaScenario, n: int) -> list[SimOutcome]:
    """Per-trial outcomes for seeds rng_seed, rng_seed + 1, ..."""
    if n < 1:
        raise ValueError("need at least one trial")
    batch = _simulate(sc, _seed_array(sc.rng_seed, n))
    return [_outcome(batch, i) for i in range(n)]


def run_trials(sc: DgaScenario, n: int) -> TrialAggregate:
    if n < 1:
        raise ValueError("need at least one trial")
    batch = _simulate(sc, _seed_array(sc.rng_seed, n))
    successes = int(batch.success.sum())
    mean_q = float(batch.queries[batch.success].mean()) if successes else None
    return TrialAggregate(n, successes, successes / n, mean_q)


def aggregate(outcomes: Sequence[SimOutcome]) -> TrialAggregate:
    wins = [o for o in outcomes if o.success]
    mean_q = sum(o.queries_issued for o in wins) / len(wins) if wins else None
    return TrialAggregate(len(outcomes), len(wins), len(wins) / len(outcomes), mean_q)


# -- exact oracle ------------------------------------------------------------------


def hypergeometric_success_probability(domains: int, registered: int, queries: int) -> Fraction:
    """P(at least one of q uniformly chosen names is among r registered)."""
    return 1 - Fraction(math.comb(domains - registered, queries), math.comb(domains, queries))


def brute_force_success_probability(sc: DgaScenario) -> Fraction:
    """Exact one-day rendezvous probability by enumerating every
    (registration set, query set) pair."""
    d, r, q = sc.dga.domains_per_day, sc.registered, sc.queries
    pairs = math.comb(d, r) * math.comb(d, q)
    if pairs > BRUTE_FORCE_LIMIT:
        raise TooLarge(f"{pairs} pairs exceeds the {BRUTE_FORCE_LIMIT} enumeration guard")
    if sc.horizon_days != 1:
        raise ValueError("brute force covers a single day")
    plan = _day_plan(sc, 0)
    usable = sum(1 << j for j in range(d) if plan.resolvable[j])
    query_masks = np.array(
        [sum(1 << j for j in combo) for combo in itertools.combinations(range(d), q)],
        dtype=np.int64 if d < 63 else object,
    )
    hits = 0
    for combo in itertools.combinations(range(d), r):
        reg = sum(1 << j for j in combo) & usable
        hits += int(np.count_nonzero(query_masks & reg))
    return Fraction(hits, pairs)


# -- lead time vs. detection -------------------------------------------------------


@dataclass(frozen=True)
class TradeoffRow:
    lead_time: dt.timedelta
    base_rate: float
    survival: float
    net_rate: float


def advance_days(lead_time: dt.timedelta) -> int:
    return max(0, lead_time // dt.timedelta(days=1))


def lead_time_tradeoff(
    sc: DgaScenario, hazard: float, lead_times: Iterable[dt.timedelta], trials: int = 1000
) -> list[TradeoffRow]:
    """Net attacker success when registering early to outlast the age threshold.

    ``hazard`` is a modeling assumption: the chance per full day of advance
    registration that the domains get noticed and taken down.
    """
    if not 0.0 <= hazard <= 1.0:
        raise ValueError("hazard must be in [0, 1]")
    rows = []
    for lead in lead_times:
        base = run_trials(replace(sc, lead_time=lead), trials).success_rate
        survival = (1.0 - hazard) ** advance_days(lead)
        rows.append(TradeoffRow(lead, base, survival, base * survival))
    return rows


# -- I/O ---------------------------------------------------------------------------

OUTCOME_FIELDS = ("trial", "success", "rendezvous_day", "queries", "blocked")


def write_outcomes_csv(outcomes: Sequence[SimOutcome], fh: TextIO, first_trial: int = 0) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(OUTCOME_FIELDS)
    for i, o in enumerate(outcomes):
        w.writerow([
            first_trial + i,
            int(o.success),
            "" if o.rendezvous_day is None else o.rendezvous_day,
            o.queries_issued,
            o.blocked_queries,
        ])


def write_tradeoff_csv(rows: Sequence[TradeoffRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("lead_time_hours", "base_rate", "survival", "net_rate"))
    for row in rows:
        w.writerow([
            f"{row.lead_time.total_seconds() / 3600:g}",
            f"{row.base_rate:.6f}",
            f"{row.survival:.6f}",
            f"{row.net_rate:.6f}",
        ])


def summary_lines(sc: DgaScenario, agg: TrialAggregate) -> list[str]:
    defense = "off"
    if sc.defense is not None:
        defense = f"threshold {sc.defense.threshold.total_seconds() / 3600:g}h, young={sc.defense.young_action.value}"
    mean_q = "n/a" if agg.mean_queries_to_success is None else f"{agg.mean_queries_to_success:.2f}"
    return [
        f"dga: {sc.dga.kind.value}, {sc.dga.domains_per_day} names/day, .{sc.dga.tld}",
        f"registered {sc.registered}/day, agent tries {sc.queries}/day, lead time {sc.lead_time.total_seconds() / 3600:g}h",
        f"defense: {defense}; horizon {sc.horizon_days} day(s); seeds {sc.rng_seed}..{sc.rng_seed + agg.trials - 1}",
        f"rendezvous: {agg.successes}/{agg.trials} = {agg.success_rate:.4f}; mean queries to success {mean_q}",
    ]


def scenario_from_mapping(values: Mapping[str, str], base_dir: Optional[Path] = None) -> tuple[DgaScenario, int]:
    """Build a scenario (and trial count) from ``key = value`` settings."""
    kind = values.get("dga", DgaKind.SEEDED_HASH.value)
    try:
        kind = DgaKind(kind)
    except ValueError:
        raise ConfigError(f"dga: unknown kind {kind!r}") from None
    spec = DgaSpec(
        kind=kind,
        domains_per_day=as_int(values.get("domains_per_day", "250"), "domains_per_day"),
        tld=values.get("tld", "test"),
        seed=as_int(values.get("dga_seed", "0"), "dga_seed"),
    )
    defense = None
    if as_bool(values.get("defense", "true"), "defense"):
        defense = PolicyConfig.from_mapping(values, base_dir)
    start = DEFAULT_START
    if values.get("start_date"):
        try:
            start = dt.date.fromisoformat(values["start_date"])
        except ValueError:
            raise ConfigError(f"start_date: bad date {values['start_date']!r}") from None
    sc = DgaScenario(
        dga=spec,
        registered=as_int(values.get("registered", "0"), "registered"),
        queries=as_int(values.get("queries", "0"), "queries"),
        lead_time=dt.timedelta(hours=as_float(values.get("lead_time_hours", "3"), "lead_time_hours")),
        defense=defense,
        horizon_days=as_int(values.get("horizon_days", "1"), "horizon_days"),
        rng_seed=as_int(values.get("seed", "0"), "seed"),
        start_date=start,
    )
    return sc, as_int(values.get("trials", "1000"), "trials")

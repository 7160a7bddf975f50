"""
UDP DNS forwarder that enforces the delayed-DNS policy.

``handle_query`` is the whole decision path and is independent of sockets:
it takes one datagram and returns the reply bytes (or None to drop) plus
the log event.  ``DnsProxyServer`` wraps it with a listening socket, a
worker pool, a single JSONL log writer and periodic feed reloads.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import os
import queue
import random
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

from . import dns_wire
from .config import ConfigError, as_bool, as_float, read_kv_file
from .dns_wire import Rcode, RType, WireError
from .domain_age import (
    UTC,
    AgeIndex,
    AgeSource,
    EmptyFeed,
    SoaCache,
    apply_soa_heuristic,
    format_timestamp,
    load_feed,
    lookup_age,
    registrable_domain,
)
from .policy import Action, PolicyConfig, evaluate

log = logging.getLogger(__name__)

Clock = Callable[[], dt.datetime]
Endpoint = tuple[str, int]

NEGATIVE_PROBE_TTL = dt.timedelta(hours=1)


def system_clock() -> dt.datetime:
    return dt.datetime.now(UTC).replace(microsecond=0)


class ManualClock:
    """A settable clock for tests and reproducible demos."""

    def __init__(self, start: dt.datetime) -> None:
        self.now = start

    def __call__(self) -> dt.datetime:
        return self.now

    def advance(self, delta: dt.timedelta) -> None:
        self.now = self.now + delta


class StartupError(RuntimeError):
    pass


class UpstreamError(OSError):
    pass


def parse_endpoint(text: str, default_port: int = 53) -> Endpoint:
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest.lstrip(":") or str(default_port)
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, str(default_port)
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigError(f"bad port in endpoint {text!r}") from None
    if not host or not 0 <= port_num <= 65535:
        raise ConfigError(f"bad endpoint {text!r}")
    return host, port_num


class UdpUpstream:
    """One fresh datagram exchange per call."""

    def __init__(self, endpoint: Endpoint, timeout: float = 2.0) -> None:
        self.endpoint = endpoint
        self.timeout = timeout

    def exchange(self, wire: bytes) -> bytes:
        family = socket.AF_INET6 if ":" in self.endpoint[0] else socket.AF_INET
        with socket.socket(family, socket.SOCK_DGRAM) as sock:
            sock.settimeout(self.timeout)
            try:
                sock.sendto(wire, self.endpoint)
                reply, _ = sock.recvfrom(65535)
            except socket.timeout as exc:
                raise UpstreamError("upstream timeout") from exc
            except OSError as exc:
                raise UpstreamError(f"upstream unreachable: {exc}") from exc
        return reply


class ManualScheduler:
    """Executor stand-in that queues work until ``run_pending`` is called."""

    def __init__(self) -> None:
        self.pending: list = []

    def submit(self, fn, *args):
        self.pending.append((fn, args))

    def run_pending(self) -> int:
        jobs, self.pending = self.pending, []
        for fn, args in jobs:
            fn(*args)
        return len(jobs)


@dataclass
class LogEvent:
    ts: str
    qname: Optional[str]
    qtype: Optional[int]
    action: str
    reason: str
    level: str = "info"
    age_hours: Optional[float] = None
    source: Optional[str] = None
    client: Optional[str] = None
    upstream_rcode: Optional[int] = None
    latency_ms: float = 0.0
    note: Optional[str] = None
    feed_stale: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class QueryOutcome:
    response: Optional[bytes]
    events: list[LogEvent]


@dataclass
class ProxyConfig:
    listen: Endpoint = ("127.0.0.1", 5353)
    upstream: Endpoint = ("127.0.0.1", 53)
    upstream_timeout: float = 2.0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    feed_path: Optional[str] = None
    log_path: Optional[str] = None
    soa_probe_enabled: bool = True
    feed_reload_minutes: float = 60.0
    allow_empty_feed: bool = False
    blocklist_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.upstream_timeout <= 0:
            raise ConfigError("upstream_timeout must be positive")
        if self.feed_reload_minutes <= 0:
            raise ConfigError("feed_reload_minutes must be positive")
        if self.listen == self.upstream:
            raise ConfigError("listen and upstream endpoints must differ")

    @classmethod
    def from_file(cls, path, **overrides) -> "ProxyConfig":
        values = read_kv_file(path)
        return cls.from_mapping(values, Path(path).parent, **overrides)

    @classmethod
    def from_mapping(cls, values: dict, base_dir: Optional[Path] = None, **overrides) -> "ProxyConfig":
        def rel(p: str) -> str:
            path = Path(p)
            return str(base_dir / path) if base_dir is not None and not path.is_absolute() else p

        kwargs: dict = {"policy": PolicyConfig.from_mapping(values, base_dir)}
        if "listen" in values:
            kwargs["listen"] = parse_endpoint(values["listen"])
        if "upstream" in values:
            kwargs["upstream"] = parse_endpoint(values["upstream"])
        if "upstream_timeout_seconds" in values:
            kwargs["upstream_timeout"] = as_float(values["upstream_timeout_seconds"], "upstream_timeout_seconds")
        if values.get("feed_path"):
            kwargs["feed_path"] = rel(values["feed_path"])
        if values.get("log_path"):
            kwargs["log_path"] = rel(values["log_path"])
        if values.get("blocklist_dir"):
            kwargs["blocklist_dir"] = rel(values["blocklist_dir"])
        if "soa_probe" in values:
            kwargs["soa_probe_enabled"] = as_bool(values["soa_probe"], "soa_probe")
        if "feed_reload_minutes" in values:
            kwargs["feed_reload_minutes"] = as_float(values["feed_reload_minutes"], "feed_reload_minutes")
        if "allow_empty_feed" in values:
            kwargs["allow_empty_feed"] = as_bool(values["allow_empty_feed"], "allow_empty_feed")
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


class ProxyState:
    """Everything ``handle_query`` reads.

    ``index`` is replaced wholesale on reload; a query reads it once, so it
    sees either the old or the new snapshot.
    """

    def __init__(
        self,
        policy: PolicyConfig,
        upstream,
        clock: Clock = system_clock,
        index: Optional[AgeIndex] = None,
        soa_cache: Optional[SoaCache] = None,
        scheduler=None,
        soa_probe_enabled: bool = True,
        rng: Optional[random.Random] = None,
        stale_after: Optional[dt.timedelta] = None,
    ) -> None:
        self.policy = policy
        self.upstream = upstream
        self.clock = clock
        self.index = index if index is not None else AgeIndex()
        self.soa_cache = soa_cache if soa_cache is not None else SoaCache()
        self.scheduler = scheduler if scheduler is not None else ManualScheduler()
        self.soa_probe_enabled = soa_probe_enabled
        self.rng = rng if rng is not None else random.SystemRandom()
        self.stale_after = stale_after
        self.index_loaded_at: Optional[dt.datetime] = None

    def swap_index(self, index: AgeIndex, now: dt.datetime) -> None:
        self.index = index
        self.index_loaded_at = now

    def feed_stale(self, now: dt.datetime) -> bool:
        if self.stale_after is None or self.index_loaded_at is None:
            return False
        return now - self.index_loaded_at > self.stale_after


def _format_client(client) -> Optional[str]:
    if client is None:
        return None
    if isinstance(client, tuple):
        return f"{client[0]}:{client[1]}"
    return str(client)


def _forward(wire: bytes, state: ProxyState) -> tuple[Optional[bytes], Optional[str]]:
    """Relay to upstream under a fresh id; returns (reply, failure note)."""
    upstream_id = state.rng.getrandbits(16)
    try:
        reply = state.upstream.exchange(struct.pack("!H", upstream_id) + wire[2:])
    except (UpstreamError, OSError) as exc:
        return None, f"upstream-error: {exc}"
    if len(reply) < dns_wire.HEADER_LEN:
        return None, "upstream-short-reply"
    reply_id, flags = struct.unpack("!HH", reply[:4])
    if reply_id != upstream_id:
        return None, "upstream-id-mismatch"
    if not flags & 0x8000:
        return None, "upstream-not-a-response"
    return reply, None


def handle_query(
    wire: bytes,
    client,
    state: ProxyState,
    now: Optional[dt.datetime] = None,
) -> QueryOutcome:
    started = time.perf_counter()
    now = now if now is not None else state.clock()
    wire = bytes(wire)
    event = LogEvent(
        ts=format_timestamp(now),
        qname=None,
        qtype=None,
        action="Drop",
        reason="Malformed",
        client=_format_client(client),
        feed_stale=state.feed_stale(now),
    )

    def done(response: Optional[bytes]) -> QueryOutcome:
        event.latency_ms = round((time.perf_counter() - started) * 1000, 3)
        return QueryOutcome(response, [event])

    try:
        header, _counts = dns_wire.decode_header(wire)
    except WireError:
        event.note = f"{len(wire)}-byte datagram without a header"
        return done(None)
    if header.qr:
        event.reason = "NotAQuery"
        return done(None)
    try:
        msg = dns_wire.decode_message(wire)
    except WireError as exc:
        msg = None
        event.note = f"{type(exc).__name__}: {exc}"
    if msg is None or not msg.questions:
        event.action = "FormErr"
        if msg is not None:
            event.note = "no question"
        reply = dns_wire.error_response(header, Rcode.FORMERR)
        return done(dns_wire.encode_message(reply))

    question = msg.questions[0]
    domain = question.qname.canonical()
    event.qname = domain
    event.qtype = question.qtype
    if len(msg.questions) > 1:
        event.note = f"qdcount={len(msg.questions)}; first question evaluated"

    index = state.index
    verdict = lookup_age(domain, now, index, state.soa_cache)
    decision = evaluate(domain, verdict, state.policy)
    event.action = decision.action.value
    event.reason = decision.reason.value
    if verdict.known:
        event.age_hours = verdict.age.total_seconds() / 3600
        event.source = verdict.source.value
    if decision.action is Action.ALERT_ONLY:
        event.level = "alert"

    if state.soa_probe_enabled and verdict.source is not AgeSource.FEED:
        soa_probe(domain, state, now)

    if decision.action is Action.BLOCK:
        reply = dns_wire.synthesize_nxdomain(msg, state.policy.block_ttl)
        return done(dns_wire.encode_message(reply))

    upstream_reply, failure = _forward(wire, state)
    if upstream_reply is None:
        event.note = failure
        event.upstream_rcode = Rcode.SERVFAIL
        reply = dns_wire.error_response(header, Rcode.SERVFAIL, msg.questions)
        return done(dns_wire.encode_message(reply))
    event.upstream_rcode = upstream_reply[3] & 0xF
    return done(wire[:2] + upstream_reply[2:])


def soa_probe(domain: str, state: ProxyState, now: Optional[dt.datetime] = None) -> bool:
    """Schedule an SOA lookup for the domain's registrable parent.

    Returns True if a probe was scheduled.  Never waits on the probe.
    """
    now = now if now is not None else state.clock()
    apex = registrable_domain(domain)
    if apex is None or apex in state.index:
        return False
    if not state.soa_cache.claim_probe(apex, now):
        return False
    state.scheduler.submit(_run_soa_probe, apex, state)
    return True


def _run_soa_probe(apex: str, state: ProxyState) -> None:
    query_id = state.rng.getrandbits(16)
    query = dns_wire.make_query(apex, RType.SOA, msg_id=query_id)
    try:
        reply = state.upstream.exchange(dns_wire.encode_message(query))
        msg = dns_wire.decode_message(reply)
    except (UpstreamError, OSError, WireError) as exc:
        log.info("SOA probe for %s failed: %s", apex, exc)
        msg = None
    now = state.clock()
    soa_rr = None
    if msg is not None and msg.header.id == query_id:
        soa_rr = dns_wire.find_soa_record(msg)
    # An SOA owned by a parent zone says nothing about this domain.
    if soa_rr is None or soa_rr.name.canonical() != apex:
        state.soa_cache.put_negative(apex, now + NEGATIVE_PROBE_TTL)
        return
    if apply_soa_heuristic(soa_rr.rdata, apex, now, state.soa_cache) is None:
        state.soa_cache.put_negative(apex, now + NEGATIVE_PROBE_TTL)


# -- blocklist export ----------------------------------------------------------


def young_domains(index: AgeIndex, now: dt.datetime, threshold: dt.timedelta) -> list[str]:
    """Feed domains currently younger than the threshold, sorted."""
    return sorted(d for d, since in index.entries.items() if dt.timedelta(0) <= now - since < threshold)


def write_blocklist(path, domains) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(f"{d}\n" for d in domains), encoding="utf-8")
    os.replace(tmp, path)


# -- server ------------------------------------------------------------------


class JsonlWriter:
    """Single writer thread; events are queued in arrival order."""

    def __init__(self, path: Optional[str]) -> None:
        self._queue: "queue.Queue[Optional[str]]" = queue.Queue()
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._thread = threading.Thread(target=self._drain, name="chronogate-log", daemon=True)
        self._thread.start()

    def submit(self, events: list[LogEvent]) -> None:
        self._queue.put("".join(e.to_json() + "\n" for e in events))

    def _drain(self) -> None:
        while True:
            chunk = self._queue.get()
            if chunk is None:
                break
            if self._fh is not None:
                self._fh.write(chunk)
                self._fh.flush()

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=5)
        if self._fh is not None:
            self._fh.close()


class DnsProxyServer:
    def __init__(self, config: ProxyConfig, clock: Clock = system_clock, upstream=None, workers: int = 8) -> None:
        self.config = config
        self.clock = clock
        self.state = ProxyState(
            config.policy,
            upstream if upstream is not None else UdpUpstream(config.upstream, config.upstream_timeout),
            clock=clock,
            soa_probe_enabled=config.soa_probe_enabled,
            stale_after=dt.timedelta(minutes=2 * config.feed_reload_minutes),
        )
        self._workers = workers
        self._stop = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._pool: Optional[ThreadPoolExecutor] = None
        self._writer: Optional[JsonlWriter] = None
        self._blocklist_day: Optional[dt.date] = None

    @property
    def address(self) -> Endpoint:
        assert self._sock is not None
        return self._sock.getsockname()[:2]

    def load_initial_feed(self) -> None:
        now = self.clock()
        path = self.config.feed_path
        try:
            if path is None:
                raise FileNotFoundError("no feed configured")
            index = load_feed(path, now)
        except (OSError, EmptyFeed, UnicodeDecodeError) as exc:
            if not self.config.allow_empty_feed:
                raise StartupError(f"cannot load feed {path}: {exc} (use --allow-empty-feed to start anyway)") from exc
            log.warning("starting with an empty index: %s", exc)
            index = AgeIndex()
        self.state.swap_index(index, now)
        log.info("feed loaded: %d domains %s", len(index), index.stats.as_dict())

    def reload_feed(self) -> bool:
        now = self.clock()
        try:
            index = load_feed(self.config.feed_path, now)
        except (OSError, EmptyFeed, UnicodeDecodeError, TypeError) as exc:
            log.warning("feed reload failed, keeping previous index: %s", exc)
            return False
        self.state.swap_index(index, now)
        self.dump_blocklist(force=True)
        return True

    def dump_blocklist(self, force: bool = False) -> Optional[Path]:
        if not self.config.blocklist_dir:
            return None
        now = self.clock()
        if not force and self._blocklist_day == now.date():
            return None
        self._blocklist_day = now.date()
        path = Path(self.config.blocklist_dir) / f"blocklist-{now:%Y%m%d}.txt"
        write_blocklist(path, young_domains(self.state.index, now, self.config.policy.threshold))
        return path

    def start(self) -> Endpoint:
        self.load_initial_feed()
        host, port = self.config.listen
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        sock = socket.socket(family, socket.SOCK_DGRAM)
        try:
            sock.bind((host, port))
        except OSError as exc:
            sock.close()
            raise StartupError(f"cannot bind {host}:{port}: {exc}") from exc
        sock.settimeout(0.2)
        self._sock = sock
        self._writer = JsonlWriter(self.config.log_path)
        self._pool = ThreadPoolExecutor(max_workers=self._workers, thread_name_prefix="chronogate-q")
        self.state.scheduler = ThreadPoolExecutor(max_workers=2, thread_name_prefix="chronogate-soa")
        self.dump_blocklist()
        for target, name in ((self._recv_loop, "recv"), (self._maintenance_loop, "reload")):
            t = threading.Thread(target=target, name=f"chronogate-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self.address

    def _recv_loop(self) -> None:
        assert self._sock is not None and self._pool is not None
        while not self._stop.is_set():
            try:
                data, client = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                continue
            self._pool.submit(self._serve_one, data, client)

    def _serve_one(self, data: bytes, client) -> None:
        try:
            outcome = handle_query(data, client, self.state)
        except Exception:  # a datagram must never take the server down
            log.exception("unhandled error for datagram from %s", client)
            return
        if outcome.response is not None and self._sock is not None:
            try:
                self._sock.sendto(outcome.response, client)
            except OSError as exc:
                log.debug("send to %s failed: %s", client, exc)
        if self._writer is not None:
            self._writer.submit(outcome.events)

    def _maintenance_loop(self) -> None:
        period = self.config.feed_reload_minutes * 60
        next_reload = time.monotonic() + period
        while not self._stop.wait(min(1.0, period)):
            if time.monotonic() >= next_reload:
                next_reload = time.monotonic() + period
                if self.config.feed_path:
                    self.reload_feed()
            self.dump_blocklist()

    def serve_forever(self) -> None:
        try:
            while not self._stop.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        if self._pool is not None:
            self._pool.shutdown(wait=True)
        scheduler = self.state.scheduler
        if isinstance(scheduler, ThreadPoolExecutor):
            scheduler.shutdown(wait=False)
        if self._writer is not None:
            self._writer.close()
            self._writer = None
        if self._sock is not None:
            self._sock.close()


def run(config: ProxyConfig, clock: Clock = system_clock) -> None:
    server = DnsProxyServer(config, clock)
    host, port = server.start()
    log.info("listening on %s:%d, forwarding to %s:%d", host, port, *config.upstream)
    server.serve_forever()

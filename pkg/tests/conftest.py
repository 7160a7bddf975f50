import datetime as dt
import ipaddress
import socket
import struct
import threading

import pytest

from chronogate import dns_wire
from chronogate.dns_wire import CLASS_IN, ResourceRecord, RType, SoaRdata
from chronogate.resolver_proxy import UpstreamError

UTC = dt.timezone.utc
T0 = dt.datetime(2017, 8, 24, 12, 0, tzinfo=UTC)

FEED_TEXT = """domain,registered_at
# newly registered, three hours before T0
evil-example.test,2017-08-24T09:00:00Z
seasoned.test,2017-01-01T00:00:00Z
"""


def answer_for(query_wire: bytes, address: str = "192.0.2.7", soa_serial=None, soa_owner=None) -> bytes:
    """A well-formed upstream reply to ``query_wire`` (id echoed)."""
    q = dns_wire.decode_message(query_wire)
    reply = dns_wire.DnsMessage(
        dns_wire.DnsHeader(id=q.header.id, qr=True, rd=q.header.rd, ra=True),
        list(q.questions),
    )
    qname = q.questions[0].qname
    if q.questions[0].qtype == RType.SOA and soa_serial is not None:
        owner = dns_wire.DnsName.from_text(soa_owner) if soa_owner else qname
        soa = SoaRdata(
            dns_wire.DnsName.from_text("ns1." + owner.canonical()),
            dns_wire.DnsName.from_text("hostmaster." + owner.canonical()),
            soa_serial, 7200, 3600, 1209600, 300,
        )
        reply.answers.append(ResourceRecord(owner, RType.SOA, CLASS_IN, 300, soa))
    else:
        reply.answers.append(ResourceRecord(qname, RType.A, CLASS_IN, 300, ipaddress.IPv4Address(address)))
    return dns_wire.encode_message(reply)


class ScriptedUpstream:
    """In-process upstream that records every packet it is sent.

    mode: "answer" (default), "timeout", "bad-id", "short".
    """

    def __init__(self, mode="answer", soa_serial=None, soa_owner=None):
        self.mode = mode
        self.soa_serial = soa_serial
        self.soa_owner = soa_owner
        self.packets = []
        self.replies = []

    def exchange(self, wire: bytes) -> bytes:
        self.packets.append(wire)
        if self.mode == "timeout":
            raise UpstreamError("upstream timeout")
        if self.mode == "short":
            return b"\x00\x01"
        reply = answer_for(wire, soa_serial=self.soa_serial, soa_owner=self.soa_owner)
        if self.mode == "bad-id":
            bad = (struct.unpack("!H", reply[:2])[0] + 1) & 0xFFFF
            reply = struct.pack("!H", bad) + reply[2:]
        self.replies.append(reply)
        return reply


class UdpFakeUpstream:
    """Real UDP responder on localhost, for socket-level tests."""

    def __init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(0.1)
        self.packets = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self.sock.getsockname()

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self.packets.append(data)
            try:
                self.sock.sendto(answer_for(data), peer)
            except Exception:
                pass

    def close(self):
        self._stop.set()
        self._thread.join(timeout=2)
        self.sock.close()


@pytest.fixture
def feed_file(tmp_path):
    path = tmp_path / "nrd.csv"
    path.write_text(FEED_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def udp_upstream():
    up = UdpFakeUpstream()
    yield up
    up.close()


# -- acceptance summary: one pass/fail line per criterion --------------------------

_acceptance_results = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")

"""
DNS wire format (RFC 1035 section 4) encoder and decoder.

Only the subset the forwarder needs gets typed rdata: A and SOA.  Every other
record type, including EDNS0 OPT pseudo-records, is carried as opaque bytes
and re-emitted unchanged.  The encoder never compresses names; the decoder
follows compression pointers but only backwards, which also rules out loops.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Union


class RType(IntEnum):
    A = 1
    NS = 2
    CNAME = 5
    SOA = 6
    PTR = 12
    MX = 15
    TXT = 16
    AAAA = 28
    OPT = 41


class Rcode(IntEnum):
    NOERROR = 0
    FORMERR = 1
    SERVFAIL = 2
    NXDOMAIN = 3
    NOTIMP = 4
    REFUSED = 5


CLASS_IN = 1
HEADER_LEN = 12
MAX_LABEL = 63
MAX_NAME = 255
_MAX_POINTER_HOPS = 128


class WireError(ValueError):
    """Base class for malformed wire data."""


class Truncated(WireError):
    pass


class BadPointer(WireError):
    pass


class LabelTooLong(WireError):
    pass


class NameTooLong(WireError):
    pass


class BadRdata(WireError):
    pass


class NotAQuery(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DnsName:
    """A domain name as a tuple of raw labels.

    Case is preserved for re-encoding; equality and hashing are
    ASCII-case-insensitive.
    """

    labels: tuple[bytes, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(bytes(l) for l in self.labels))
        for label in self.labels:
            if not label:
                raise WireError("empty label")
            if len(label) > MAX_LABEL:
                raise LabelTooLong(f"label of {len(label)} bytes")
        if self.wire_length > MAX_NAME:
            raise NameTooLong(f"name of {self.wire_length} bytes")

    @classmethod
    def from_text(cls, text: str) -> "DnsName":
        text = text.strip()
        if text in ("", "."):
            return cls(())
        return cls(tuple(part.encode("ascii") for part in text.rstrip(".").split(".")))

    @property
    def wire_length(self) -> int:
        return sum(len(l) + 1 for l in self.labels) + 1

    def canonical(self) -> str:
        """Lowercase dotted form without the trailing root dot."""
        return ".".join(l.decode("ascii", "backslashreplace") for l in self.labels).lower()

    def _key(self) -> tuple[bytes, ...]:
        return tuple(l.lower() for l in self.labels)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DnsName):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __str__(self) -> str:
        return self.canonical() + "."


@dataclass
class DnsHeader:
    id: int = 0
    qr: bool = False
    opcode: int = 0
    aa: bool = False
    tc: bool = False
    rd: bool = False
    ra: bool = False
    z: int = 0
    rcode: int = 0

    def flags(self) -> int:
        return (
            (self.qr << 15)
            | ((self.opcode & 0xF) << 11)
            | (self.aa << 10)
            | (self.tc << 9)
            | (self.rd << 8)
            | (self.ra << 7)
            | ((self.z & 0x7) << 4)
            | (self.rcode & 0xF)
        )

    @classmethod
    def from_flags(cls, msg_id: int, flags: int) -> "DnsHeader":
        return cls(
            id=msg_id,
            qr=bool(flags & 0x8000),
            opcode=(flags >> 11) & 0xF,
            aa=bool(flags & 0x0400),
            tc=bool(flags & 0x0200),
            rd=bool(flags & 0x0100),
            ra=bool(flags & 0x0080),
            z=(flags >> 4) & 0x7,
            rcode=flags & 0xF,
        )


@dataclass
class Question:
    qname: DnsName
    qtype: int = RType.A
    qclass: int = CLASS_IN


@dataclass(frozen=True)
class SoaRdata:
    mname: DnsName
    rname: DnsName
    serial: int
    refresh: int
    retry: int
    expire: int
    minimum: int


Rdata = Union[ipaddress.IPv4Address, SoaRdata, bytes]


@dataclass
class ResourceRecord:
    name: DnsName
    rtype: int
    rclass: int
    ttl: int
    rdata: Rdata


@dataclass
class DnsMessage:
    header: DnsHeader = field(default_factory=DnsHeader)
    questions: list[Question] = field(default_factory=list)
    answers: list[ResourceRecord] = field(default_factory=list)
    authorities: list[ResourceRecord] = field(default_factory=list)
    additionals: list[ResourceRecord] = field(default_factory=list)

    @property
    def qdcount(self) -> int:
        return len(self.questions)

    @property
    def ancount(self) -> int:
        return len(self.answers)

    @property
    def nscount(self) -> int:
        return len(self.authorities)

    @property
    def arcount(self) -> int:
        return len(self.additionals)


# -- decoding ---------------------------------------------------------------


class _Reader:
    def __init__(self, wire: bytes) -> None:
        self.wire = wire
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.wire):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.wire) - self.pos}")
        chunk = self.wire[self.pos:end]
        self.pos = end
        return chunk

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def name(self) -> DnsName:
        labels, self.pos = _read_name(self.wire, self.pos)
        return DnsName(labels)


def _read_name(wire: bytes, pos: int) -> tuple[tuple[bytes, ...], int]:
    """Read a possibly-compressed name starting at pos.

    Returns the labels and the offset just past the name in the original
    (non-pointer) stream.
    """
    labels: list[bytes] = []
    length = 1
    resume: Optional[int] = None
    hops = 0
    while True:
        if pos >= len(wire):
            raise Truncated("name runs past end of message")
        octet = wire[pos]
        kind = octet & 0xC0
        if kind == 0xC0:
            if pos + 1 >= len(wire):
                raise Truncated("truncated compression pointer")
            target = ((octet & 0x3F) << 8) | wire[pos + 1]
            # Only strictly backward pointers are legal; this makes loops impossible.
            if target >= pos:
                raise BadPointer(f"pointer at {pos} targets {target}")
            hops += 1
            if hops > _MAX_POINTER_HOPS:
                raise BadPointer("too many compression hops")
            if resume is None:
                resume = pos + 2
            pos = target
            continue
        if kind != 0:
            raise BadPointer(f"reserved label type 0x{octet:02x} at {pos}")
        if octet == 0:
            pos += 1
            break
        if pos + 1 + octet > len(wire):
            raise Truncated("label runs past end of message")
        length += octet + 1
        if length > MAX_NAME:
            raise NameTooLong("decoded name exceeds 255 bytes")
        labels.append(wire[pos + 1:pos + 1 + octet])
        pos += 1 + octet
    return tuple(labels), (resume if resume is not None else pos)


def _read_record(r: _Reader) -> ResourceRecord:
    name = r.name()
    rtype, rclass, ttl, rdlength = struct.unpack("!HHIH", r.take(10))
    start = r.pos
    end = start + rdlength
    if end > len(r.wire):
        raise Truncated("rdata runs past end of message")
    rdata: Rdata
    if rtype == RType.A and rclass == CLASS_IN:
        if rdlength != 4:
            raise BadRdata(f"A record with rdlength {rdlength}")
        rdata = ipaddress.IPv4Address(r.take(4))
    elif rtype == RType.SOA:
        mname = r.name()
        rname = r.name()
        serial, refresh, retry, expire, minimum = struct.unpack("!5I", r.take(20))
        if r.pos != end:
            raise BadRdata("SOA rdata length mismatch")
        rdata = SoaRdata(mname, rname, serial, refresh, retry, expire, minimum)
    else:
        rdata = r.take(rdlength)
    return ResourceRecord(name, rtype, rclass, ttl, rdata)


def decode_header(wire: bytes) -> tuple[DnsHeader, tuple[int, int, int, int]]:
    if len(wire) < HEADER_LEN:
        raise Truncated(f"header needs 12 bytes, got {len(wire)}")
    msg_id, flags, qd, an, ns, ar = struct.unpack("!6H", wire[:HEADER_LEN])
    return DnsHeader.from_flags(msg_id, flags), (qd, an, ns, ar)


def decode_message(wire: bytes) -> DnsMessage:
    wire = bytes(wire)
    header, (qd, an, ns, ar) = decode_header(wire)
    r = _Reader(wire)
    r.pos = HEADER_LEN
    msg = DnsMessage(header=header)
    for _ in range(qd):
        qname = r.name()
        qtype, qclass = struct.unpack("!HH", r.take(4))
        msg.questions.append(Question(qname, qtype, qclass))
    for count, section in ((an, msg.answers), (ns, msg.authorities), (ar, msg.additionals)):
        for _ in range(count):
            section.append(_read_record(r))
    return msg


# -- encoding ---------------------------------------------------------------


def encode_name(name: DnsName) -> bytes:
    if name.wire_length > MAX_NAME:
        raise NameTooLong(str(name))
    out = bytearray()
    for label in name.labels:
        if len(label) > MAX_LABEL:
            raise LabelTooLong(repr(label))
        out.append(len(label))
        out += label
    out.append(0)
    return bytes(out)


def _encode_rdata(rr: ResourceRecord) -> bytes:
    rdata = rr.rdata
    if isinstance(rdata, ipaddress.IPv4Address):
        return rdata.packed
    if isinstance(rdata, SoaRdata):
        return (
            encode_name(rdata.mname)
            + encode_name(rdata.rname)
            + struct.pack("!5I", rdata.serial, rdata.refresh, rdata.retry, rdata.expire, rdata.minimum)
        )
    return bytes(rdata)


def _encode_record(rr: ResourceRecord) -> bytes:
    rdata = _encode_rdata(rr)
    return encode_name(rr.name) + struct.pack("!HHIH", rr.rtype, rr.rclass, rr.ttl, len(rdata)) + rdata


def encode_message(msg: DnsMessage) -> bytes:
    h = msg.header
    out = bytearray(struct.pack(
        "!6H", h.id, h.flags(), msg.qdcount, msg.ancount, msg.nscount, msg.arcount
    ))
    for q in msg.questions:
        out += encode_name(q.qname) + struct.pack("!HH", q.qtype, q.qclass)
    for section in (msg.answers, msg.authorities, msg.additionals):
        for rr in section:
            out += _encode_record(rr)
    return bytes(out)


# -- helpers used by the forwarder ---------------------------------------------

SYNTH_MNAME = DnsName.from_text("chronogate.invalid")
SYNTH_RNAME = DnsName.from_text("hostmaster.chronogate.invalid")


def make_query(name: Union[str, DnsName], qtype: int = RType.A, msg_id: int = 0, rd: bool = True) -> DnsMessage:
    if isinstance(name, str):
        name = DnsName.from_text(name)
    return DnsMessage(DnsHeader(id=msg_id, rd=rd), [Question(name, qtype, CLASS_IN)])


def synthesize_nxdomain(query: DnsMessage, ttl_hint: int) -> DnsMessage:
    """Build the NXDOMAIN answer for a blocked query.

    The authority section carries a synthetic SOA whose TTL and minimum are
    both ``ttl_hint``, which caps how long resolvers cache the negative answer.
    """
    if query.header.qr:
        raise NotAQuery("cannot answer a response")
    if not query.questions:
        raise NotAQuery("query has no question")
    h = query.header
    header = DnsHeader(id=h.id, qr=True, opcode=h.opcode, rd=h.rd, ra=True, rcode=Rcode.NXDOMAIN)
    soa = SoaRdata(SYNTH_MNAME, SYNTH_RNAME, 1, ttl_hint, ttl_hint, ttl_hint, ttl_hint)
    owner = query.questions[0].qname
    return DnsMessage(
        header=header,
        questions=list(query.questions),
        authorities=[ResourceRecord(owner, RType.SOA, CLASS_IN, ttl_hint, soa)],
    )


def error_response(header: DnsHeader, rcode: int, questions: Optional[list[Question]] = None) -> DnsMessage:
    """A bare response carrying only an rcode (FORMERR, SERVFAIL)."""
    reply = DnsHeader(id=header.id, qr=True, opcode=header.opcode, rd=header.rd, ra=True, rcode=rcode)
    return DnsMessage(header=reply, questions=list(questions or []))


def find_soa_record(msg: DnsMessage) -> Optional[ResourceRecord]:
    for section in (msg.answers, msg.authorities):
        for rr in section:
            if rr.rtype == RType.SOA and isinstance(rr.rdata, SoaRdata):
                return rr
    return None


def extract_soa(msg: DnsMessage) -> Optional[SoaRdata]:
    """First SOA in the answer section, else in the authority section."""
    rr = find_soa_record(msg)
    return rr.rdata if rr is not None else None

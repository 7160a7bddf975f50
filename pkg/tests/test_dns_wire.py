import ipaddress
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronogate import dns_wire
from chronogate.dns_wire import (
    CLASS_IN,
    BadPointer,
    DnsHeader,
    DnsMessage,
    DnsName,
    LabelTooLong,
    NameTooLong,
    NotAQuery,
    Question,
    ResourceRecord,
    RType,
    SoaRdata,
    Truncated,
    WireError,
    decode_message,
    encode_message,
    extract_soa,
    synthesize_nxdomain,
)

# Hand-encoded per RFC 1035 4.1 and matched against dnspython's make_query output.
EXAMPLE_QUERY = bytes.fromhex("123401000001000000000000076578616d706c6503636f6d0000010001")


def test_minimal_header_decodes_to_empty_message():
    msg = decode_message(bytes(12))
    assert msg.header.id == 0
    assert (msg.qdcount, msg.ancount, msg.nscount, msg.arcount) == (0, 0, 0, 0)


def test_empty_message_encodes_to_twelve_zero_bytes():
    assert encode_message(DnsMessage()) == bytes(12)


def test_example_query_decodes():
    msg = decode_message(EXAMPLE_QUERY)
    assert msg.header.id == 0x1234
    assert msg.header.rd and not msg.header.qr
    assert msg.questions == [Question(DnsName.from_text("example.com"), 1, 1)]


def test_example_query_encodes_exactly():
    assert encode_message(dns_wire.make_query("example.com", msg_id=0x1234)) == EXAMPLE_QUERY
    assert encode_message(decode_message(EXAMPLE_QUERY)) == EXAMPLE_QUERY


def test_example_query_matches_dnspython():
    dns_message = pytest.importorskip("dns.message")
    dns_flags = pytest.importorskip("dns.flags")

    ref = dns_message.make_query("example.com", "A")
    ref.id = 0x1234
    ref.flags = dns_flags.RD
    assert ref.to_wire() == EXAMPLE_QUERY


def test_self_pointer_rejected():
    wire = struct.pack("!6H", 1, 0, 1, 0, 0, 0) + b"\xc0\x0c" + struct.pack("!HH", 1, 1)
    with pytest.raises(BadPointer):
        decode_message(wire)


def test_forward_pointer_rejected():
    wire = struct.pack("!6H", 1, 0, 1, 0, 0, 0) + b"\xc0\x20" + struct.pack("!HH", 1, 1) + bytes(40)
    with pytest.raises(BadPointer):
        decode_message(wire)


def test_two_pointer_loop_rejected():
    # Second name points back at the first, which points forward at the second.
    body = b"\xc0\x12" + struct.pack("!HH", 1, 1) + b"\xc0\x0c" + struct.pack("!HH", 1, 1)
    wire = struct.pack("!6H", 1, 0, 2, 0, 0, 0) + body
    with pytest.raises(BadPointer):
        decode_message(wire)


def test_backward_pointer_followed():
    q = b"\x07example\x03com\x00" + struct.pack("!HH", 1, 1)
    answer = b"\xc0\x0c" + struct.pack("!HHIH", 1, 1, 60, 4) + bytes([192, 0, 2, 1])
    wire = struct.pack("!6H", 7, 0x8180, 1, 1, 0, 0) + q + answer
    msg = decode_message(wire)
    assert msg.answers[0].name == DnsName.from_text("example.com")
    assert msg.answers[0].rdata == ipaddress.IPv4Address("192.0.2.1")


def test_truncated_question():
    with pytest.raises(Truncated):
        decode_message(EXAMPLE_QUERY[:-3])


def test_header_too_short():
    with pytest.raises(Truncated):
        decode_message(b"\x00" * 11)


def test_label_limits():
    with pytest.raises(LabelTooLong):
        DnsName((b"a" * 64,))
    DnsName((b"a" * 63,))
    with pytest.raises(NameTooLong):
        DnsName((b"a" * 63,) * 4)  # 4 * 64 + 1 = 257 bytes
    DnsName((b"a" * 63,) * 3 + (b"a" * 61,))  # exactly 255


def test_decoded_name_too_long():
    labels = b"".join(b"\x3f" + b"a" * 63 for _ in range(4)) + b"\x00"
    wire = struct.pack("!6H", 0, 0, 1, 0, 0, 0) + labels + struct.pack("!HH", 1, 1)
    with pytest.raises(NameTooLong):
        decode_message(wire)


def test_name_comparison_ignores_case():
    a, b = DnsName.from_text("Example.COM"), DnsName.from_text("example.com")
    assert a == b and hash(a) == hash(b)
    assert a.canonical() == "example.com"
    # case survives re-encoding
    assert dns_wire.encode_name(a) == b"\x07Example\x03COM\x00"


def test_unknown_rtype_preserved_as_opaque():
    rr = ResourceRecord(DnsName.from_text("x.test"), 99, CLASS_IN, 5, b"\x01\x02\xff")
    msg = DnsMessage(DnsHeader(id=9, qr=True), answers=[rr])
    assert decode_message(encode_message(msg)).answers[0].rdata == b"\x01\x02\xff"


def test_opt_record_passes_through():
    opt = ResourceRecord(DnsName(()), RType.OPT, 1232, 0, b"")
    msg = DnsMessage(DnsHeader(id=3, rd=True), [Question(DnsName.from_text("a.test"))], additionals=[opt])
    wire = encode_message(msg)
    assert decode_message(wire) == msg
    assert encode_message(decode_message(wire)) == wire


# -- NXDOMAIN synthesis ------------------------------------------------------------


def test_nxdomain_echoes_id():
    q = dns_wire.make_query("young.example", msg_id=0x1234)
    assert synthesize_nxdomain(q, 60).header.id == 0x1234


def test_nxdomain_shape():
    q = dns_wire.make_query("young.example", msg_id=77)
    r = synthesize_nxdomain(q, 60)
    assert r.header.qr and r.header.rcode == 3
    assert r.ancount == 0
    assert r.questions == q.questions
    soa = extract_soa(r)
    assert soa.minimum == 60
    assert r.authorities[0].ttl == 60
    # survives the wire
    assert decode_message(encode_message(r)) == r


def test_nxdomain_refuses_response():
    q = dns_wire.make_query("young.example")
    q.header.qr = True
    with pytest.raises(NotAQuery):
        synthesize_nxdomain(q, 60)


# -- SOA extraction ----------------------------------------------------------------


def _soa(serial, owner="evil-example.test"):
    rdata = SoaRdata(
        DnsName.from_text("ns1." + owner), DnsName.from_text("hostmaster." + owner), serial, 7200, 3600, 1209600, 300
    )
    return ResourceRecord(DnsName.from_text(owner), RType.SOA, CLASS_IN, 300, rdata)


def test_extract_soa_absent():
    assert extract_soa(decode_message(EXAMPLE_QUERY)) is None


def test_extract_soa_from_authority():
    # hand-built wire: NXDOMAIN with an authority SOA using a compressed owner name
    q = b"\x03www\x0cevil-example\x04test\x00" + struct.pack("!HH", 1, 1)
    rdata = b"\x03ns1\xc0\x10" + b"\x0ahostmaster\xc0\x10" + struct.pack("!5I", 2017082401, 7200, 3600, 1209600, 300)
    auth = b"\xc0\x10" + struct.pack("!HHIH", 6, 1, 300, len(rdata)) + rdata
    wire = struct.pack("!6H", 5, 0x8183, 1, 0, 1, 0) + q + auth
    soa = extract_soa(decode_message(wire))
    assert soa.serial == 2017082401
    assert soa.mname == DnsName.from_text("ns1.evil-example.test")
    assert soa.rname == DnsName.from_text("hostmaster.evil-example.test")


def test_extract_soa_prefers_answers():
    msg = DnsMessage(DnsHeader(qr=True), answers=[_soa(2017010101)], authorities=[_soa(2017082401)])
    assert extract_soa(decode_message(encode_message(msg))).serial == 2017010101


# -- properties --------------------------------------------------------------------

_label = st.binary(min_size=1, max_size=20).filter(lambda b: b"." not in b)
_names = st.lists(_label, min_size=0, max_size=5).map(lambda ls: DnsName(tuple(ls)))
_u16 = st.integers(0, 0xFFFF)
_u32 = st.integers(0, 0xFFFFFFFF)


@st.composite
def _records(draw):
    name = draw(_names)
    kind = draw(st.sampled_from(["a", "soa", "opaque"]))
    ttl = draw(_u32)
    if kind == "a":
        return ResourceRecord(name, RType.A, CLASS_IN, ttl, ipaddress.IPv4Address(draw(_u32)))
    if kind == "soa":
        rdata = SoaRdata(draw(_names), draw(_names), *(draw(_u32) for _ in range(5)))
        return ResourceRecord(name, RType.SOA, draw(_u16), ttl, rdata)
    rtype = draw(_u16.filter(lambda t: t not in (RType.A, RType.SOA)))
    return ResourceRecord(name, rtype, draw(_u16), ttl, draw(st.binary(max_size=40)))


@st.composite
def _messages(draw):
    header = DnsHeader(
        id=draw(_u16),
        qr=draw(st.booleans()),
        opcode=draw(st.integers(0, 15)),
        aa=draw(st.booleans()),
        tc=draw(st.booleans()),
        rd=draw(st.booleans()),
        ra=draw(st.booleans()),
        z=draw(st.integers(0, 7)),
        rcode=draw(st.integers(0, 15)),
    )
    questions = draw(st.lists(st.builds(Question, _names, _u16, _u16), max_size=3))
    sections = [draw(st.lists(_records(), max_size=3)) for _ in range(3)]
    return DnsMessage(header, questions, *sections)


@settings(max_examples=1000, deadline=None)
@given(_messages())
def test_round_trip(msg):
    wire = encode_message(msg)
    back = decode_message(wire)
    assert back == msg
    assert encode_message(back) == wire


@settings(max_examples=2000, deadline=None)
@given(st.binary(max_size=80))
def test_random_bytes_never_crash(data):
    try:
        decode_message(data)
    except WireError:
        pass


def test_mutated_messages_fail_typed():
    rng = random.Random(5)
    base = encode_message(DnsMessage(DnsHeader(id=1, qr=True), [Question(DnsName.from_text("a.b.test"))],
                                     answers=[_soa(2017082401, "b.test")]))
    for _ in range(3000):
        wire = bytearray(base)
        for _ in range(rng.randint(1, 4)):
            wire[rng.randrange(len(wire))] = rng.randrange(256)
        cut = rng.randint(0, len(wire))
        try:
            decode_message(bytes(wire[:cut]))
        except WireError:
            pass

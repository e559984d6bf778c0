import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inasim.core import (
    HEADER_BYTES,
    MAX_FANIN,
    FanInError,
    Packet,
    PacketHeader,
    PacketKind,
    Payload,
    check_fanin,
    is_complete,
    payload_add,
    popcount,
    reminder,
    worker_mask,
)

contribs = st.dictionaries(st.integers(0, 40), st.integers(1, 3), max_size=8)
payloads = contribs.map(Payload.from_contributions)


@given(payloads, payloads, payloads)
def test_payload_add_associative(a, b, c):
    assert (a + b) + c == a + (b + c)


@given(payloads, payloads)
def test_payload_add_commutative(a, b):
    assert a + b == b + a


@given(contribs, contribs)
@settings(max_examples=200)
def test_payload_add_matches_counter_sum(x, y):
    # oracle: plain multiset sum of the two contribution maps
    expect = dict(x)
    for w, m in y.items():
        expect[w] = expect.get(w, 0) + m
    got = Payload.from_contributions(x) + Payload.from_contributions(y)
    assert got.contributions == expect


def test_disjoint_add_stays_on_fast_path():
    p = Payload.single(0) + Payload.single(3)
    assert p.extra is None
    assert p.contributions == {0: 1, 3: 1}


def test_overlap_records_multiplicity():
    p = Payload.single(2) + Payload.single(2)
    assert p.has_duplicates()
    assert p.contributions == {2: 2}
    assert not is_complete(p, [2])


def test_add_keeps_larger_byte_size():
    assert payload_add(Payload(1, None, 180), Payload(2, None, 306)).byte_size == 306


def test_is_complete():
    full = Payload.from_contributions({0: 1, 1: 1, 2: 1})
    assert is_complete(full, [0, 1, 2])
    assert not is_complete(full, [0, 1])
    assert not is_complete(Payload.single(0), [0, 1])
    with pytest.raises(ValueError):
        is_complete(full, [])


def test_from_contributions_rejects_nonpositive():
    with pytest.raises(ValueError):
        Payload.from_contributions({1: 0})


def test_worker_mask_and_popcount():
    m = worker_mask([0, 5, 31])
    assert m == (1 | 1 << 5 | 1 << 31)
    assert popcount(m) == 3


@pytest.mark.parametrize("fanin", [1, 8, MAX_FANIN])
def test_fanin_within_bitmap(fanin):
    check_fanin(fanin)


@pytest.mark.parametrize("fanin", [0, 33, 40])
def test_fanin_rejected(fanin):
    with pytest.raises(FanInError, match="32-bit bitmap"):
        check_fanin(fanin)


BOUNDARY = [
    PacketHeader(PacketKind.GRADIENT, 0, 0),
    PacketHeader(PacketKind.RETRANSMIT, 2**32 - 1, 2**32 - 1, 255, 2**32 - 1, 2**32 - 1,
                 2**32 - 1, 1),
    PacketHeader(PacketKind.RESULT, 1, 2**31, 128, 1, 1 << 31, 17129, 1),
]


@pytest.mark.parametrize("hdr", BOUNDARY)
def test_header_round_trip(hdr):
    data = hdr.encode()
    assert len(data) == HEADER_BYTES
    assert PacketHeader.decode(data) == hdr


@pytest.mark.parametrize("field,value", [("priority", 256), ("job", 2**32), ("level", 2),
                                         ("seq", -1)])
def test_header_range_checked(field, value):
    kw = {"kind": PacketKind.GRADIENT, "job": 0, "seq": 0, field: value}
    with pytest.raises(ValueError, match=field):
        PacketHeader(**kw)


def test_reminder_fields_zero_except_identity():
    r = reminder(9, 1234, src=1, dst=2)
    h = r.header
    assert (h.kind, h.job, h.seq) == (PacketKind.REMINDER, 9, 1234)
    assert (h.priority, h.bitmap0, h.bitmap1, h.agg_index, h.level) == (0, 0, 0, 0, 0)
    assert r.payload is None


def test_packet_header_view():
    p = Packet(PacketKind.GRADIENT, 3, 4, 200, bitmap0=2, agg_index=11)
    assert p.header == PacketHeader(PacketKind.GRADIENT, 3, 4, 200, 2, 0, 11, 0)

import ipaddress

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mihnemo.nemo import (
    Address,
    AddressRole,
    BindingInvariantError,
    ChecksumError,
    HomeAgent,
    MalformedMessage,
    MobileRouterAgent,
    Packet,
    ReplyCode,
    TruncatedMessage,
    Tunnel,
    TunnelError,
    TunnelStatus,
    TunnelSwitchReply,
    TunnelSwitchRequest,
    WrongMhType,
    decapsulate,
    decapsulate_bytes,
    decode_mh,
    encapsulate,
    encapsulate_bytes,
    encode_mh,
    internet_checksum,
)


def ip(text):
    return int(ipaddress.IPv6Address(text))


HOA = ip("2001:db8:4::1")
HA = ip("2001:db8:4::ffff")
COA1 = ip("2001:db8:1::100")
COA2 = ip("2001:db8:2::100")

GOLDEN_REQUEST = bytes.fromhex(
    "3b0709002ec0010020010db80004000000000000000000010001000220010db800010000000000000000010020010db800020000000000000000010001020000"
)
GOLDEN_REPLY = bytes.fromhex("3b010a00b9fe01000000000000000000")


def golden_request():
    return TunnelSwitchRequest(sequence_id=1, hoa=HOA, bid_active=1, bid_target=2,
                               coa_active=COA1, coa_target=COA2)


def test_request_golden_bytes():
    assert encode_mh(golden_request()) == GOLDEN_REQUEST
    assert decode_mh(GOLDEN_REQUEST) == golden_request()


def test_reply_golden_bytes():
    assert encode_mh(TunnelSwitchReply(1, ReplyCode.ACCEPTED)) == GOLDEN_REPLY
    assert decode_mh(GOLDEN_REPLY) == TunnelSwitchReply(1, ReplyCode.ACCEPTED)


def test_checksum_validates_to_zero():
    assert internet_checksum(GOLDEN_REQUEST) == 0


def test_every_single_bit_flip_is_rejected_as_checksum_error():
    for byte in range(len(GOLDEN_REQUEST)):
        for bit in range(8):
            corrupted = bytearray(GOLDEN_REQUEST)
            corrupted[byte] ^= 1 << bit
            with pytest.raises(ChecksumError):
                decode_mh(bytes(corrupted))


@pytest.mark.parametrize("cut", [1, 3, 8, 40, 60])
def test_truncated_input(cut):
    with pytest.raises(TruncatedMessage):
        decode_mh(GOLDEN_REQUEST[:-cut])


def test_wrong_mh_type_with_valid_checksum():
    raw = bytearray(GOLDEN_REPLY)
    raw[2] = 5
    raw[4:6] = b"\x00\x00"
    raw[4:6] = internet_checksum(bytes(raw)).to_bytes(2, "big")
    with pytest.raises(WrongMhType):
        decode_mh(bytes(raw))


def test_header_length_mismatch_is_malformed():
    raw = bytearray(GOLDEN_REPLY) + bytes(8)
    raw[4:6] = b"\x00\x00"
    raw[4:6] = internet_checksum(bytes(raw)).to_bytes(2, "big")
    with pytest.raises(MalformedMessage):
        decode_mh(bytes(raw))


def test_request_fields_validated():
    with pytest.raises(ValueError):
        TunnelSwitchRequest(1, HOA, 3, 3, COA1, COA2)
    with pytest.raises(ValueError):
        TunnelSwitchRequest(256, HOA, 1, 2, COA1, COA2)
    with pytest.raises(ValueError):
        TunnelSwitchRequest(1, HOA, 1, 2, COA1, COA2, options=((1, b"xx"),))


u128 = st.integers(0, (1 << 128) - 1)
options = st.lists(st.tuples(st.integers(2, 255), st.binary(max_size=20)), max_size=4).map(tuple)


@st.composite
def requests(draw):
    bid_a = draw(st.integers(0, 65535))
    bid_t = draw(st.integers(0, 65535).filter(lambda b: b != bid_a))
    return TunnelSwitchRequest(
        sequence_id=draw(st.integers(0, 255)), hoa=draw(u128), bid_active=bid_a, bid_target=bid_t,
        coa_active=draw(u128), coa_target=draw(u128), time=draw(st.integers(0, 255)),
        options=draw(options), payload_proto=draw(st.integers(0, 255)), reserved=draw(st.integers(0, 255)),
    )


replies = st.builds(TunnelSwitchReply, st.integers(0, 255), st.sampled_from(list(ReplyCode)),
                    st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))


@settings(max_examples=300)
@given(st.one_of(requests(), replies))
def test_round_trip(msg):
    raw = encode_mh(msg)
    assert len(raw) % 8 == 0
    assert decode_mh(raw) == msg


def fresh_ha():
    ha = HomeAgent(HA)
    ha.register(HOA, 1, COA1, TunnelStatus.ACTIVE, 30.0)
    return ha


def test_first_registration_is_active():
    ha = fresh_ha()
    assert [e.to_record()["tunnel_status"] for e in ha.entries(HOA)] == ["active"]
    assert ha.dump()[0]["coa"] == "2001:db8:1::100"


def test_standby_registration_keeps_single_active():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    rows = [(e.bid, e.coa, e.tunnel_status) for e in ha.entries(HOA)]
    assert rows == [(1, COA1, TunnelStatus.ACTIVE), (2, COA2, TunnelStatus.STANDBY)]


def test_duplicate_bid_overwrites():
    ha = fresh_ha()
    ha.register(HOA, 1, COA2, TunnelStatus.ACTIVE, 30.0)
    assert len(ha.entries(HOA)) == 1
    assert ha.active(HOA).coa == COA2


def test_active_registration_demotes_previous():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.ACTIVE, 30.0)
    assert ha.active(HOA).bid == 2
    assert ha.cache[(HOA, 1)].tunnel_status is TunnelStatus.STANDBY


def test_switch_flips_status():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    reply = ha.handle_switch_request(TunnelSwitchRequest(1, HOA, 1, 2, COA1, COA2))
    assert reply.replay_code is ReplyCode.ACCEPTED and reply.sequence_id == 1
    assert ha.active(HOA).bid == 2
    assert ha.cache[(HOA, 1)].tunnel_status is TunnelStatus.STANDBY


def test_switch_to_unknown_bid():
    ha = fresh_ha()
    before = ha.dump()
    reply = ha.handle_switch_request(TunnelSwitchRequest(1, HOA, 1, 7, COA1, COA2))
    assert reply.replay_code is ReplyCode.UNKNOWN_BINDING
    assert ha.dump() == before


def test_switch_to_already_active():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    reply = ha.handle_switch_request(TunnelSwitchRequest(1, HOA, 2, 1, COA2, COA1))
    assert reply.replay_code is ReplyCode.ALREADY_ACTIVE


def test_replayed_switch_is_stale():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    req = TunnelSwitchRequest(5, HOA, 1, 2, COA1, COA2)
    assert ha.handle_switch_request(req).replay_code is ReplyCode.ACCEPTED
    before = ha.dump()
    assert ha.handle_switch_request(req).replay_code is ReplyCode.STALE_SEQUENCE
    assert ha.dump() == before


def test_sequence_window_wraps():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    ha.handle_switch_request(TunnelSwitchRequest(250, HOA, 1, 2, COA1, COA2))
    assert ha.handle_switch_request(TunnelSwitchRequest(3, HOA, 2, 1, COA2, COA1)).replay_code is ReplyCode.ACCEPTED
    assert ha.handle_switch_request(TunnelSwitchRequest(200, HOA, 1, 2, COA1, COA2)).replay_code is ReplyCode.STALE_SEQUENCE


def test_deregistering_active_promotes_remaining():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    ha.deregister(HOA, 1)
    assert ha.active(HOA).bid == 2


def test_purge_expired_entries():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 10.0)
    ha.purge(10.0)
    assert [e.bid for e in ha.entries(HOA)] == [1]


def test_invariant_violation_detected():
    ha = fresh_ha()
    ha.register(HOA, 2, COA2, TunnelStatus.STANDBY, 30.0)
    ha.cache[(HOA, 2)].tunnel_status = TunnelStatus.ACTIVE
    with pytest.raises(BindingInvariantError):
        ha.check_invariant()


@given(st.lists(st.tuples(st.sampled_from(["reg_a", "reg_s", "dereg", "switch"]),
                          st.integers(1, 4), st.integers(1, 4), st.integers(0, 255)), max_size=60))
def test_single_active_after_any_mutation_sequence(ops):
    ha = fresh_ha()
    coas = {b: ip(f"2001:db8:{b}::100") for b in range(1, 5)}
    for op, b1, b2, seq in ops:
        if op == "reg_a":
            ha.register(HOA, b1, coas[b1], TunnelStatus.ACTIVE, 30.0)
        elif op == "reg_s":
            ha.register(HOA, b1, coas[b1], TunnelStatus.STANDBY, 30.0)
        elif op == "dereg" and len(ha.entries(HOA)) > 1:
            ha.deregister(HOA, b1)
        elif op == "switch" and b1 != b2:
            ha.handle_switch_request(TunnelSwitchRequest(seq, HOA, b1, b2, coas[b1], coas[b2]))
        ha.check_invariant()


def test_encapsulation_round_trip_and_overhead():
    inner = Packet(src=ip("2001:db8:3::1"), dst=HOA, size=768, seq=4)
    outer = encapsulate(inner, Tunnel(HA, COA2))
    assert outer.dst == COA2 and outer.src == HA
    assert outer.size == 768 + 40
    assert decapsulate(outer, {COA1, COA2}) == inner


def test_decapsulation_rejects_unregistered_endpoint():
    outer = encapsulate(Packet(src=1, dst=HOA, size=10), Tunnel(HA, COA2))
    with pytest.raises(TunnelError):
        decapsulate(outer, {COA1})


def test_in_flight_packet_to_standby_coa_is_accepted():
    mr = MobileRouterAgent(HOA, HA)
    mr.bindings = {1: (COA1, TunnelStatus.STANDBY), 2: (COA2, TunnelStatus.ACTIVE)}
    outer = encapsulate(Packet(src=1, dst=HOA, size=10), Tunnel(HA, COA1))
    assert decapsulate(outer, mr.local_addresses()).dst == HOA


@given(st.binary(max_size=200))
def test_byte_encapsulation_round_trip(payload):
    wire = encapsulate_bytes(payload, Tunnel(HA, COA1))
    assert len(wire) == len(payload) + 40
    assert decapsulate_bytes(wire, {COA1}) == payload


def test_byte_decapsulation_rejects_foreign_destination():
    with pytest.raises(TunnelError):
        decapsulate_bytes(encapsulate_bytes(b"abc", Tunnel(HA, COA1)), {COA2})


def test_address_helpers():
    a = Address.from_prefix(0x20010DB800020000, 0x100, AddressRole.COA)
    assert str(a) == "2001:db8:2::100"
    assert a.prefix == 0x20010DB800020000
    with pytest.raises(ValueError):
        Address(0)


def test_mr_agent_sa_paid_once_per_coa():
    mr = MobileRouterAgent(HOA, HA, t_sa=0.05)
    assert mr.sa_delay(COA2) == 0.05
    mr.binding_update(2, COA2, TunnelStatus.STANDBY)
    assert mr.sa_delay(COA2) == 0.0

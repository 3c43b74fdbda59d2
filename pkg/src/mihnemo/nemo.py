"""NEMO basic support with multiple care-of addresses and tunnel switching.

Wire layout of the tunnel-switch mobility headers (network byte order)::

    0       1       2       3       4       5       6       7
    +-------+-------+-------+-------+-------+-------+-------+-------+
    | proto |hdr len|MH type| rsvd  |   checksum    |  seq  | time  |
    +-------+-------+-------+-------+-------+-------+-------+-------+
    request:  HoA(16) | BID active(2) | BID target(2) | CoA active(16)
              | CoA target(16) | options (type, len, value)... | padding
    reply:    replay code(1) | 7 zero bytes

Header Len counts 8-octet units after the first eight.  The checksum is the
16-bit one's complement of the one's complement sum of the whole message with
the checksum field zeroed.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, field

MH_TUNNEL_SWITCH_REQUEST = 9
MH_TUNNEL_SWITCH_REPLY = 10
IPPROTO_NONE = 59
IPPROTO_IPV6 = 41
IPV6_HEADER_LEN = 40
OPT_PAD1 = 0
OPT_PADN = 1

_REQ_FIXED = struct.Struct("!BBBBHBB16sHH16s16s")
_HDR = struct.Struct("!BBBBHBB")
REQUEST_MIN_LEN = 64
REPLY_LEN = 16


class AddressRole(str, enum.Enum):
    HOA = "HoA"
    COA = "CoA"
    HA = "HAaddr"
    CN = "CNaddr"


@dataclass(frozen=True)
class Address:
    value: int
    role: AddressRole = AddressRole.COA

    def __post_init__(self) -> None:
        if not 0 < self.value < (1 << 128):
            raise ValueError("address must be a non-zero 128-bit value")

    @classmethod
    def from_prefix(cls, prefix: int, interface_id: int, role: AddressRole = AddressRole.COA) -> "Address":
        """Address built from a 64-bit prefix and a 64-bit interface identifier."""
        return cls(((prefix & 0xFFFFFFFFFFFFFFFF) << 64) | (interface_id & 0xFFFFFFFFFFFFFFFF), role)

    @classmethod
    def parse(cls, text: str, role: AddressRole = AddressRole.COA) -> "Address":
        return cls(int(ipaddress.IPv6Address(text)), role)

    @property
    def prefix(self) -> int:
        return self.value >> 64

    def packed(self) -> bytes:
        return self.value.to_bytes(16, "big")

    def __str__(self) -> str:
        return str(ipaddress.IPv6Address(self.value))


class TunnelStatus(str, enum.Enum):
    ACTIVE = "active"
    STANDBY = "standby"


class ReplyCode(enum.IntEnum):
    ACCEPTED = 0
    UNKNOWN_BINDING = 1
    ALREADY_ACTIVE = 2
    STALE_SEQUENCE = 3


class BindingInvariantError(AssertionError):
    pass


class MhDecodeError(ValueError):
    pass


class TruncatedMessage(MhDecodeError):
    pass


class ChecksumError(MhDecodeError):
    pass


class WrongMhType(MhDecodeError):
    pass


class MalformedMessage(MhDecodeError):
    pass


class TunnelError(ValueError):
    pass


@dataclass(frozen=True)
class TunnelSwitchRequest:
    sequence_id: int
    hoa: int
    bid_active: int
    bid_target: int
    coa_active: int
    coa_target: int
    time: int = 0
    options: tuple[tuple[int, bytes], ...] = ()
    payload_proto: int = IPPROTO_NONE
    reserved: int = 0

    mh_type = MH_TUNNEL_SWITCH_REQUEST

    def __post_init__(self) -> None:
        if self.bid_active == self.bid_target:
            raise ValueError("active and target binding ids must differ")
        _check_width("sequence_id", self.sequence_id, 8)
        _check_width("time", self.time, 8)
        _check_width("payload_proto", self.payload_proto, 8)
        _check_width("reserved", self.reserved, 8)
        for name in ("bid_active", "bid_target"):
            _check_width(name, getattr(self, name), 16)
        for name in ("hoa", "coa_active", "coa_target"):
            _check_width(name, getattr(self, name), 128)
        for opt_type, value in self.options:
            if opt_type in (OPT_PAD1, OPT_PADN):
                raise ValueError("padding options are added by the encoder")
            _check_width("option type", opt_type, 8)
            if len(value) > 255:
                raise ValueError("option value longer than 255 bytes")


@dataclass(frozen=True)
class TunnelSwitchReply:
    sequence_id: int
    replay_code: ReplyCode
    time: int = 0
    payload_proto: int = IPPROTO_NONE
    reserved: int = 0

    mh_type = MH_TUNNEL_SWITCH_REPLY

    def __post_init__(self) -> None:
        _check_width("sequence_id", self.sequence_id, 8)
        _check_width("time", self.time, 8)
        _check_width("replay_code", int(self.replay_code), 8)


def _check_width(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name} does not fit in {bits} bits: {value}")


def internet_checksum(data: bytes) -> int:
    """One's complement of the 16-bit one's complement sum of ``data``."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _pad_options(body: bytes) -> bytes:
    missing = -len(body) % 8
    if missing == 1:
        return body + bytes([OPT_PAD1])
    if missing >= 2:
        return body + bytes([OPT_PADN, missing - 2]) + bytes(missing - 2)
    return body


def encode_mh(msg: TunnelSwitchRequest | TunnelSwitchReply) -> bytes:
    if isinstance(msg, TunnelSwitchRequest):
        opts = b"".join(bytes([t, len(v)]) + v for t, v in msg.options)
        fixed_len = _REQ_FIXED.size
        body = _pad_options(bytes(fixed_len) + opts)
        header_len = len(body) // 8 - 1
        fixed = _REQ_FIXED.pack(
            msg.payload_proto, header_len, MH_TUNNEL_SWITCH_REQUEST, msg.reserved, 0,
            msg.sequence_id, msg.time, msg.hoa.to_bytes(16, "big"), msg.bid_active, msg.bid_target,
            msg.coa_active.to_bytes(16, "big"), msg.coa_target.to_bytes(16, "big"),
        )
        raw = bytearray(fixed + body[fixed_len:])
    elif isinstance(msg, TunnelSwitchReply):
        raw = bytearray(_HDR.pack(msg.payload_proto, REPLY_LEN // 8 - 1, MH_TUNNEL_SWITCH_REPLY,
                                  msg.reserved, 0, msg.sequence_id, msg.time))
        raw += bytes([int(msg.replay_code)]) + bytes(7)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    struct.pack_into("!H", raw, 4, internet_checksum(bytes(raw)))
    return bytes(raw)


def decode_mh(data: bytes) -> TunnelSwitchRequest | TunnelSwitchReply:
    """Parse a tunnel-switch mobility header.

    Checks run in a fixed order: length (TruncatedMessage), checksum
    (ChecksumError), MH type (WrongMhType), then structure (MalformedMessage).
    """
    data = bytes(data)
    if len(data) < _HDR.size or len(data) % 8:
        raise TruncatedMessage(f"{len(data)} bytes is not a whole mobility header")
    mh_type = data[2]
    if mh_type == MH_TUNNEL_SWITCH_REQUEST and len(data) < REQUEST_MIN_LEN:
        raise TruncatedMessage(f"request needs at least {REQUEST_MIN_LEN} bytes, got {len(data)}")
    if internet_checksum(data) != 0:
        raise ChecksumError("mobility header checksum mismatch")
    if mh_type not in (MH_TUNNEL_SWITCH_REQUEST, MH_TUNNEL_SWITCH_REPLY):
        raise WrongMhType(f"unexpected MH type {mh_type}")
    proto, header_len, _, reserved, _, seq, time = _HDR.unpack_from(data)
    if (header_len + 1) * 8 != len(data):
        raise MalformedMessage("header length does not match message size")
    if mh_type == MH_TUNNEL_SWITCH_REPLY:
        if len(data) != REPLY_LEN or any(data[9:]):
            raise MalformedMessage("reply must be 16 bytes with zero padding")
        try:
            code = ReplyCode(data[8])
        except ValueError as exc:
            raise MalformedMessage(f"unknown replay code {data[8]}") from exc
        return TunnelSwitchReply(seq, code, time, proto, reserved)

    fields = _REQ_FIXED.unpack_from(data)
    hoa, bid_a, bid_t, coa_a, coa_t = fields[7:]
    options: list[tuple[int, bytes]] = []
    pos = _REQ_FIXED.size
    while pos < len(data):
        opt_type = data[pos]
        if opt_type == OPT_PAD1:
            pos += 1
            continue
        if pos + 2 > len(data):
            raise MalformedMessage("option header runs past the message")
        length = data[pos + 1]
        end = pos + 2 + length
        if end > len(data):
            raise MalformedMessage("option value runs past the message")
        if opt_type == OPT_PADN:
            if any(data[pos + 2:end]):
                raise MalformedMessage("non-zero PadN content")
        else:
            options.append((opt_type, data[pos + 2:end]))
        pos = end
    try:
        return TunnelSwitchRequest(
            sequence_id=seq, hoa=int.from_bytes(hoa, "big"), bid_active=bid_a, bid_target=bid_t,
            coa_active=int.from_bytes(coa_a, "big"), coa_target=int.from_bytes(coa_t, "big"),
            time=time, options=tuple(options), payload_proto=proto, reserved=reserved,
        )
    except ValueError as exc:
        raise MalformedMessage(str(exc)) from exc


@dataclass
class BindingEntry:
    hoa: int
    bid: int
    coa: int
    tunnel_status: TunnelStatus
    expire_time: float

    def to_record(self) -> dict:
        return {
            "hoa": str(ipaddress.IPv6Address(self.hoa)),
            "bid": self.bid,
            "coa": str(ipaddress.IPv6Address(self.coa)),
            "tunnel_status": self.tunnel_status.value,
            "expire_time": round(self.expire_time, 9),
        }


@dataclass(frozen=True)
class BindingUpdate:
    hoa: int
    bid: int
    coa: int
    status: TunnelStatus
    sequence: int
    lifetime: float
    deregister: bool = False


@dataclass(frozen=True)
class BindingAck:
    hoa: int
    bid: int
    sequence: int
    accepted: bool


def _seq_newer(seq: int, last: int | None) -> bool:
    if last is None:
        return True
    return 0 < (seq - last) % 256 < 128


@dataclass
class HomeAgent:
    """Binding cache with one active binding per HoA."""

    address: int
    cache: dict[tuple[int, int], BindingEntry] = field(default_factory=dict)
    last_switch_seq: dict[int, int] = field(default_factory=dict)
    mutation_count: int = 0

    def entries(self, hoa: int) -> list[BindingEntry]:
        return sorted((e for (h, _), e in self.cache.items() if h == hoa), key=lambda e: e.bid)

    def active(self, hoa: int) -> BindingEntry | None:
        for e in self.entries(hoa):
            if e.tunnel_status is TunnelStatus.ACTIVE:
                return e
        return None

    def check_invariant(self) -> None:
        for hoa in {h for h, _ in self.cache}:
            n_active = sum(e.tunnel_status is TunnelStatus.ACTIVE for e in self.entries(hoa))
            if n_active != 1:
                raise BindingInvariantError(f"HoA {hoa:#x} has {n_active} active bindings")

    def _mutated(self) -> None:
        self.mutation_count += 1
        self.check_invariant()

    def register(self, hoa: int, bid: int, coa: int, status: TunnelStatus, expire_time: float) -> BindingEntry:
        current = self.active(hoa)
        if status is TunnelStatus.STANDBY and (current is None or current.bid == bid):
            # never leave a HoA without an active binding
            status = TunnelStatus.ACTIVE
        if status is TunnelStatus.ACTIVE and current is not None and current.bid != bid:
            current.tunnel_status = TunnelStatus.STANDBY
        entry = BindingEntry(hoa, bid, coa, status, expire_time)
        self.cache[(hoa, bid)] = entry
        self._mutated()
        return entry

    def deregister(self, hoa: int, bid: int) -> bool:
        entry = self.cache.pop((hoa, bid), None)
        if entry is None:
            return False
        rest = self.entries(hoa)
        if entry.tunnel_status is TunnelStatus.ACTIVE and rest:
            rest[-1].tunnel_status = TunnelStatus.ACTIVE
        self._mutated()
        return True

    def purge(self, now: float) -> list[BindingEntry]:
        expired = [e for e in self.cache.values() if e.expire_time <= now]
        for e in expired:
            self.deregister(e.hoa, e.bid)
        return expired

    def handle_binding_update(self, bu: BindingUpdate, now: float) -> BindingAck:
        if bu.deregister:
            self.deregister(bu.hoa, bu.bid)
        else:
            self.register(bu.hoa, bu.bid, bu.coa, bu.status, now + bu.lifetime)
        return BindingAck(bu.hoa, bu.bid, bu.sequence, True)

    def handle_switch_request(self, req: TunnelSwitchRequest) -> TunnelSwitchReply:
        """Validate and apply a tunnel switch as one indivisible cache mutation."""
        def reply(code: ReplyCode) -> TunnelSwitchReply:
            return TunnelSwitchReply(req.sequence_id, code, req.time)

        if not _seq_newer(req.sequence_id, self.last_switch_seq.get(req.hoa)):
            return reply(ReplyCode.STALE_SEQUENCE)
        old = self.cache.get((req.hoa, req.bid_active))
        new = self.cache.get((req.hoa, req.bid_target))
        if old is None or new is None:
            return reply(ReplyCode.UNKNOWN_BINDING)
        if new.tunnel_status is TunnelStatus.ACTIVE:
            return reply(ReplyCode.ALREADY_ACTIVE)
        for e in self.entries(req.hoa):
            e.tunnel_status = TunnelStatus.STANDBY
        new.tunnel_status = TunnelStatus.ACTIVE
        self.last_switch_seq[req.hoa] = req.sequence_id
        self._mutated()
        return reply(ReplyCode.ACCEPTED)

    def dump(self) -> list[dict]:
        return [self.cache[k].to_record() for k in sorted(self.cache)]


@dataclass(frozen=True)
class Tunnel:
    ha: int
    coa: int


@dataclass(frozen=True)
class Packet:
    src: int
    dst: int
    size: int
    seq: int = -1
    kind: str = "data"
    emit_time: float = 0.0
    inner: "Packet | None" = None
    payload: object = None


def encapsulate(pkt: Packet, tunnel: Tunnel, downstream: bool = True) -> Packet:
    """Wrap ``pkt`` in one outer IPv6 header between the HA and the CoA."""
    src, dst = (tunnel.ha, tunnel.coa) if downstream else (tunnel.coa, tunnel.ha)
    return Packet(src=src, dst=dst, size=pkt.size + IPV6_HEADER_LEN, seq=pkt.seq, kind=pkt.kind,
                  emit_time=pkt.emit_time, inner=pkt)


def decapsulate(pkt: Packet, accepted: set[int] | frozenset[int]) -> Packet:
    if pkt.inner is None:
        raise TunnelError("packet is not encapsulated")
    if pkt.dst not in accepted:
        raise TunnelError("outer destination is not a registered tunnel endpoint")
    return pkt.inner


def ipv6_header(src: int, dst: int, payload_len: int, next_header: int, hop_limit: int = 64) -> bytes:
    return struct.pack("!IHBB16s16s", 6 << 28, payload_len, next_header, hop_limit,
                       src.to_bytes(16, "big"), dst.to_bytes(16, "big"))


def encapsulate_bytes(inner: bytes, tunnel: Tunnel, downstream: bool = True) -> bytes:
    src, dst = (tunnel.ha, tunnel.coa) if downstream else (tunnel.coa, tunnel.ha)
    return ipv6_header(src, dst, len(inner), IPPROTO_IPV6) + inner


def decapsulate_bytes(data: bytes, accepted: set[int] | frozenset[int]) -> bytes:
    if len(data) < IPV6_HEADER_LEN:
        raise TunnelError("packet shorter than an IPv6 header")
    vtf, payload_len, next_header, _, _, dst = struct.unpack_from("!IHBB16s16s", data)
    if vtf >> 28 != 6 or next_header != IPPROTO_IPV6:
        raise TunnelError("not an IPv6-in-IPv6 packet")
    if int.from_bytes(dst, "big") not in accepted:
        raise TunnelError("outer destination is not a registered tunnel endpoint")
    inner = data[IPV6_HEADER_LEN:]
    if len(inner) != payload_len:
        raise TunnelError("outer payload length mismatch")
    return inner


@dataclass
class MobileRouterAgent:
    """MR-side NEMO state: own bindings, sequence numbers and IPsec contact history."""

    hoa: int
    ha: int
    t_sa: float = 0.05
    lifetime: float = 30.0
    bindings: dict[int, tuple[int, TunnelStatus]] = field(default_factory=dict)
    secured_coas: set[int] = field(default_factory=set)
    bu_sequence: int = 0
    switch_sequence: int = 0

    def sa_delay(self, coa: int) -> float:
        """IPsec set-up cost paid once per CoA."""
        return 0.0 if coa in self.secured_coas else self.t_sa

    def binding_update(self, bid: int, coa: int, status: TunnelStatus, deregister: bool = False) -> BindingUpdate:
        self.secured_coas.add(coa)
        self.bu_sequence = (self.bu_sequence + 1) % 65536
        return BindingUpdate(self.hoa, bid, coa, status, self.bu_sequence, self.lifetime, deregister)

    def switch_request(self, bid_active: int, bid_target: int, time_units: int = 0) -> TunnelSwitchRequest:
        self.switch_sequence = (self.switch_sequence + 1) % 256
        coa_a = self.bindings[bid_active][0]
        coa_t = self.bindings[bid_target][0]
        return TunnelSwitchRequest(self.switch_sequence, self.hoa, bid_active, bid_target,
                                   coa_a, coa_t, time=time_units & 0xFF)

    def local_addresses(self) -> frozenset[int]:
        return frozenset({self.hoa} | {coa for coa, _ in self.bindings.values()})

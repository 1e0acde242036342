"""IPv6, extension header, ICMPv6 and UDP wire formats (RFC 8200, RFC 4443).

Everything here works on bytes starting at the IPv6 header; link-layer
framing belongs to the runner.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from ipaddress import IPv6Address
from typing import Sequence, Union

from .checksum import ODD, PseudoHeader, internet_checksum

NH_HOPOPTS = 0
NH_TCP = 6
NH_UDP = 17
NH_ROUTING = 43
NH_FRAGMENT = 44
NH_ESP = 50
NH_AH = 51
NH_ICMPV6 = 58
NH_NONE = 59
NH_DSTOPTS = 60

# extension headers using the "(len + 1) * 8 octets" length rule
GENERIC_EXT = {NH_HOPOPTS, NH_ROUTING, NH_DSTOPTS, 135, 139, 140, 253, 254}

ICMPV6_PARAM_PROBLEM = 4
ICMPV6_ECHO_REQUEST = 128
ICMPV6_ECHO_REPLY = 129

IPV6_HEADER_LEN = 40
MAX_FRAME = 40 + 65535

Frame = bytes


class WireError(ValueError):
    pass


class ChainBroken(WireError):
    pass


class Oversize(WireError):
    pass


class OffsetOverflow(WireError):
    pass


class NonFinalUnaligned(WireError):
    pass


class Truncated(WireError):
    pass


class MalformedChain(WireError):
    pass


@dataclass(frozen=True)
class Ipv6Header:
    src: IPv6Address
    dst: IPv6Address
    next_header: int = NH_ICMPV6
    hop_limit: int = 64
    traffic_class: int = 0
    flow_label: int = 0
    # derived on serialization; kept for inspection of parsed frames
    payload_length: int | None = field(default=None, compare=False)

    version = 6

    def __post_init__(self) -> None:
        object.__setattr__(self, "src", IPv6Address(self.src))
        object.__setattr__(self, "dst", IPv6Address(self.dst))
        if not 0 <= self.flow_label < 1 << 20:
            raise ValueError("flow label is 20 bits")

    def pack(self, payload_length: int) -> bytes:
        first = (6 << 28) | (self.traffic_class << 20) | self.flow_label
        return struct.pack("!IHBB", first, payload_length, self.next_header, self.hop_limit) + \
            self.src.packed + self.dst.packed

    @classmethod
    def unpack(cls, data: bytes) -> Ipv6Header:
        if len(data) < IPV6_HEADER_LEN:
            raise Truncated(f"{len(data)} bytes is shorter than an IPv6 header")
        first, plen, nh, hlim = struct.unpack("!IHBB", data[:8])
        if first >> 28 != 6:
            raise WireError(f"IP version {first >> 28}, expected 6")
        return cls(
            src=IPv6Address(data[8:24]),
            dst=IPv6Address(data[24:40]),
            next_header=nh,
            hop_limit=hlim,
            traffic_class=(first >> 20) & 0xFF,
            flow_label=first & 0xFFFFF,
            payload_length=plen,
        )


@dataclass(frozen=True)
class FragmentHeader:
    next_header: int
    offset: int
    m_flag: bool
    identification: int
    reserved: int = 0
    res2: int = 0

    kind = NH_FRAGMENT

    def pack(self) -> bytes:
        if not 0 <= self.offset < 1 << 13:
            raise OffsetOverflow(f"fragment offset {self.offset} does not fit 13 bits")
        word = (self.offset << 3) | (self.res2 << 1) | int(self.m_flag)
        return struct.pack("!BBHI", self.next_header, self.reserved, word, self.identification)

    @classmethod
    def unpack(cls, data: bytes) -> FragmentHeader:
        nh, reserved, word, ident = struct.unpack("!BBHI", data[:8])
        return cls(nh, word >> 3, bool(word & 1), ident, reserved, (word >> 1) & 3)


@dataclass(frozen=True)
class ExtHeader:
    """Any extension header other than Fragment, kept as raw option bytes.

    ``body`` is everything after the next-header and length octets.
    """

    kind: int
    next_header: int
    body: bytes = b"\x01\x04\x00\x00\x00\x00"  # one PadN option filling 8 octets

    def pack(self) -> bytes:
        if self.kind == NH_AH:
            size = len(self.body) + 2
            if size % 4:
                raise WireError("AH length must be a multiple of 4 octets")
            return bytes([self.next_header, size // 4 - 2]) + self.body
        size = len(self.body) + 2
        if size % 8:
            raise WireError(f"extension header {self.kind} must be a multiple of 8 octets")
        return bytes([self.next_header, size // 8 - 1]) + self.body


ChainEntry = Union[ExtHeader, FragmentHeader]
ExtHeaderChain = Sequence[ChainEntry]


@dataclass(frozen=True)
class Icmpv6Echo:
    msg_type: int
    identifier: int
    sequence: int
    payload: bytes = b""
    code: int = 0
    checksum: int | None = field(default=None, compare=False)

    protocol = NH_ICMPV6

    @property
    def is_request(self) -> bool:
        return self.msg_type == ICMPV6_ECHO_REQUEST

    def pack(self, src: IPv6Address, dst: IPv6Address) -> bytes:
        body = struct.pack("!HH", self.identifier, self.sequence) + self.payload
        return _icmp_pack(self.msg_type, self.code, self.checksum, body, src, dst)


@dataclass(frozen=True)
class Icmpv6ParamProblem:
    code: int
    pointer: int
    invoking_packet: bytes
    checksum: int | None = field(default=None, compare=False)

    msg_type = ICMPV6_PARAM_PROBLEM
    protocol = NH_ICMPV6

    def pack(self, src: IPv6Address, dst: IPv6Address) -> bytes:
        body = struct.pack("!I", self.pointer) + self.invoking_packet
        return _icmp_pack(self.msg_type, self.code, self.checksum, body, src, dst)

    def invoking_identification(self) -> int | None:
        """Fragment identification of the packet that triggered the error, if any."""
        try:
            inner = parse_frame(self.invoking_packet, strict_length=False)
        except WireError:
            return None
        frag = inner.fragment
        return frag.identification if frag else None


@dataclass(frozen=True)
class Icmpv6Message:
    msg_type: int
    code: int
    body: bytes = b""
    checksum: int | None = field(default=None, compare=False)

    protocol = NH_ICMPV6

    def pack(self, src: IPv6Address, dst: IPv6Address) -> bytes:
        return _icmp_pack(self.msg_type, self.code, self.checksum, self.body, src, dst)


@dataclass(frozen=True)
class UdpDatagram:
    src_port: int
    dst_port: int
    payload: bytes = b""
    checksum: int | None = field(default=None, compare=False)

    protocol = NH_UDP

    @property
    def length(self) -> int:
        return 8 + len(self.payload)

    def pack(self, src: IPv6Address, dst: IPv6Address) -> bytes:
        checksum = self.checksum
        if checksum is None:
            checksum = udp_checksum(src, dst, self.src_port, self.dst_port, self.payload)
        return struct.pack("!HHHH", self.src_port, self.dst_port, self.length, checksum) + self.payload


@dataclass(frozen=True)
class RawData:
    """Bytes after the header chain that are not decoded (non-first fragments, unknown protocols)."""

    next_header: int
    data: bytes = b""

    @property
    def protocol(self) -> int:
        return self.next_header

    def pack(self, src: IPv6Address, dst: IPv6Address) -> bytes:
        return self.data


Message = Union[Icmpv6Echo, Icmpv6ParamProblem, Icmpv6Message, UdpDatagram, RawData]


def _icmp_pack(msg_type: int, code: int, checksum: int | None, body: bytes,
               src: IPv6Address, dst: IPv6Address) -> bytes:
    if checksum is None:
        raw = struct.pack("!BBH", msg_type, code, 0) + body
        checksum = internet_checksum(PseudoHeader(src, dst, len(raw), NH_ICMPV6), raw)
    return struct.pack("!BBH", msg_type, code, checksum) + body


def udp_checksum(src: IPv6Address, dst: IPv6Address, sport: int, dport: int, payload: bytes) -> int:
    raw = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    value = internet_checksum(PseudoHeader(src, dst, len(raw), NH_UDP), raw)
    return value or 0xFFFF  # zero means "no checksum", which IPv6 forbids


def upper_checksum_ok(src: IPv6Address, dst: IPv6Address, protocol: int, upper: bytes) -> bool:
    """Verify a received upper-layer message (checksum field left in place)."""
    return internet_checksum(PseudoHeader(src, dst, len(upper), protocol), upper) == 0


def finalize_echo(upper: bytes, src: IPv6Address, dst: IPv6Address, identifier: int,
                  sequence: int, msg_type: int = ICMPV6_ECHO_REQUEST) -> bytes:
    """Replace the first 8 bytes of ``upper`` with an echo header checksummed over all of it."""
    rest = upper[8:]
    return Icmpv6Echo(msg_type, identifier, sequence, rest).pack(IPv6Address(src), IPv6Address(dst))


def _check_chain(first: int, chain: ExtHeaderChain) -> int:
    link = first
    for entry in chain:
        if link != entry.kind:
            raise ChainBroken(f"next header {link} does not match following header {entry.kind}")
        link = entry.next_header
    return link


def serialize_packet(header: Ipv6Header, chain: ExtHeaderChain = (), payload: bytes | Message = b"") -> Frame:
    """Build one IPv6 packet; the payload length field is always recomputed."""
    tail = _check_chain(header.next_header, chain)
    if not isinstance(payload, (bytes, bytearray)):
        if tail != payload.protocol:
            raise ChainBroken(f"chain ends in {tail} but payload is protocol {payload.protocol}")
        payload = payload.pack(header.src, header.dst)
    rest = b"".join(entry.pack() for entry in chain) + bytes(payload)
    if len(rest) > 0xFFFF:
        raise Oversize(f"{IPV6_HEADER_LEN + len(rest)} bytes exceeds {MAX_FRAME}")
    return header.pack(len(rest)) + rest


def fragment_packet(
    header: Ipv6Header,
    chain: ExtHeaderChain,
    payload: bytes,
    geometry: Sequence,
    identification: int,
    parity: str = ODD,
) -> list[Frame]:
    """One frame per fragment spec, in the order given.

    ``chain`` is the unfragmentable part; the Fragment Header is appended to
    it. Each spec supplies its own bytes (see ``FragmentSpec.fill``), with
    ``payload`` serving as the upper-layer template: its first 8 bytes are
    the header carried by the offset-0 spec.
    """
    upper = _check_chain(header.next_header, chain)
    if chain:
        prefix = list(chain[:-1]) + [replace(chain[-1], next_header=NH_FRAGMENT)]
        ip = replace(header, next_header=chain[0].kind)
    else:
        prefix = []
        ip = replace(header, next_header=NH_FRAGMENT)
    frames = []
    for spec in geometry:
        data = spec.fill(parity, payload)
        if spec.offset_units >= 1 << 13 or spec.offset_units * 8 + len(data) > 0xFFFF:
            raise OffsetOverflow(f"fragment {spec.label} ends past 65535 bytes")
        if spec.m_flag and len(data) % 8:
            raise NonFinalUnaligned(f"fragment {spec.label} has M=1 and {len(data)} bytes")
        nh = spec.next_header if spec.next_header is not None else upper
        frag = FragmentHeader(nh, spec.offset_units, spec.m_flag, identification)
        frames.append(serialize_packet(ip, prefix + [frag], data))
    return frames


def echo_fragments(
    model,
    src: IPv6Address,
    dst: IPv6Address,
    identification: int,
    identifier: int,
    sequence: int = 1,
    parity: str = ODD,
    hop_limit: int = 64,
) -> list[Frame]:
    """Fragments of one echo request shaped by an overlap model, in spec order.

    The echo checksum covers the model's canonical upper layer, so it stays
    valid for any reassembly that uses the same words.
    """
    src, dst = IPv6Address(src), IPv6Address(dst)
    upper = finalize_echo(model.canonical_upper(parity), src, dst, identifier, sequence)
    header = Ipv6Header(src, dst, NH_ICMPV6, hop_limit)
    return fragment_packet(header, (), upper, model.specs, identification, parity)


class UpperKind(str, enum.Enum):
    ECHO_REQUEST = "EchoRequest"
    ECHO_REPLY = "EchoReply"
    PARAM_PROBLEM = "ParamProblem"
    OTHER = "Other"


@dataclass(frozen=True)
class ParsedPacket:
    header: Ipv6Header
    chain: tuple[ChainEntry, ...]
    message: Message
    raw: bytes = field(default=b"", compare=False, repr=False)

    @property
    def fragment(self) -> FragmentHeader | None:
        return next((e for e in self.chain if isinstance(e, FragmentHeader)), None)

    @property
    def fragment_payload(self) -> bytes:
        """Everything after the Fragment Header, i.e. what reassembly places at the offset."""
        pos = IPV6_HEADER_LEN
        for entry in self.chain:
            pos += len(entry.pack())
            if isinstance(entry, FragmentHeader):
                end = IPV6_HEADER_LEN + (self.header.payload_length or 0)
                return self.raw[pos:end]
        raise WireError("packet has no Fragment Header")

    @property
    def kind(self) -> UpperKind:
        m = self.message
        if isinstance(m, Icmpv6Echo):
            return UpperKind.ECHO_REQUEST if m.is_request else UpperKind.ECHO_REPLY
        if isinstance(m, Icmpv6ParamProblem):
            return UpperKind.PARAM_PROBLEM
        return UpperKind.OTHER

    def serialize(self) -> Frame:
        return serialize_packet(self.header, self.chain, self.message)


def _parse_upper(nh: int, data: bytes) -> Message:
    if nh == NH_ICMPV6 and len(data) >= 4:
        msg_type, code, cks = struct.unpack("!BBH", data[:4])
        if msg_type in (ICMPV6_ECHO_REQUEST, ICMPV6_ECHO_REPLY) and len(data) >= 8:
            ident, seq = struct.unpack("!HH", data[4:8])
            return Icmpv6Echo(msg_type, ident, seq, data[8:], code, cks)
        if msg_type == ICMPV6_PARAM_PROBLEM and len(data) >= 8:
            (pointer,) = struct.unpack("!I", data[4:8])
            return Icmpv6ParamProblem(code, pointer, data[8:], cks)
        return Icmpv6Message(msg_type, code, data[4:], cks)
    if nh == NH_UDP and len(data) >= 8:
        sport, dport, _length, cks = struct.unpack("!HHHH", data[:8])
        return UdpDatagram(sport, dport, data[8:], cks)
    return RawData(nh, data)


def parse_frame(frame: Frame, strict_length: bool = True) -> ParsedPacket:
    """Decode one IPv6 packet.

    Unknown extension headers are skipped by their length field. Only
    unfragmented packets and offset-0 fragments have their upper layer
    decoded; other fragments yield :class:`RawData`. ``strict_length=False``
    accepts packets cut short, as quoted inside ICMPv6 errors.
    """
    header = Ipv6Header.unpack(frame)
    plen = header.payload_length
    data = frame[IPV6_HEADER_LEN:IPV6_HEADER_LEN + plen]
    if len(data) < plen and strict_length:
        raise Truncated(f"payload length {plen} but only {len(data)} bytes present")
    chain: list[ChainEntry] = []
    nh, pos = header.next_header, 0
    frag: FragmentHeader | None = None
    while nh in GENERIC_EXT or nh in (NH_FRAGMENT, NH_AH):
        if len(data) - pos < 8:
            raise MalformedChain(f"extension header {nh} runs past the packet")
        if nh == NH_FRAGMENT:
            entry: ChainEntry = FragmentHeader.unpack(data[pos:pos + 8])
            size = 8
            frag = entry
        else:
            size = (data[pos + 1] + 2) * 4 if nh == NH_AH else (data[pos + 1] + 1) * 8
            if pos + size > len(data):
                raise MalformedChain(f"extension header {nh} claims {size} bytes")
            entry = ExtHeader(nh, data[pos], data[pos + 2:pos + size])
        chain.append(entry)
        nh = entry.next_header
        pos += size
    rest = data[pos:]
    if nh == NH_NONE or (frag is not None and frag.offset != 0):
        message: Message = RawData(nh, rest)
    else:
        message = _parse_upper(nh, rest)
    return ParsedPacket(header, tuple(chain), message, bytes(frame))

"""Internet checksum helpers.

Covers the RFC 4443 / RFC 8200 upper-layer checksum with the IPv6
pseudo-header, the A-F payload patterns whose word sums collapse into three
substitution classes, and two ways of keeping a checksum intact while
replacing payload bytes (word shuffling and delta compensation).
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from ipaddress import IPv6Address

ODD = "odd"
EVEN = "even"

PATTERNS: dict[str, dict[str, bytes]] = {
    ODD: {
        "A": bytes.fromhex("11223344"),
        "B": bytes.fromhex("11332244"),
        "C": bytes.fromhex("22113344"),
        "D": bytes.fromhex("22331144"),
        "E": bytes.fromhex("33112244"),
        "F": bytes.fromhex("33221144"),
    },
    EVEN: {
        "A": bytes.fromhex("44113322"),
        "B": bytes.fromhex("44331122"),
        "C": bytes.fromhex("44332211"),
        "D": bytes.fromhex("11224433"),
        "E": bytes.fromhex("11334422"),
        "F": bytes.fromhex("22114433"),
    },
}


class UnknownLabel(ValueError):
    pass


class NoSlotReserved(ValueError):
    pass


@dataclass(frozen=True)
class PseudoHeader:
    src: IPv6Address
    dst: IPv6Address
    upper_layer_length: int
    next_header: int

    def pack(self) -> bytes:
        return (
            IPv6Address(self.src).packed
            + IPv6Address(self.dst).packed
            + struct.pack("!IxxxB", self.upper_layer_length, self.next_header)
        )


ZERO_PSEUDO = PseudoHeader(IPv6Address(0), IPv6Address(0), 0, 0)


def _fold(total: int) -> int:
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def word_sum(data: bytes) -> int:
    """Ones'-complement sum of ``data`` read as big-endian 16-bit words.

    An odd trailing byte is padded with a zero low byte.
    """
    if len(data) % 2:
        data = data + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    return _fold(total)


def ones_add(a: int, b: int) -> int:
    return _fold(a + b)


def internet_checksum(pseudo: PseudoHeader | None, data: bytes) -> int:
    """Checksum over the pseudo-header followed by ``data``.

    The checksum field inside ``data`` must already be zero; callers that
    verify a received message can instead check that the result is 0.
    """
    prefix = pseudo.pack() if pseudo is not None else b""
    total = ones_add(word_sum(prefix), word_sum(data))
    return ~total & 0xFFFF


def parity_for_packet(index: int) -> str:
    """Pattern scheme for the ``index``-th (1-based) packet of a multi-packet test."""
    return EVEN if index % 2 == 0 else ODD


def pattern_bytes(label: str, parity: str = ODD) -> bytes:
    try:
        return PATTERNS[parity][label]
    except KeyError:
        raise UnknownLabel(f"no {parity!r} pattern for label {label!r}") from None


def pattern_fill(label: str, parity: str, units: int) -> bytes:
    """Fill ``units`` 8-octet units with the 4-byte pattern of ``label``."""
    if units < 1:
        raise ValueError("units must be >= 1")
    return pattern_bytes(label, parity) * (2 * units)


def _words(payload: bytes) -> list[bytes]:
    return [payload[i:i + 2] for i in range(0, len(payload) - 1, 2)]


def checksum_preserving_shuffle(payload: bytes, seed: int | str = 0) -> bytes:
    """Permute the 16-bit groups of ``payload`` without changing its checksum.

    The permutation is drawn from ``random.Random(seed)`` so a given seed
    always forges the same bytes. A trailing odd byte stays in place. When the
    payload has at least two distinct words the result differs from the input.
    """
    words = _words(payload)
    tail = payload[len(words) * 2:]
    if len(set(words)) < 2:
        return payload
    rng = random.Random(seed)
    shuffled = list(words)
    while True:
        rng.shuffle(shuffled)
        if shuffled != words:
            return b"".join(shuffled) + tail


def checksum_compensate(original_payload: bytes, forged_payload: bytes, slot: int | None) -> int:
    """Word to write at byte ``slot`` of the forged payload.

    After writing it, the forged payload's ones'-complement word sum equals
    the original's, so any checksum covering either payload is unchanged.
    Whatever ``forged_payload`` holds at the slot is ignored.
    """
    if slot is None:
        raise NoSlotReserved("DeltaCompensation needs a 2-byte slot")
    if slot % 2 or slot < 0 or slot + 2 > len(forged_payload):
        raise NoSlotReserved(f"slot {slot} is not a word-aligned position inside the payload")
    if len(original_payload) != len(forged_payload):
        raise ValueError("forged payload must have the original's length")
    target = word_sum(original_payload)
    current = word_sum(forged_payload[:slot] + b"\x00\x00" + forged_payload[slot + 2:])
    if target == 0 and current == 0:
        return 0
    return ones_add(target, ~current & 0xFFFF)


def write_slot(payload: bytes, slot: int, word: int) -> bytes:
    return payload[:slot] + struct.pack("!H", word) + payload[slot + 2:]

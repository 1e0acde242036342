"""Overlap test models and campaign generation.

Geometry is expressed in 8-octet units, the granularity of the IPv6 fragment
offset field. The offset-0 fragment always starts with the upper-layer header
(8 bytes for ICMPv6 echo and UDP); letter strings describe the payload units
that follow it.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .checksum import ODD, pattern_fill

UNIT = 8
NH_ICMPV6 = 58

# total test count in the published campaign dataset; kept for reconciliation
PUBLISHED_TOTAL = 2226
MANIFEST_SCHEMA = "ipv6frag.manifest/1"


class ModelKind(str, enum.Enum):
    SHANKAR_PAXSON = "ShankarPaxson"
    THREE_FRAGMENT = "ThreeFragment"
    NEW_MODEL = "NewModel"
    RFC9099 = "Rfc9099"
    CUSTOM = "Custom"


class Mode(enum.IntEnum):
    SINGLE = 1
    REPEAT_SAME_ID = 2
    MULTI_PACKET = 3


REPETITIONS = {Mode.SINGLE: 1, Mode.REPEAT_SAME_ID: 5, Mode.MULTI_PACKET: 5}


@dataclass(frozen=True)
class FragmentSpec:
    """Abstract geometry and content of one fragment.

    Content comes from ``data`` when given, otherwise from the A-F word
    ``pattern`` fill, otherwise it is sliced from the upper-layer template
    passed to :meth:`fill`. ``next_header`` overrides the Fragment Header's
    next-header value for this fragment only.
    """

    label: str
    offset_units: int
    length_units: int
    m_flag: bool
    carries_upper_header: bool = False
    pattern: str | None = None
    data: bytes | None = None
    next_header: int | None = None

    def __post_init__(self) -> None:
        if self.offset_units < 0 or self.offset_units >= 1 << 13:
            raise ValueError(f"offset {self.offset_units} does not fit 13 bits")
        if self.length_units < 0:
            raise ValueError("negative length")
        if self.length_units == 0:
            # only an empty, header-less fragment may have no length
            if self.carries_upper_header or (self.data is not None and self.data):
                raise ValueError("zero-length fragment cannot carry data")
        if self.data is not None:
            if len(self.data) > self.length_units * UNIT:
                raise ValueError(f"fragment {self.label}: data longer than its span")
            if self.m_flag and len(self.data) != self.length_units * UNIT:
                raise ValueError(f"fragment {self.label}: non-final data must fill its span")

    @property
    def offset_bytes(self) -> int:
        return self.offset_units * UNIT

    @property
    def length_bytes(self) -> int:
        if self.data is not None:
            return len(self.data)
        return self.length_units * UNIT

    @property
    def end_bytes(self) -> int:
        return self.offset_bytes + self.length_bytes

    def fill(self, parity: str = ODD, upper: bytes = b"") -> bytes:
        if self.data is not None:
            return self.data
        if self.length_units == 0:
            return b""
        if self.pattern is None:
            chunk = upper[self.offset_bytes:self.offset_bytes + self.length_bytes]
            if len(chunk) != self.length_bytes:
                raise ValueError(f"upper-layer template too short for fragment {self.label}")
            return chunk
        head = b""
        units = self.length_units
        if self.carries_upper_header:
            head = upper[:UNIT]
            if len(head) != UNIT:
                raise ValueError("offset-0 fragment needs an 8-byte upper-layer header")
            units -= 1
        if units == 0:
            return head
        return head + pattern_fill(self.pattern, parity, units)

    def overlaps(self, other: FragmentSpec) -> bool:
        return overlap(self.offset_bytes, self.end_bytes, other.offset_bytes, other.end_bytes)


def overlap(a_start: int, a_end: int, b_start: int, b_end: int) -> bool:
    """Half-open range intersection; empty ranges never overlap."""
    return a_start < a_end and b_start < b_end and a_start < b_end and b_start < a_end


@dataclass(frozen=True)
class OverlapModel:
    name: str
    kind: ModelKind
    specs: tuple[FragmentSpec, ...]
    upper_next_header: int = NH_ICMPV6

    @property
    def expected_extent_units(self) -> int:
        finals = [s for s in self.specs if not s.m_flag]
        if not finals:
            return 0
        return max(-(-s.end_bytes // UNIT) for s in finals)

    @property
    def extent_bytes(self) -> int:
        return max((s.end_bytes for s in self.specs if not s.m_flag), default=0)

    @property
    def labels(self) -> str:
        return "".join(s.label for s in self.specs)

    @property
    def has_overlap(self) -> bool:
        return any(a.overlaps(b) for a, b in itertools.combinations(self.specs, 2))

    def order_letters(self, order: Sequence[int]) -> str:
        return "".join(self.specs[i].label for i in order)

    def canonical_upper(self, parity: str = ODD, header: bytes = b"\x00" * UNIT) -> bytes:
        """Upper-layer bytes a sender would checksum: earliest spec wins each byte."""
        buf = bytearray(self.extent_bytes)
        buf[:UNIT] = header[: len(buf)]
        for spec in reversed(self.specs):
            if spec.pattern is None and spec.data is None:
                continue
            chunk = spec.fill(parity, header)[: max(0, len(buf) - spec.offset_bytes)]
            buf[spec.offset_bytes:spec.offset_bytes + len(chunk)] = chunk
        return bytes(buf)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "upper_next_header": self.upper_next_header,
            "specs": [spec_to_dict(s) for s in self.specs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> OverlapModel:
        return cls(
            name=d["name"],
            kind=ModelKind(d.get("kind", ModelKind.CUSTOM.value)),
            specs=tuple(spec_from_dict(s) for s in d["specs"]),
            upper_next_header=d.get("upper_next_header", NH_ICMPV6),
        )


def spec_to_dict(spec: FragmentSpec) -> dict:
    d = {
        "label": spec.label,
        "offset": spec.offset_units,
        "length": spec.length_units,
        "m": int(spec.m_flag),
        "header": spec.carries_upper_header,
        "pattern": spec.pattern,
    }
    if spec.data is not None:
        d["data"] = spec.data.hex()
    if spec.next_header is not None:
        d["next_header"] = spec.next_header
    return d


def spec_from_dict(d: dict) -> FragmentSpec:
    return FragmentSpec(
        label=d["label"],
        offset_units=d["offset"],
        length_units=d["length"],
        m_flag=bool(d["m"]),
        carries_upper_header=d.get("header", False),
        pattern=d.get("pattern"),
        data=bytes.fromhex(d["data"]) if d.get("data") is not None else None,
        next_header=d.get("next_header"),
    )


def load_model(path: str) -> OverlapModel:
    with open(path) as fh:
        return OverlapModel.from_dict(json.load(fh))


def _six(name: str, kind: ModelKind, geometry: dict[str, tuple[int, int]], last: str) -> OverlapModel:
    specs = tuple(
        FragmentSpec(
            label=label,
            offset_units=off,
            length_units=length,
            m_flag=label != last,
            carries_upper_header=off == 0,
            pattern=label,
        )
        for label, (off, length) in geometry.items()
    )
    return OverlapModel(name, kind, specs)


def shankar_paxson_model() -> OverlapModel:
    """Six-fragment model; A holds the ICMPv6 header plus 24 pattern bytes."""
    geometry = {"A": (0, 4), "B": (5, 2), "C": (7, 3), "D": (4, 4), "E": (7, 3), "F": (10, 3)}
    return _six("sp", ModelKind.SHANKAR_PAXSON, geometry, last="F")


def new_model() -> OverlapModel:
    """Shankar-Paxson geometry with B..F moved one unit towards the start.

    A keeps offset 0 (it cannot move) and its first unit, the ICMPv6 header,
    is overlapped by nothing.
    """
    geometry = {"A": (0, 4), "B": (4, 2), "C": (6, 3), "D": (3, 4), "E": (6, 3), "F": (9, 3)}
    return _six("new", ModelKind.NEW_MODEL, geometry, last="F")


# (offset units, length units, what the second fragment does)
THREE_FRAGMENT_COMBOS: tuple[tuple[int, int, str], ...] = (
    (0, 1, "overwrites-header"),
    (1, 1, "inside-first"),
    (1, 2, "inside-first-shares-end"),
    (2, 1, "inside-first-abuts-third"),
    (2, 2, "straddles-boundary"),
    (2, 3, "straddles-into-third"),
    (3, 1, "inside-third-shares-start"),
    (3, 3, "identical-to-third"),
    (4, 1, "inside-third"),
    (4, 2, "inside-third-shares-end"),
    (4, 3, "extends-beyond-third"),
)


def three_fragment_model(offset_units: int, length_units: int, m_flag: bool) -> OverlapModel:
    specs = (
        FragmentSpec("A", 0, 3, True, carries_upper_header=True, pattern="A"),
        FragmentSpec("B", offset_units, length_units, m_flag, pattern="B"),
        FragmentSpec("C", 3, 3, False, pattern="C"),
    )
    name = f"3frag-o{offset_units}l{length_units}m{int(m_flag)}"
    return OverlapModel(name, ModelKind.THREE_FRAGMENT, specs)


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # keep pytest from collecting this class

    model: OverlapModel
    arrival_order: tuple[int, ...]
    mode: Mode
    repetitions: int
    identifications: tuple[int, ...]
    case_id: str
    note: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if sorted(self.arrival_order) != list(range(len(self.model.specs))):
            raise ValueError(f"{self.case_id}: arrival order is not a permutation")
        if self.mode is Mode.SINGLE and (self.repetitions != 1 or len(self.identifications) != 1):
            raise ValueError(f"{self.case_id}: single mode sends one packet")
        if self.mode is Mode.REPEAT_SAME_ID and len(self.identifications) != 1:
            raise ValueError(f"{self.case_id}: repeated sends share one identification")
        if self.mode is Mode.MULTI_PACKET and len(set(self.identifications)) != self.repetitions:
            raise ValueError(f"{self.case_id}: every packet needs its own identification")

    @property
    def has_overlap(self) -> bool:
        # a replayed packet overlaps itself
        return self.model.has_overlap or self.mode is Mode.REPEAT_SAME_ID

    @property
    def is_control(self) -> bool:
        """Non-overlapping case whose offset-0 fragment carries the upper header."""
        if self.has_overlap:
            return False
        return all(s.carries_upper_header for s in self.model.specs if s.offset_units == 0)

    @property
    def order_letters(self) -> str:
        return self.model.order_letters(self.arrival_order)


def three_fragment_model_suite(first_id: int = 0x3F000) -> list[TestCase]:
    cases = []
    ident = first_id
    for n, (off, length, note) in enumerate(THREE_FRAGMENT_COMBOS, start=1):
        for m_flag in (True, False):
            model = three_fragment_model(off, length, m_flag)
            for direction, order in (("fwd", (0, 1, 2)), ("rev", (2, 1, 0))):
                cases.append(TestCase(
                    model=model,
                    arrival_order=order,
                    mode=Mode.SINGLE,
                    repetitions=1,
                    identifications=(ident,),
                    case_id=f"3frag-c{n:02d}-m{int(m_flag)}-{direction}",
                    note=note,
                ))
                ident += 1
    return cases


def permutations(model: OverlapModel) -> list[tuple[int, ...]]:
    n = len(model.specs)
    if n > 8:
        raise ValueError(f"{n} fragments give too many orderings to enumerate")
    return list(itertools.permutations(range(n)))


def permutation_cases(
    model: OverlapModel,
    modes: Iterable[int] = (1, 2, 3),
    orders: Iterable[Sequence[int]] | None = None,
    first_id: int = 0x10000,
) -> list[TestCase]:
    orders = [tuple(o) for o in orders] if orders is not None else permutations(model)
    cases = []
    ident = first_id
    for mode in (Mode(m) for m in modes):
        reps = REPETITIONS[mode]
        for order in orders:
            n_ids = reps if mode is Mode.MULTI_PACKET else 1
            cases.append(TestCase(
                model=model,
                arrival_order=order,
                mode=mode,
                repetitions=reps,
                identifications=tuple(range(ident, ident + n_ids)),
                case_id=f"{model.name}-m{int(mode)}-{model.order_letters(order)}",
            ))
            ident += n_ids
    return cases


MODEL_CHOICES = ("sp", "3frag", "new", "rfc9099")
DEFAULT_SELECTION = ("new", "3frag", "rfc9099")


def expand_selection(models: str | Iterable[str]) -> tuple[str, ...]:
    if isinstance(models, str):
        models = (models,)
    out: list[str] = []
    for m in models:
        names = MODEL_CHOICES if m == "all" else (m,)
        for name in names:
            if name not in MODEL_CHOICES:
                raise ValueError(f"unknown model {name!r}")
            if name not in out:
                out.append(name)
    return tuple(out)


def build_campaign(
    models: str | Iterable[str] = DEFAULT_SELECTION,
    modes: Iterable[int] = (1, 2, 3),
    custom: dict[str, OverlapModel] | None = None,
) -> list[TestCase]:
    """Enumerate the test cases for the selected models.

    Permutation models (``new``, ``sp``) give one case per arrival order and
    mode; the three-fragment suite and the RFC 9099 experiments are fixed
    single-mode sets. ``custom`` replaces the built-in geometry for a model
    name, e.g. one loaded from a published dataset file.
    """
    modes = tuple(sorted({int(m) for m in modes}))
    custom = custom or {}
    cases: list[TestCase] = []
    for name in expand_selection(models):
        if name == "new":
            cases += permutation_cases(custom.get("new", new_model()), modes, first_id=0x10000)
        elif name == "sp":
            cases += permutation_cases(custom.get("sp", shankar_paxson_model()), modes, first_id=0x20000)
        elif name == "3frag":
            cases += three_fragment_model_suite()
        elif name == "rfc9099":
            from .scenarios import rfc9099_cases

            cases += rfc9099_cases()
    return cases


def case_record(case: TestCase) -> dict:
    return {
        "case_id": case.case_id,
        "model": case.model.name,
        "kind": case.model.kind.value,
        "geometry": [spec_to_dict(s) for s in case.model.specs],
        "arrival_order": [case.model.specs[i].label for i in case.arrival_order],
        "mode": int(case.mode),
        "repetitions": case.repetitions,
        "identifications": list(case.identifications),
        "overlap": case.has_overlap,
    }


def manifest_header(cases: Sequence[TestCase], selection: Iterable[str] = ()) -> dict:
    return {
        "record": "header",
        "schema": MANIFEST_SCHEMA,
        "selection": list(selection),
        "cases": len(cases),
        "published_total": PUBLISHED_TOTAL,
        "unreconciled": PUBLISHED_TOTAL - len(cases),
    }


def manifest_lines(
    cases: Sequence[TestCase],
    selection: Iterable[str] = (),
    with_oracle: bool = True,
) -> Iterator[str]:
    """Line-delimited JSON manifest; first line is the header record."""
    dump = lambda obj: json.dumps(obj, sort_keys=True, separators=(",", ":"))  # noqa: E731
    yield dump(manifest_header(cases, selection))
    if with_oracle:
        from .reassembly import case_oracle

    for case in cases:
        rec = case_record(case)
        if with_oracle:
            rec["expected_outcome_per_policy"] = {
                p.value: dict(o.to_dict(), replies=n) for p, (o, n) in case_oracle(case).items()
            }
        yield dump(rec)


def write_manifest(path: str, cases: Sequence[TestCase], selection: Iterable[str] = (), with_oracle: bool = True) -> None:
    with open(path, "w") as fh:
        for line in manifest_lines(cases, selection, with_oracle):
            fh.write(line + "\n")


@dataclass(frozen=True)
class Constraint:
    name: str
    satisfied: bool
    detail: str = ""


def _pairs(model: OverlapModel) -> Iterator[tuple[FragmentSpec, FragmentSpec]]:
    # (earlier, later) in canonical sending order
    yield from itertools.combinations(model.specs, 2)


def _covers(outer: FragmentSpec, inner: FragmentSpec) -> bool:
    return outer.offset_bytes <= inner.offset_bytes and outer.end_bytes >= inner.end_bytes


def validate_model_constraints(model: OverlapModel) -> list[Constraint]:
    """Check the structural properties a model is built to exercise.

    Violations are returned as unsatisfied entries; nothing is raised.
    """
    out = []
    finals = [s.label for s in model.specs if not s.m_flag]
    out.append(Constraint("single-final-fragment", len(finals) == 1, ",".join(finals)))
    heads = [s.label for s in model.specs if s.offset_units == 0 and s.carries_upper_header]
    out.append(Constraint("single-header-fragment", len(heads) == 1, ",".join(heads)))

    whole = [(x.label, y.label) for x, y in _pairs(model)
             if x.length_bytes and (x.offset_bytes, x.length_bytes) == (y.offset_bytes, y.length_bytes)]
    out.append(Constraint("wholly-overlapped-identical", bool(whole), _fmt(whole)))
    greater = [(x.label, y.label) for x, y in _pairs(model)
               if x.overlaps(y) and not _covers(y, x) and y.offset_bytes > x.offset_bytes]
    out.append(Constraint("partial-overlap-greater-offset", bool(greater), _fmt(greater)))
    smaller = [(x.label, y.label) for x, y in _pairs(model)
               if x.overlaps(y) and not _covers(y, x) and y.offset_bytes < x.offset_bytes]
    out.append(Constraint("partial-overlap-smaller-offset", bool(smaller), _fmt(smaller)))

    if model.kind is ModelKind.NEW_MODEL:
        from .reassembly import hole_free_outcomes

        found = hole_free_outcomes(model)
        expected = {"AAABBCCCFFF", "AAABBEEEFFF"}
        out.append(Constraint("hole-free-outcomes", found == expected, ",".join(sorted(found))))
    return out


def _fmt(pairs: list[tuple[str, str]]) -> str:
    return " ".join(f"{a}<{b}" for a, b in pairs)

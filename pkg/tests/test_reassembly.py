import random

import pytest

from ipv6frag.checksum import ODD
from ipv6frag.models import UNIT, FragmentSpec, Mode, TestCase, new_model, shankar_paxson_model
from ipv6frag.reassembly import (
    ALL_POLICIES,
    BYTE_BASED,
    FRAGMENT_BASED,
    DropReason,
    EmptyObservations,
    FragmentBuffer,
    Policy,
    Status,
    expected_outcomes,
    expected_replies,
    fingerprint_policy,
    hole_free_outcomes,
    insert_fragment,
    oracle_table,
    reassemble,
    run_stream,
    simulate_case,
)

HEADER = b"\x80\x00\x00\x00\x00\x01\x00\x01"


def spec(label, off, length, m=True, header=None):
    header = off == 0 if header is None else header
    return FragmentSpec(label, off, length, m, carries_upper_header=header, pattern=None if header else label)


def payload_for(s: FragmentSpec) -> bytes:
    if s.carries_upper_header:
        return HEADER + s.label.encode() * (s.length_bytes - UNIT)
    return s.label.encode() * s.length_bytes


def feed(policy, specs, now=None):
    buf = FragmentBuffer(1)
    for t, s in enumerate(specs):
        insert_fragment(buf, s, payload_for(s), policy, at=float(t))
    return reassemble(buf, policy, now)


def test_disjoint_fragments_complete_under_every_policy():
    specs = [spec("A", 0, 2), spec("B", 2, 1), spec("C", 3, 2, m=False)]
    payloads = set()
    for p in ALL_POLICIES:
        out = feed(p, specs)
        assert out.status is Status.COMPLETE, p
        payloads.add(out.payload)
        assert out.letters == "ABCC"  # one letter per unit after the header unit
    assert len(payloads) == 1


def test_identical_duplicate():
    a, b1, b2 = spec("A", 0, 1), spec("B", 1, 1, m=False), spec("X", 1, 1, m=False)
    assert feed(Policy.FRAG_FIRST_WINS, [a, b1, b2]).letters == "B"
    assert feed(Policy.FRAG_LAST_WINS, [a, b1, b2]).letters == "X"
    strict = feed(Policy.RFC5722_STRICT, [a, b1, b2])
    assert (strict.status, strict.reason) == (Status.DROPPED, DropReason.OVERLAP_STRICT)


def test_sp_canonical_frag_first_leaves_gap():
    model = shankar_paxson_model()
    out = feed(Policy.FRAG_FIRST_WINS, model.specs)
    assert out.status is Status.INCOMPLETE
    assert out.holes[0] == (4, 5)


def test_new_model_canonical_order():
    out = feed(Policy.FRAG_FIRST_WINS, new_model().specs)
    assert out.status is Status.COMPLETE
    assert out.letters == "AAABBCCCFFF"
    assert len(out.payload) == 12 * UNIT


def test_missing_final_fragment_leaves_open_hole():
    out = feed(Policy.FRAG_FIRST_WINS, [spec("A", 0, 2)])
    assert out.status is Status.INCOMPLETE
    assert out.holes == ((2, None),)


def test_timeout_is_injected_not_read():
    specs = [spec("A", 0, 2)]
    assert feed(Policy.FRAG_FIRST_WINS, specs, now=10.0).status is Status.INCOMPLETE
    out = feed(Policy.FRAG_FIRST_WINS, specs, now=31.0)
    assert (out.status, out.reason) == (Status.DROPPED, DropReason.TIMEOUT)


def test_evicted_header_fragment_means_no_header():
    a, a2, b = spec("A", 0, 1), spec("Q", 0, 2, header=False), spec("B", 2, 1, m=False)
    out = feed(Policy.FRAG_LAST_WINS, [a, b, a2])
    assert (out.status, out.reason) == (Status.DROPPED, DropReason.NO_HEADER)


def test_empty_first_fragment_is_no_header():
    z = FragmentSpec("Z", 0, 0, True, data=b"")
    for p in ALL_POLICIES:
        out = feed(p, [z, spec("A", 0, 1), spec("B", 1, 1, m=False)])
        assert (out.status, out.reason) == (Status.DROPPED, DropReason.NO_HEADER)


def test_conflicting_final_fragments_are_malformed():
    out = feed(Policy.FRAG_FIRST_WINS, [spec("A", 0, 1), spec("B", 1, 1, m=False), spec("C", 2, 1, m=False)])
    assert (out.status, out.reason) == (Status.DROPPED, DropReason.MALFORMED)


def test_payload_length_checked():
    with pytest.raises(ValueError):
        insert_fragment(FragmentBuffer(1), spec("B", 1, 1), b"short", Policy.LAST)


def test_byte_policy_definitions():
    # original covers [8, 24), subsequent covers [16, 32): subsequent has the greater offset
    orig, sub = spec("O", 1, 2), spec("S", 2, 2, m=False)
    head = spec("A", 0, 1)
    expect = {
        Policy.FIRST: "OO" + "S",
        Policy.LAST: "O" + "SS",
        Policy.BSD: "OO" + "S",
        Policy.BSD_RIGHT: "O" + "SS",
        Policy.LINUX: "OO" + "S",
    }
    for p, letters in expect.items():
        assert feed(p, [head, orig, sub]).letters == letters, p
    # equal offsets: BSD keeps the original, Linux and BSD-right take the later one
    o2, s2 = spec("O", 1, 1), spec("S", 1, 2, m=False)
    assert feed(Policy.BSD, [head, o2, s2]).letters == "OS"
    assert feed(Policy.LINUX, [head, o2, s2]).letters == "SS"
    assert feed(Policy.BSD_RIGHT, [head, o2, s2]).letters == "SS"


def naive_bytes(policy, arrivals):
    """Per-byte winner by brute force: highest priority covering arrival."""
    owner = {}
    for byte in range(max(s.end_bytes for s, _ in arrivals)):
        covering = [(i, s) for i, (s, _) in enumerate(arrivals) if s.offset_bytes <= byte < s.end_bytes]
        if not covering:
            continue
        if policy is Policy.FIRST:
            key = lambda t: -t[0]  # noqa: E731
        elif policy is Policy.LAST:
            key = lambda t: t[0]  # noqa: E731
        elif policy is Policy.BSD:
            key = lambda t: (-t[1].offset_bytes, -t[0])  # noqa: E731
        elif policy is Policy.LINUX:
            key = lambda t: (-t[1].offset_bytes, t[0])  # noqa: E731
        else:
            key = lambda t: (t[1].offset_bytes, t[0])  # noqa: E731
        i, _ = max(covering, key=key)
        owner[byte] = i
    return owner


def random_geometry(rng):
    n = rng.randint(1, 6)
    specs = [spec("A", 0, rng.randint(1, 4))]
    for k in range(1, n):
        off = rng.randint(0, 15)
        length = rng.randint(1, 16 - off)
        specs.append(FragmentSpec(chr(ord("A") + k), off, length, True, data=bytes([65 + k]) * (length * UNIT)))
    rng.shuffle(specs)
    return specs


def test_byte_policies_match_naive_priority_oracle():
    rng = random.Random(2024)
    for _ in range(1000):
        specs = random_geometry(rng)
        arrivals = [(s, s.fill(ODD, HEADER + bytes(200))) for s in specs]
        for p in BYTE_BASED:
            buf = FragmentBuffer(1)
            for s, data in arrivals:
                insert_fragment(buf, s, data, p)
            if buf.header_violation:
                continue
            owner = naive_bytes(p, arrivals)
            got = {}
            for a, b, arr in buf.segments:
                for byte in range(a, b):
                    got[byte] = arr.index
            assert got == owner, (p, [(s.label, s.offset_units, s.length_units) for s in specs])


def test_hole_free_set_for_new_model():
    assert hole_free_outcomes(new_model()) == {"AAABBCCCFFF", "AAABBEEEFFF"}


def test_sp_model_never_completes_fragment_based():
    assert hole_free_outcomes(shankar_paxson_model()) == set()


def test_strict_never_beats_frag_first():
    model = new_model()
    for order in [(0, 1, 2, 5), (3, 0, 1, 2, 4, 5), (5, 4, 3, 2, 1, 0)]:
        full = order + tuple(i for i in range(6) if i not in order)
        case = TestCase(model, full, Mode.SINGLE, 1, (1,), "x")
        out = expected_outcomes(case, (Policy.RFC5722_STRICT, Policy.FRAG_FIRST_WINS))
        if out[Policy.RFC5722_STRICT].complete:
            assert out[Policy.FRAG_FIRST_WINS].complete


def test_repeat_mode_replays_into_one_buffer():
    model = new_model()
    case = TestCase(model, tuple(range(6)), Mode.REPEAT_SAME_ID, 5, (9,), "r")
    assert len(simulate_case(case, Policy.FRAG_FIRST_WINS)) == 1
    assert len(simulate_case(case, Policy.FRAG_FIRST_WINS, early_completion=True)) >= 1
    assert expected_replies(case, (Policy.RFC5722_STRICT,))[Policy.RFC5722_STRICT] == 0


def test_multi_packet_mode_uses_independent_buffers():
    case = TestCase(new_model(), tuple(range(6)), Mode.MULTI_PACKET, 5, (1, 2, 3, 4, 5), "m")
    outs = simulate_case(case, Policy.FRAG_FIRST_WINS)
    assert len(outs) == 5 and all(o.complete for o in outs)


def test_early_completion_releases_datagram():
    model = new_model()
    specs = [model.specs[i] for i in (0, 1, 2, 5, 3)]
    upper = model.canonical_upper(ODD, HEADER)
    payloads = [s.fill(ODD, upper) for s in specs]
    late = run_stream(specs, payloads, Policy.RFC5722_STRICT)
    early = run_stream(specs, payloads, Policy.RFC5722_STRICT, early_completion=True)
    assert not late[-1].complete
    assert early[0].complete


def test_fingerprint_self_consistency():
    from ipv6frag.models import build_campaign, permutation_cases

    cases = permutation_cases(new_model(), (1,))[:120]
    oracle = oracle_table(cases)
    observed = {cid: "EchoReply" if v["frag-last"] else "Silence" for cid, v in oracle.items()}
    ranking = fingerprint_policy(observed, oracle)
    assert ranking[0].policy is Policy.FRAG_LAST_WINS and ranking[0].agreement == 1.0

    silent = {cid: "Silence" for cid in oracle}
    top = fingerprint_policy(silent, oracle)
    assert Policy.RFC5722_STRICT in [s.policy for s in top if s.rank == 1]

    wide = oracle_table(build_campaign(["sp", "new", "3frag"], (1,)))
    mixed = {cid: ("EchoReply" if (v["frag-last"] if i % 2 else v["frag-first"]) else "Silence")
             for i, (cid, v) in enumerate(wide.items())}
    ranked = fingerprint_policy(mixed, wide)
    top_two = {s.policy for s in ranked[:2]}
    assert top_two == {Policy.FRAG_FIRST_WINS, Policy.FRAG_LAST_WINS}
    assert all(s.agreement < 1.0 for s in ranked[:2])

    with pytest.raises(EmptyObservations):
        fingerprint_policy({"nope": "Silence"}, oracle)


def test_ties_share_a_rank():
    oracle = {"c": {p.value: 0 for p in ALL_POLICIES}}
    ranking = fingerprint_policy({"c": "Silence"}, oracle)
    assert {s.rank for s in ranking} == {1}


def test_fragment_based_policy_sets():
    assert set(FRAGMENT_BASED) | set(BYTE_BASED) | {Policy.RFC5722_STRICT} == set(ALL_POLICIES)

import time
from ipaddress import IPv6Address

import pytest

from ipv6frag.models import Mode, build_campaign, new_model, permutation_cases
from ipv6frag.reassembly import Policy, Status, expected_outcomes
from ipv6frag.runner import (
    ECHO_REPLY,
    SILENCE,
    Observed,
    PcapWriter,
    RunnerConfig,
    SendFailure,
    SimulatedTarget,
    SimulatedTransport,
    TestResult,
    allocate_identifications,
    apply_identifications,
    read_pcap,
    run_campaign,
    run_case,
    transmission_plan,
)
from ipv6frag.scenarios import rfc9099_cases
from ipv6frag.wire import Icmpv6Echo, Icmpv6ParamProblem, parse_frame

SRC, DST = IPv6Address("fd00::1"), IPv6Address("fd00::2")


def new_cases(modes=(1,)):
    return permutation_cases(new_model(), modes)


def test_config_validation():
    with pytest.raises(ValueError):
        RunnerConfig(dry_run="frag-first", reply_timeout=0)
    with pytest.raises(ValueError):
        RunnerConfig()  # live without an interface
    cfg = RunnerConfig(dry_run="frag-last")
    assert cfg.dry_run is Policy.FRAG_LAST_WINS and not cfg.live
    assert cfg.reply_timeout == 35.0 and cfg.inter_frame_delay == 10.0


def test_observed_round_trip():
    for obs in (ECHO_REPLY, SILENCE, Observed("ParamProblem", 4, 3), Observed("OtherIcmp", 1, 4)):
        assert Observed.parse(str(obs)) == obs
    with pytest.raises(ValueError):
        Observed.parse("Banana")


def test_result_reply_count_invariant():
    with pytest.raises(ValueError):
        TestResult("c", "new", 1, ["A"], SILENCE, 2, {})
    with pytest.raises(ValueError):
        TestResult("c", "new", 1, ["A"], ECHO_REPLY, 0, {})


def test_plan_follows_arrival_order():
    case = new_cases()[37]
    plan = transmission_plan(case, SRC, DST, 4)
    offsets = [parse_frame(f).fragment.offset for f in plan.frames]
    assert offsets == [case.model.specs[i].offset_units for i in case.arrival_order]


def test_plan_repeat_mode_reuses_identification():
    case = next(c for c in new_cases((2,)) if c.mode is Mode.REPEAT_SAME_ID)
    plan = transmission_plan(case, SRC, DST, 4)
    assert len(plan.frames) == 30
    assert {parse_frame(f).fragment.identification for f in plan.frames} == set(case.identifications)
    assert plan.frames[:6] == plan.frames[24:]


def test_plan_multi_packet_mode():
    case = new_cases((3,))[0]
    plan = transmission_plan(case, SRC, DST, 4)
    ids = [parse_frame(f).fragment.identification for f in plan.frames]
    assert len(set(ids)) == 5 and len(ids) == 30
    seqs = [parse_frame(f).message.sequence for f in plan.frames if isinstance(parse_frame(f).message, Icmpv6Echo)]
    assert seqs == [1, 2, 3, 4, 5]


def test_dry_run_canonical_order():
    case = new_cases()[0]
    result = run_case(case, RunnerConfig(dry_run="frag-first"))
    assert result.observed == ECHO_REPLY and result.reply_count == 1
    assert expected_outcomes(case, (Policy.FRAG_FIRST_WINS,))[Policy.FRAG_FIRST_WINS].status is Status.COMPLETE


def test_dry_run_strict_is_silent_on_overlap():
    cfg = RunnerConfig(dry_run="rfc5722")
    for case in new_cases()[:50]:
        assert run_case(case, cfg).observed == SILENCE


def test_simulated_target_checks_checksum_when_asked():
    case = new_cases()[0]
    plan = transmission_plan(case, SRC, DST, 4)
    bad = bytearray(plan.frames[-1])
    bad[-1] ^= 0xFF
    frames = list(plan.frames[:-1]) + [bytes(bad)]
    for verify, expected in ((False, 1), (True, 0)):
        target = SimulatedTarget(Policy.FRAG_FIRST_WINS, verify_checksum=verify)
        for f in frames:
            target.receive(f)
        assert len(target.flush()) == expected


def test_param_problem_option_for_incomplete_chain():
    exp2 = rfc9099_cases()[1]
    cfg = RunnerConfig(dry_run="linux", param_problem_on_incomplete_chain=True)
    result = run_case(exp2, cfg)
    assert str(result.observed) == "ParamProblem(3)"
    plain = run_case(exp2, RunnerConfig(dry_run="linux"))
    assert plain.observed == SILENCE


def test_replies_are_matched_to_their_case():
    case = new_cases()[0]
    target = SimulatedTarget(Policy.LAST)
    transport = SimulatedTransport(target)
    cfg = RunnerConfig(dry_run="last")
    # a stray reply from an earlier case must not count
    stray = transmission_plan(new_cases()[1], SRC, DST, 999)
    for f in stray.frames:
        transport.send(f)
    leftover = target.flush()
    transport._pending += leftover
    result = run_case(case, cfg, transport, echo_identifier=5)
    assert result.reply_count == 1
    reply = parse_frame(leftover[0]).message
    assert reply.identifier == 999


def test_identification_allocation():
    cases = build_campaign(["new"], (1, 2, 3))
    ids = allocate_identifications(cases, seed=5)
    flat = [i for v in ids.values() for i in v]
    assert len(flat) == len(set(flat)) == 720 + 720 + 3600
    assert all(0 < i < 2**32 for i in flat)
    applied = apply_identifications(cases, ids)
    assert [len(c.identifications) for c in applied] == [len(c.identifications) for c in cases]
    assert allocate_identifications(cases, seed=5) == ids


def test_empty_campaign():
    assert run_campaign([], RunnerConfig(dry_run="frag-first")) == []


class Flaky(SimulatedTransport):
    """Fails the first ``failures`` sends."""

    def __init__(self, target, failures):
        super().__init__(target)
        self.failures = failures

    def send(self, frame):
        if self.failures:
            self.failures -= 1
            raise SendFailure("link down")
        super().send(frame)


def test_campaign_streams_to_sink_and_survives_failures():
    seen = []
    cases = new_cases()[:3]
    cfg = RunnerConfig(dry_run="frag-first", retries=0)
    results = run_campaign(cases, cfg, seen.append, Flaky(SimulatedTarget(Policy.FRAG_FIRST_WINS), 1))
    assert len(results) == 3 and seen == results
    assert results[0].error and "SendFailure" in results[0].error
    assert all(r.error is None for r in results[1:])


def test_campaign_retries_failed_cases():
    cfg = RunnerConfig(dry_run="frag-first", retries=1)
    results = run_campaign(new_cases()[:1], cfg, transport=Flaky(SimulatedTarget(Policy.FRAG_FIRST_WINS), 1))
    assert results[0].error is None and results[0].observed == ECHO_REPLY


def test_full_dry_run_matches_oracle_quickly():
    cases = build_campaign(["new"], (1, 2, 3))
    start = time.perf_counter()
    results = run_campaign(cases, RunnerConfig(dry_run="frag-last"))
    assert time.perf_counter() - start < 60
    assert len(results) == 2160
    assert all(r.reply_count == r.expected_replies("frag-last") for r in results)


def test_pcap_round_trip(tmp_path):
    path = tmp_path / "x.pcap"
    writer = PcapWriter(str(path))
    frames = transmission_plan(new_cases()[0], SRC, DST, 1).frames
    for f in frames:
        writer.write(f, ts=1000.5)
    writer.close()
    back = read_pcap(str(path))
    assert [f for _, f in back] == list(frames)
    assert back[0][0] == pytest.approx(1000.5)


def test_param_problem_reply_quotes_invoking_fragment():
    exp2 = rfc9099_cases()[1]
    target = SimulatedTarget(Policy.FRAG_FIRST_WINS, param_problem_on_incomplete_chain=True)
    for f in transmission_plan(exp2, SRC, DST, 1).frames:
        target.receive(f)
    (reply,) = target.flush()
    msg = parse_frame(reply).message
    assert isinstance(msg, Icmpv6ParamProblem) and msg.code == 3
    assert msg.invoking_identification() == exp2.identifications[0]

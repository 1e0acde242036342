"""Command-line entry point: ``ipv6frag campaign|oracle|fingerprint|report|scenario``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from ipaddress import IPv6Address

from . import report as rep
from .models import DEFAULT_SELECTION, MODEL_CHOICES, build_campaign, load_model, manifest_lines
from .reassembly import Policy, reassemble_frames
from .runner import PrivilegeRequired, RunnerConfig, RunnerError, check_privileges, run_campaign
from .scenarios import (
    HOST_X,
    SYSLOG_LINE,
    VICTIM,
    Strategy,
    forge_syslog,
    rfc9099_experiment_one,
    rfc9099_experiment_two,
    syslog_attack_frames,
)
from .wire import NH_UDP, upper_checksum_ok

EXIT_OK = 0
EXIT_CASE_ERRORS = 1
EXIT_CONFIG = 2


def _modes(text: str) -> tuple[int, ...]:
    try:
        modes = tuple(sorted({int(m) for m in text.replace(",", " ").split()}))
    except ValueError:
        raise argparse.ArgumentTypeError(f"modes must be 1, 2 and/or 3, got {text!r}") from None
    if not modes or any(m not in (1, 2, 3) for m in modes):
        raise argparse.ArgumentTypeError(f"modes must be 1, 2 and/or 3, got {text!r}")
    return modes


def _selection(args) -> list[str]:
    return args.model or list(DEFAULT_SELECTION)


def _cases(args):
    custom = {"new": load_model(args.geometry)} if getattr(args, "geometry", None) else None
    cases = build_campaign(_selection(args), args.modes, custom)
    if getattr(args, "limit", None):
        cases = cases[: args.limit]
    return cases


def cmd_campaign(args) -> int:
    try:
        config = RunnerConfig(
            target=args.target,
            interface=args.iface,
            source=args.source,
            inter_frame_delay=args.delay_ms,
            reply_timeout=args.timeout_s,
            retries=args.retries,
            dry_run=args.dry_run,
            pcap_path=args.pcap,
            seed=args.seed,
            param_problem_on_incomplete_chain=args.param_problem,
        )
        if config.live:
            check_privileges()
        cases = _cases(args)
    except PrivilegeRequired as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    target = str(config.target) if config.live else f"dry-run:{config.dry_run.value}"
    sink = rep.JsonlSink(args.out, target) if args.out else None
    try:
        results = run_campaign(cases, config, sink)
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if sink is not None:
            sink.close()
    if not results:
        print("no cases selected")
        return EXIT_OK
    report = rep.aggregate(results, target)
    if args.csv:
        rep.emit(report, results, "csv", args.csv)
    print(rep.summary(report), end="")
    return EXIT_CASE_ERRORS if report.errors else EXIT_OK


def cmd_oracle(args) -> int:
    cases = _cases(args)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for line in manifest_lines(cases, _selection(args), with_oracle=not args.no_oracle):
            out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _load_all(paths):
    results, target = [], ""
    for path in paths:
        header, rs = rep.read_results(path)
        target = target or header.get("target", "")
        results += rs
    return target, results


def cmd_fingerprint(args) -> int:
    try:
        target, results = _load_all(args.results)
        report = rep.aggregate(results, target)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(report.to_dict()["fingerprint"], indent=2))
    else:
        for s in report.fingerprint:
            print(f"{s.rank:2d}. {s.policy.value:10s} {s.agreement:7.2%} ({s.agree}/{s.total})")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    try:
        for path in args.results:
            target, results = _load_all([path])
            reports.append(rep.aggregate(results, target or os.path.basename(path)))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.csv:
        with open(args.csv, "w") as fh:
            rep.write_matrix(reports, fh)
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        for r in reports:
            print(rep.summary(r), end="")
    return EXIT_OK


def cmd_golden(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    for name, case in (("rfc9099_exp1", rfc9099_experiment_one()), ("rfc9099_exp2", rfc9099_experiment_two())):
        path = os.path.join(args.out, f"{name}.hex")
        with open(path, "w") as fh:
            for frame in case.frames:
                fh.write(frame.hex() + "\n")
        print(path)
    return EXIT_OK


def cmd_modification(args) -> int:
    line = args.line.encode()
    kwargs = {"seed": args.seed}
    if args.strategy is Strategy.DELTA_COMPENSATION:
        kwargs["slot"] = args.slot
    if args.desired is not None:
        kwargs["desired"] = args.desired.encode()
    try:
        forged = forge_syslog(line, args.strategy, **kwargs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    frames = syslog_attack_frames(line, forged, forged_first=not args.forged_last)
    print(f"original fragment 2: {forged.original_payload!r}")
    print(f"forged fragment 2:   {forged.forged_payload!r}")
    for policy in Policy:
        outcome = reassemble_frames(frames, policy)[0]
        if outcome.complete:
            valid = upper_checksum_ok(HOST_X, VICTIM, NH_UDP, outcome.payload)
            took = "forged" if forged.forged_payload in outcome.payload else "original"
            print(f"{policy.value:10s} Complete  checksum {'valid' if valid else 'BAD'}  kept {took} bytes")
        else:
            print(f"{policy.value:10s} {outcome}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipv6frag", description="Overlapping IPv6 fragment test suite")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def selection_flags(p):
        p.add_argument("--model", action="append", choices=MODEL_CHOICES + ("all",),
                       help=f"repeatable; default {' '.join(DEFAULT_SELECTION)}")
        p.add_argument("--modes", type=_modes, default=(1, 2, 3), help="e.g. 1,2,3")
        p.add_argument("--geometry", help="JSON file replacing the new-model geometry")
        p.add_argument("--limit", type=int, help="run only the first N cases")

    c = sub.add_parser("campaign", help="send test cases to a target (or a simulated one)")
    selection_flags(c)
    c.add_argument("--target", type=IPv6Address, default=IPv6Address("::1"))
    c.add_argument("--iface", help="capture/send interface (live runs)")
    c.add_argument("--source", type=IPv6Address)
    c.add_argument("--dry-run", type=Policy, choices=list(Policy), metavar="POLICY",
                   help="simulate the target with this policy: " + ", ".join(p.value for p in Policy))
    c.add_argument("--param-problem", action="store_true",
                   help="simulated target answers incomplete first fragments with Parameter Problem")
    c.add_argument("--out", help="results json-lines file")
    c.add_argument("--csv", help="write the reply-count matrix here")
    c.add_argument("--delay-ms", type=float, default=10.0)
    c.add_argument("--timeout-s", type=float, default=35.0)
    c.add_argument("--retries", type=int, default=1)
    c.add_argument("--seed", type=int, help="randomise fragment identifications")
    c.add_argument("--pcap", help="write captured traffic to this pcap file")
    c.set_defaults(func=cmd_campaign)

    o = sub.add_parser("oracle", help="write the campaign manifest with expected outcomes")
    selection_flags(o)
    o.add_argument("--out")
    o.add_argument("--no-oracle", action="store_true", help="list cases only")
    o.set_defaults(func=cmd_oracle)

    f = sub.add_parser("fingerprint", help="rank reassembly policies against observed results")
    f.add_argument("results", nargs="+")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_fingerprint)

    r = sub.add_parser("report", help="compliance summary, one per results file")
    r.add_argument("results", nargs="+")
    r.add_argument("--csv")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("scenario", help="fixed scenarios")
    ssub = s.add_subparsers(dest="scenario", required=True)
    g = ssub.add_parser("golden", help="write hex dumps of the RFC 9099 experiment frames")
    g.add_argument("--out", default="golden")
    g.set_defaults(func=cmd_golden)
    m = ssub.add_parser("modification", help="offline syslog modification attack")
    m.add_argument("--strategy", type=Strategy, choices=list(Strategy), default=Strategy.SHUFFLE,
                   metavar="{Shuffle,DeltaCompensation}")
    m.add_argument("--slot", type=int, default=0)
    m.add_argument("--desired", help="forged text for fragment 2 (56 bytes)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--line", default=SYSLOG_LINE)
    m.add_argument("--forged-last", action="store_true", help="inject after the real second fragment")
    m.set_defaults(func=cmd_modification)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # output piped into head or similar
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

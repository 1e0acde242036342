"""Compliance verdicts, reply-count matrices and policy fingerprints."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

from .reassembly import ALL_POLICIES, PolicyScore, fingerprint_policy
from .runner import ECHO_REPLY, RESULTS_SCHEMA, TestResult
from .scenarios import Rfc9099Verdict, classify_rfc9099

MATRIX_COLUMNS = ("target", "shankar_paxson", "test1", "test2", "test3")
# which model feeds the per-mode columns of the matrix
MATRIX_MODEL = "new"
SP_MODEL = "sp"


def model_family(name: str) -> str:
    """Group the per-geometry three-fragment models under one name."""
    return "3frag" if name.startswith("3frag-") else name


class EmptyResults(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class Rfc5722Verdict:
    compliant: bool
    evidence: tuple[str, ...] = ()

    def __str__(self) -> str:
        if self.compliant:
            return "Compliant"
        return f"NonCompliant({len(self.evidence)} overlapping cases answered)"


@dataclass(frozen=True)
class ComplianceReport:
    target: str
    counts: dict[tuple[str, int], int]
    cases: dict[tuple[str, int], int]
    rfc5722: Rfc5722Verdict
    rfc9099: dict[str, Rfc9099Verdict]
    fingerprint: list[PolicyScore] = field(default_factory=list)
    errors: int = 0

    def replies(self, model: str, mode: int | None = None) -> int:
        return sum(n for (m, md), n in self.counts.items() if m == model and (mode is None or md == mode))

    def matrix_row(self) -> dict[str, object]:
        return {
            "target": self.target,
            "shankar_paxson": self.replies(SP_MODEL),
            "test1": self.replies(MATRIX_MODEL, 1),
            "test2": self.replies(MATRIX_MODEL, 2),
            "test3": self.replies(MATRIX_MODEL, 3),
        }

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "counts": [{"model": m, "mode": md, "replies": n, "cases": self.cases[(m, md)]}
                       for (m, md), n in sorted(self.counts.items())],
            "rfc5722": {"compliant": self.rfc5722.compliant, "evidence": list(self.rfc5722.evidence)},
            "rfc9099": {k: v.value for k, v in sorted(self.rfc9099.items())},
            "fingerprint": [
                {"policy": s.policy.value, "rank": s.rank, "agree": s.agree, "total": s.total,
                 "agreement": round(s.agreement, 4)}
                for s in self.fingerprint
            ],
            "errors": self.errors,
        }


def aggregate(results: Iterable[TestResult], target: str = "") -> ComplianceReport:
    """Fold results into one report; the order of ``results`` does not matter."""
    results = sorted(results, key=lambda r: r.case_id)
    if not results:
        raise EmptyResults("no results to aggregate")
    counts: dict[tuple[str, int], int] = defaultdict(int)
    cases: dict[tuple[str, int], int] = defaultdict(int)
    evidence = []
    rfc9099 = {}
    errors = 0
    for r in results:
        if r.error is not None:
            errors += 1
        key = (model_family(r.model), r.mode)
        counts[key] += r.reply_count
        cases[key] += 1
        if r.overlap and r.observed == ECHO_REPLY:
            evidence.append(r.case_id)
        if r.model.startswith("rfc9099"):
            rfc9099[r.model] = classify_rfc9099(r.observed)

    usable = [r for r in results if r.error is None]
    fingerprint = []
    if usable:
        observed = {r.case_id: r.observed for r in usable}
        oracle = {r.case_id: {p: v["replies"] for p, v in r.oracle.items()} for r in usable}
        fingerprint = fingerprint_policy(observed, oracle, ALL_POLICIES)

    return ComplianceReport(
        target=target,
        counts=dict(counts),
        cases=dict(cases),
        rfc5722=Rfc5722Verdict(not evidence, tuple(evidence)),
        rfc9099=rfc9099,
        fingerprint=fingerprint,
        errors=errors,
    )


def results_header(target: str = "", count: int | None = None) -> dict:
    return {"record": "header", "schema": RESULTS_SCHEMA, "target": target, "results": count}


def write_jsonl(results: Sequence[TestResult], fh: TextIO, target: str = "") -> None:
    fh.write(json.dumps(results_header(target, len(results)), sort_keys=True) + "\n")
    for r in results:
        fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


class JsonlSink:
    """Append results to a json-lines file as they are produced."""

    def __init__(self, path: str, target: str = ""):
        try:
            self._fh = open(path, "w")
            self._fh.write(json.dumps(results_header(target), sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc

    def __call__(self, result: TestResult) -> None:
        self._fh.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> JsonlSink:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_results(path_or_fh: str | TextIO) -> tuple[dict, list[TestResult]]:
    """Parse a results file back into (header, results)."""
    if isinstance(path_or_fh, str):
        try:
            with open(path_or_fh) as fh:
                lines = fh.read().splitlines()
        except OSError as exc:
            raise IoFailure(f"cannot read {path_or_fh}: {exc}") from exc
    else:
        lines = path_or_fh.read().splitlines()
    header: dict = {}
    results = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("record") == "header":
            if rec.get("schema") != RESULTS_SCHEMA:
                raise ValueError(f"line {n}: unsupported schema {rec.get('schema')!r}")
            header = rec
            continue
        results.append(TestResult.from_dict(rec))
    if not header:
        raise ValueError("results file has no header record")
    return header, results


def write_matrix(reports: Sequence[ComplianceReport], fh: TextIO) -> None:
    writer = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.matrix_row())


def summary(report: ComplianceReport) -> str:
    out = io.StringIO()
    name = report.target or "target"
    out.write(f"{name}\n")
    row = report.matrix_row()
    out.write(
        "  replies: shankar-paxson={shankar_paxson} test1={test1} test2={test2} test3={test3}\n".format(**row)
    )
    for (model, mode), n in sorted(report.counts.items()):
        out.write(f"    {model} mode {mode}: {n} replies over {report.cases[(model, mode)]} cases\n")
    out.write(f"  RFC 5722: {report.rfc5722}\n")
    for case in report.rfc5722.evidence[:5]:
        out.write(f"    answered {case}\n")
    if len(report.rfc5722.evidence) > 5:
        out.write(f"    ... and {len(report.rfc5722.evidence) - 5} more\n")
    for exp, verdict in sorted(report.rfc9099.items()):
        tag = "compliant" if verdict.compliant else "not compliant"
        out.write(f"  RFC 9099 {exp}: {verdict.value} ({tag})\n")
    if report.fingerprint:
        out.write("  closest reassembly policies:\n")
        for s in report.fingerprint:
            out.write(f"    {s.rank}. {s.policy.value:10s} {s.agreement:7.2%} ({s.agree}/{s.total})\n")
    if report.errors:
        out.write(f"  {report.errors} cases failed to run\n")
    return out.getvalue()


def emit(report: ComplianceReport | None, results: Sequence[TestResult], fmt: str, path: str) -> None:
    """Write ``results`` (jsonl), the count matrix (csv) or a text summary."""
    try:
        with open(path, "w") as fh:
            if fmt in ("jsonl", "json-lines"):
                write_jsonl(results, fh, report.target if report else "")
            elif fmt == "csv":
                write_matrix([report] if report else [], fh)
            elif fmt in ("summary", "text"):
                fh.write(summary(report) if report else "no results\n")
            else:
                raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


__all__ = [
    "EmptyResults", "IoFailure", "Rfc5722Verdict", "ComplianceReport", "aggregate",
    "write_jsonl", "JsonlSink", "read_results", "write_matrix", "summary", "emit",
]

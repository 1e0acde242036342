"""Campaign execution against a live target or the reassembly simulator."""

from __future__ import annotations

import logging
import queue
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace
from ipaddress import IPv6Address
from typing import Callable, Iterable, Protocol, Sequence

from .checksum import parity_for_packet
from .models import Mode, TestCase
from .reassembly import (
    ALL_POLICIES,
    DropReason,
    Policy,
    Status,
    case_oracle,
    run_stream,
    spec_from_packet,
)
from .wire import (
    ICMPV6_ECHO_REPLY,
    ICMPV6_ECHO_REQUEST,
    NH_ICMPV6,
    Frame,
    Icmpv6Echo,
    Icmpv6Message,
    Icmpv6ParamProblem,
    Ipv6Header,
    WireError,
    echo_fragments,
    parse_frame,
    serialize_packet,
    upper_checksum_ok,
)

log = logging.getLogger(__name__)

DEFAULT_SOURCE = IPv6Address("fd00::1")
DEFAULT_TARGET = IPv6Address("fd00::2")
RESULTS_SCHEMA = "ipv6frag.results/1"
MIN_MTU = 1280


class RunnerError(Exception):
    pass


class SendFailure(RunnerError):
    pass


class CaptureFailure(RunnerError):
    pass


class PrivilegeRequired(RunnerError):
    pass


@dataclass(frozen=True)
class RunnerConfig:
    target: IPv6Address = DEFAULT_TARGET
    interface: str | None = None
    source: IPv6Address | None = None
    inter_frame_delay: float = 10.0  # milliseconds
    reply_timeout: float = 35.0  # seconds; longer than the usual 30 s reassembly timer
    retries: int = 1
    dry_run: Policy | None = None
    pcap_path: str | None = None
    seed: int | None = None
    early_completion: bool = False
    param_problem_on_incomplete_chain: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", IPv6Address(self.target))
        if self.source is not None:
            object.__setattr__(self, "source", IPv6Address(self.source))
        if self.dry_run is not None:
            object.__setattr__(self, "dry_run", Policy(self.dry_run))
        if self.reply_timeout <= 0:
            raise ValueError("reply_timeout must be positive")
        if self.inter_frame_delay < 0:
            raise ValueError("inter_frame_delay cannot be negative")
        if self.retries < 0:
            raise ValueError("retries cannot be negative")
        if self.dry_run is None and not self.interface:
            raise ValueError("live runs need an interface")

    @property
    def live(self) -> bool:
        return self.dry_run is None

    @property
    def src(self) -> IPv6Address:
        return self.source or (self.target if self.target.is_loopback else DEFAULT_SOURCE)


@dataclass(frozen=True)
class Observed:
    kind: str  # EchoReply, Silence, ParamProblem, OtherIcmp
    msg_type: int | None = None
    code: int | None = None

    def __str__(self) -> str:
        if self.kind == "ParamProblem":
            return f"ParamProblem({self.code})"
        if self.kind == "OtherIcmp":
            return f"OtherIcmp({self.msg_type},{self.code})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> Observed:
        if text in ("EchoReply", "Silence"):
            return cls(text)
        name, _, args = text.partition("(")
        nums = [int(x) for x in args.rstrip(")").split(",") if x]
        if name == "ParamProblem" and len(nums) == 1:
            return cls(name, 4, nums[0])
        if name == "OtherIcmp" and len(nums) == 2:
            return cls(name, nums[0], nums[1])
        raise ValueError(f"unrecognised observation {text!r}")


ECHO_REPLY = Observed("EchoReply")
SILENCE = Observed("Silence")


@dataclass
class TestResult:
    __test__ = False

    case_id: str
    model: str
    mode: int
    arrival_order: list[str]
    observed: Observed
    reply_count: int
    oracle: dict[str, dict]
    overlap: bool = True
    started: float = 0.0
    finished: float = 0.0
    error: str | None = None

    def __post_init__(self) -> None:
        if (self.reply_count >= 1) != (self.observed == ECHO_REPLY) and self.error is None:
            raise ValueError(f"{self.case_id}: reply_count {self.reply_count} contradicts {self.observed}")

    def expected_replies(self, policy: Policy | str) -> int:
        return self.oracle[Policy(policy).value]["replies"]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "model": self.model,
            "mode": self.mode,
            "arrival_order": list(self.arrival_order),
            "observed": str(self.observed),
            "reply_count": self.reply_count,
            "oracle": self.oracle,
            "overlap": self.overlap,
            "started": self.started,
            "finished": self.finished,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TestResult:
        return cls(
            case_id=d["case_id"],
            model=d["model"],
            mode=int(d["mode"]),
            arrival_order=list(d["arrival_order"]),
            observed=Observed.parse(d["observed"]),
            reply_count=int(d["reply_count"]),
            oracle={k: dict(v) for k, v in d["oracle"].items()},
            overlap=bool(d.get("overlap", True)),
            started=float(d.get("started", 0.0)),
            finished=float(d.get("finished", 0.0)),
            error=d.get("error"),
        )


def oracle_record(case: TestCase, early_completion: bool = False) -> dict[str, dict]:
    return {
        p.value: {"outcome": str(outcome), "replies": replies}
        for p, (outcome, replies) in case_oracle(case, ALL_POLICIES, early_completion).items()
    }


@dataclass(frozen=True)
class Transmission:
    frames: tuple[Frame, ...]
    identifications: tuple[int, ...]
    echo_identifier: int
    sequences: tuple[int, ...]
    max_replies: int


def transmission_plan(case: TestCase, src: IPv6Address, dst: IPv6Address, echo_identifier: int) -> Transmission:
    """Frames of a case in sending order.

    Packet ``n`` (1-based) of a multi-packet case uses echo sequence ``n`` and
    the pattern scheme for ``n``; a repeated case resends packet 1.
    """
    model = case.model
    frames: list[Frame] = []
    if case.mode is Mode.MULTI_PACKET:
        packets = [(n, ident) for n, ident in enumerate(case.identifications, start=1)]
    else:
        packets = [(1, case.identifications[0])]
    for n, ident in packets:
        built = echo_fragments(model, src, dst, ident, echo_identifier, n, parity_for_packet(n))
        frames += [built[i] for i in case.arrival_order]
    if case.mode is Mode.REPEAT_SAME_ID:
        frames = frames * case.repetitions
    return Transmission(
        tuple(frames),
        tuple(case.identifications),
        echo_identifier,
        tuple(n for n, _ in packets),
        case.repetitions,
    )


class Transport(Protocol):
    def start(self) -> None: ...
    def send(self, frame: Frame) -> None: ...
    def drain(self) -> None: ...
    def receive(self, timeout: float) -> Frame | None: ...
    def close(self) -> None: ...


class SimulatedTarget:
    """A host whose reassembly follows ``policy``.

    Frames are buffered per (source, destination, identification) and judged
    when :meth:`flush` is called at the end of a case. Complete datagrams
    holding an echo request are answered; checksums are only checked when
    ``verify_checksum`` is set.
    """

    def __init__(
        self,
        policy: Policy | str,
        param_problem_on_incomplete_chain: bool = False,
        early_completion: bool = False,
        verify_checksum: bool = False,
    ):
        self.policy = Policy(policy)
        self.param_problem = param_problem_on_incomplete_chain
        self.early_completion = early_completion
        self.verify_checksum = verify_checksum
        self._buffers: dict[tuple, list] = {}

    def receive(self, frame: Frame) -> list[Frame]:
        packet = parse_frame(frame)
        frag = packet.fragment
        if frag is None:
            return self._answer(packet.header, packet.raw[40 + _chain_len(packet):], NH_ICMPV6)
        key = (packet.header.src, packet.header.dst, frag.identification)
        slot = self._buffers.setdefault(key, [])
        slot.append((spec_from_packet(packet, str(len(slot))), packet.fragment_payload, packet))
        return []

    def flush(self) -> list[Frame]:
        replies: list[Frame] = []
        for (src, dst, ident), items in self._buffers.items():
            specs = [s for s, _, _ in items]
            outcomes = run_stream(specs, [p for _, p, _ in items], self.policy, ident, self.early_completion)
            first = next((pk for s, _, pk in items if s.offset_units == 0), None)
            header = items[0][2].header
            for outcome in outcomes:
                if outcome.complete and first is not None:
                    replies += self._answer(header, outcome.payload, first.fragment.next_header)
                elif (
                    self.param_problem
                    and outcome.status is Status.DROPPED
                    and outcome.reason is DropReason.NO_HEADER
                    and first is not None
                ):
                    replies.append(_param_problem(header, first.raw))
        self._buffers.clear()
        return replies

    def _answer(self, header: Ipv6Header, upper: bytes, protocol: int) -> list[Frame]:
        if protocol != NH_ICMPV6 or len(upper) < 8 or upper[0] != ICMPV6_ECHO_REQUEST or upper[1] != 0:
            return []
        if self.verify_checksum and not upper_checksum_ok(header.src, header.dst, NH_ICMPV6, upper):
            return []
        ident, seq = struct.unpack("!HH", upper[4:8])
        reply = Icmpv6Echo(ICMPV6_ECHO_REPLY, ident, seq, upper[8:])
        return [serialize_packet(Ipv6Header(header.dst, header.src, NH_ICMPV6), (), reply)]


def _chain_len(packet) -> int:
    return sum(len(e.pack()) for e in packet.chain)


def _param_problem(header: Ipv6Header, invoking: bytes) -> Frame:
    # code 3: first fragment has an incomplete IPv6 header chain
    quoted = invoking[: MIN_MTU - 48]
    msg = Icmpv6ParamProblem(3, 0, quoted)
    return serialize_packet(Ipv6Header(header.dst, header.src, NH_ICMPV6), (), msg)


class SimulatedTransport:
    """Loop frames through a :class:`SimulatedTarget` without touching the network."""

    def __init__(self, target: SimulatedTarget):
        self.target = target
        self._pending: list[Frame] = []
        self.sent: list[Frame] = []

    def start(self) -> None:
        pass

    def send(self, frame: Frame) -> None:
        self.sent.append(frame)
        self._pending += self.target.receive(frame)

    def drain(self) -> None:
        self._pending.clear()

    def receive(self, timeout: float) -> Frame | None:
        if not self._pending:
            self._pending += self.target.flush()
        return self._pending.pop(0) if self._pending else None

    def close(self) -> None:
        pass


ETH_P_ALL = 0x0003
ETH_P_IPV6 = 0x86DD
PACKET_OUTGOING = 4


class PcapWriter:
    """Classic pcap file with raw IPv6 link type."""

    LINKTYPE_IPV6 = 229

    def __init__(self, path: str, snaplen: int = 65535):
        self._fh = open(path, "wb")
        self._fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, snaplen, self.LINKTYPE_IPV6))
        self._lock = threading.Lock()

    def write(self, frame: Frame, ts: float | None = None) -> None:
        ts = time.time() if ts is None else ts
        sec, usec = int(ts), int((ts % 1) * 1_000_000)
        with self._lock:
            self._fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)) + frame)

    def close(self) -> None:
        self._fh.close()


def read_pcap(path: str) -> list[tuple[float, bytes]]:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, _, _, _, _, _, linktype = struct.unpack("<IHHiIII", data[:24])
    if magic != 0xA1B2C3D4 or linktype != PcapWriter.LINKTYPE_IPV6:
        raise ValueError("not a raw-IPv6 pcap written by PcapWriter")
    out, pos = [], 24
    while pos < len(data):
        sec, usec, incl, _orig = struct.unpack("<IIII", data[pos:pos + 16])
        out.append((sec + usec / 1e6, data[pos + 16:pos + 16 + incl]))
        pos += 16 + incl
    return out


def check_privileges() -> None:
    """Raise PrivilegeRequired unless raw IPv6 and packet sockets can be opened."""
    for family, kind, proto in (
        (socket.AF_INET6, socket.SOCK_RAW, socket.IPPROTO_RAW),
        (socket.AF_PACKET, socket.SOCK_DGRAM, socket.htons(ETH_P_IPV6)),
    ):
        try:
            socket.socket(family, kind, proto).close()
        except PermissionError as exc:
            raise PrivilegeRequired(
                "raw sockets need root or CAP_NET_RAW (try sudo, or setcap cap_net_raw+ep on the interpreter)"
            ) from exc
        except OSError as exc:
            raise PrivilegeRequired(f"cannot open raw socket: {exc}") from exc


class LiveTransport:
    """Raw IPv6 sender plus a packet-socket capture thread on one interface.

    Sending waits until the capture socket is bound, so replies to the first
    frame are never missed. Every frame seen on the interface (ours
    included) is queued; outgoing copies are skipped.
    """

    def __init__(self, interface: str, target: IPv6Address, pcap: PcapWriter | None = None):
        self.interface = interface
        self.target = IPv6Address(target)
        self.pcap = pcap
        self.ready = threading.Event()
        self._stop = threading.Event()
        self._queue: queue.Queue[Frame] = queue.Queue()
        self._thread: threading.Thread | None = None
        self._capture_error: BaseException | None = None
        self._tx: socket.socket | None = None
        self.captured: list[Frame] = []

    def start(self) -> None:
        check_privileges()
        try:
            socket.if_nametoindex(self.interface)
        except OSError as exc:
            raise CaptureFailure(f"no interface {self.interface!r}") from exc
        self._tx = socket.socket(socket.AF_INET6, socket.SOCK_RAW, socket.IPPROTO_RAW)
        try:
            self._tx.setsockopt(socket.SOL_SOCKET, socket.SO_BINDTODEVICE, self.interface.encode())
        except OSError:
            log.warning("could not bind sender to %s; routing decides the egress", self.interface)
        self._thread = threading.Thread(target=self._capture, name="ipv6frag-capture", daemon=True)
        self._thread.start()
        if not self.ready.wait(5.0):
            raise CaptureFailure(f"capture on {self.interface} did not start")
        if self._capture_error is not None:
            raise CaptureFailure(str(self._capture_error))

    def _capture(self) -> None:
        try:
            sock = socket.socket(socket.AF_PACKET, socket.SOCK_DGRAM, socket.htons(ETH_P_IPV6))
            sock.bind((self.interface, ETH_P_IPV6))
            sock.settimeout(0.1)
        except OSError as exc:
            self._capture_error = exc
            self.ready.set()
            return
        self.ready.set()
        with sock:
            while not self._stop.is_set():
                try:
                    frame, addr = sock.recvfrom(65535 + 40)
                except socket.timeout:
                    continue
                except OSError as exc:
                    self._capture_error = exc
                    return
                if addr[2] == PACKET_OUTGOING:
                    continue
                if self.pcap is not None:
                    self.pcap.write(frame)
                self._queue.put(frame)

    def send(self, frame: Frame) -> None:
        if self._tx is None or not self.ready.is_set():
            raise SendFailure("capture is not running; call start() first")
        if self._capture_error is not None:
            raise CaptureFailure(str(self._capture_error))
        dst = str(IPv6Address(frame[24:40]))
        try:
            self._tx.sendto(frame, (dst, 0))
        except OSError as exc:
            raise SendFailure(f"send to {dst} failed: {exc}") from exc

    def drain(self) -> None:
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                return

    def receive(self, timeout: float) -> Frame | None:
        if self._capture_error is not None:
            raise CaptureFailure(str(self._capture_error))
        try:
            frame = self._queue.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            return None
        self.captured.append(frame)
        return frame

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        if self._tx is not None:
            self._tx.close()
        if self.pcap is not None:
            self.pcap.close()


def _classify(frame: Frame, plan: Transmission, target: IPv6Address) -> Observed | None:
    """Observation this captured frame contributes to the case, or None if unrelated."""
    try:
        packet = parse_frame(frame)
    except WireError:
        return None
    if packet.header.src != target or packet.fragment is not None:
        return None
    msg = packet.message
    if isinstance(msg, Icmpv6Echo):
        if msg.msg_type == ICMPV6_ECHO_REPLY and msg.identifier == plan.echo_identifier and msg.sequence in plan.sequences:
            return ECHO_REPLY
        return None
    if isinstance(msg, Icmpv6ParamProblem):
        if msg.invoking_identification() in plan.identifications:
            return Observed("ParamProblem", msg.msg_type, msg.code)
        return None
    if isinstance(msg, Icmpv6Message) and msg.msg_type < 128:
        try:
            inner = parse_frame(msg.body[4:], strict_length=False)
        except WireError:
            return None
        frag = inner.fragment
        if frag is not None and frag.identification in plan.identifications:
            return Observed("OtherIcmp", msg.msg_type, msg.code)
    return None


def run_case(
    case: TestCase,
    config: RunnerConfig,
    transport: Transport | None = None,
    echo_identifier: int = 1,
    oracle: dict[str, dict] | None = None,
) -> TestResult:
    """Send one case and wait for what comes back.

    Dry runs return as soon as the simulated target has answered. Live runs
    wait up to ``reply_timeout`` after the last frame, stopping early only
    once every possible echo reply has arrived.
    """
    if transport is None:
        if config.live:
            raise ValueError("live run_case needs a started transport")
        transport = SimulatedTransport(SimulatedTarget(
            config.dry_run, config.param_problem_on_incomplete_chain, config.early_completion
        ))
    plan = transmission_plan(case, config.src, config.target, echo_identifier & 0xFFFF)
    if oracle is None:
        oracle = oracle_record(case, config.early_completion)
    started = time.time()
    transport.drain()
    for i, frame in enumerate(plan.frames):
        if i and config.live and config.inter_frame_delay:
            time.sleep(config.inter_frame_delay / 1000.0)
        transport.send(frame)

    replies = 0
    others: list[Observed] = []
    deadline = time.monotonic() + (config.reply_timeout if config.live else 0.0)
    while True:
        remaining = deadline - time.monotonic()
        frame = transport.receive(remaining)
        if frame is None:
            if config.live and time.monotonic() < deadline:
                continue
            break
        seen = _classify(frame, plan, config.target)
        if seen == ECHO_REPLY:
            replies += 1
            if replies >= plan.max_replies:
                break
        elif seen is not None:
            others.append(seen)

    if replies:
        observed = ECHO_REPLY
    elif others:
        observed = next((o for o in others if o.kind == "ParamProblem"), others[0])
    else:
        observed = SILENCE
    return TestResult(
        case_id=case.case_id,
        model=case.model.name,
        mode=int(case.mode),
        arrival_order=list(case.order_letters),
        observed=observed,
        reply_count=replies,
        oracle=oracle,
        overlap=case.has_overlap,
        started=started,
        finished=time.time(),
    )


def allocate_identifications(cases: Sequence[TestCase], seed: int | str | None = None) -> dict[str, tuple[int, ...]]:
    """Fresh, campaign-wide unique 32-bit identifications per case.

    Repeated cases get one identification, multi-packet cases one per packet.
    """
    rng = random.Random(seed)
    need = [len(c.identifications) for c in cases]
    pool = rng.sample(range(1, 2**32), sum(need))
    out, pos = {}, 0
    for case, n in zip(cases, need):
        out[case.case_id] = tuple(pool[pos:pos + n])
        pos += n
    return out


def apply_identifications(cases: Sequence[TestCase], assignment: dict[str, tuple[int, ...]]) -> list[TestCase]:
    return [replace(c, identifications=assignment[c.case_id]) for c in cases]


def _error_result(case: TestCase, oracle: dict, started: float, exc: BaseException) -> TestResult:
    return TestResult(
        case_id=case.case_id,
        model=case.model.name,
        mode=int(case.mode),
        arrival_order=list(case.order_letters),
        observed=SILENCE,
        reply_count=0,
        oracle=oracle,
        overlap=case.has_overlap,
        started=started,
        finished=time.time(),
        error=f"{type(exc).__name__}: {exc}",
    )


def run_campaign(
    cases: Iterable[TestCase],
    config: RunnerConfig,
    sink: Callable[[TestResult], None] | None = None,
    transport: Transport | None = None,
) -> list[TestResult]:
    """Run cases one after another against a single target.

    Capture and send failures are retried ``config.retries`` times, then
    recorded on the result; the campaign carries on with the next case.
    """
    cases = list(cases)
    if config.seed is not None:
        cases = apply_identifications(cases, allocate_identifications(cases, config.seed))
    own_transport = transport is None
    if own_transport:
        if config.live:
            pcap = PcapWriter(config.pcap_path) if config.pcap_path else None
            transport = LiveTransport(config.interface, config.target, pcap)
        else:
            transport = SimulatedTransport(SimulatedTarget(
                config.dry_run, config.param_problem_on_incomplete_chain, config.early_completion
            ))
        transport.start()
    results = []
    try:
        for index, case in enumerate(cases):
            oracle = oracle_record(case, config.early_completion)
            started = time.time()
            for attempt in range(config.retries + 1):
                try:
                    result = run_case(case, config, transport, index + 1, oracle)
                    break
                except (CaptureFailure, SendFailure) as exc:
                    log.warning("%s attempt %d failed: %s", case.case_id, attempt + 1, exc)
                    result = _error_result(case, oracle, started, exc)
            results.append(result)
            if sink is not None:
                sink(result)
    finally:
        if own_transport:
            transport.close()
    return results

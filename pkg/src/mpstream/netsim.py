"""Deterministic discrete-event simulation of a two-path streaming session.

Each path is a request RTT, two handshake processing delays and a
piecewise-constant bandwidth trace. The same :class:`ChunkScheduler` and
:class:`PlayoutBuffer` used by the live engine drive the run.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Dict, Iterable, List, Optional, Sequence, Tuple

from .estimators import ThroughputSample
from .playout import BufferConfig, Phase, PlayoutBuffer
from .scheduler import DEFER, ChunkAssignment, ChunkScheduler, SchedulerConfig

# Phase crossings are observed just past the exact crossing so that
# "below the low watermark" is strictly true when the wake-up fires.
_WAKE_EPSILON_MS = 1e-3


class TraceExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class PathModel:
    rtt: float  # ms
    delta1: float = 0.0  # ms
    delta2: float = 0.0  # ms
    bandwidth_trace: Tuple[Tuple[float, float], ...] = ((0.0, 1000.0),)  # (start_ms, bytes/ms)
    trace_end: Optional[float] = None  # ms; None means the last segment never ends

    def __post_init__(self):
        object.__setattr__(
            self, "bandwidth_trace", tuple((float(s), float(r)) for s, r in self.bandwidth_trace)
        )
        if self.rtt < 0 or self.delta1 < 0 or self.delta2 < 0:
            raise ValueError("rtt and handshake delays must be non-negative")
        tr = self.bandwidth_trace
        if not tr:
            raise ValueError("bandwidth trace is empty")
        if any(r <= 0 for _, r in tr):
            raise ValueError("trace rates must be positive")
        if any(b[0] <= a[0] for a, b in zip(tr, tr[1:])):
            raise ValueError("trace segments must be strictly ordered by start time")
        if self.trace_end is not None and self.trace_end <= tr[-1][0]:
            raise ValueError("trace_end must come after the last segment start")

    @classmethod
    def constant(cls, rtt: float, rate: float, delta1: float = 0.0, delta2: float = 0.0) -> "PathModel":
        return cls(rtt, delta1, delta2, ((0.0, rate),))


def setup_time(path: PathModel) -> Tuple[float, float, float]:
    """(eta, psi, pi): secure connection setup, metadata received, first media byte."""
    base = path.delta1 + path.delta2
    eta = 4 * path.rtt + base
    psi = 6 * path.rtt + base
    return eta, psi, psi + eta


def chunk_transfer_time(path: PathModel, range_len: int, start_ms: float) -> float:
    """Completion time of a range request issued at ``start_ms``: one RTT before
    the first byte, then the payload drains through the bandwidth trace."""
    trace = path.bandwidth_trace
    t = start_ms + path.rtt
    if t < trace[0][0]:
        raise TraceExhausted(f"trace starts at {trace[0][0]} ms, after request time {t} ms")
    remaining = float(range_len)
    if remaining <= 0:
        return t
    i = 0
    while i + 1 < len(trace) and trace[i + 1][0] <= t:
        i += 1
    while True:
        rate = trace[i][1]
        seg_end = trace[i + 1][0] if i + 1 < len(trace) else path.trace_end
        if seg_end is None:
            return t + remaining / rate
        capacity = (seg_end - t) * rate
        if capacity >= remaining:
            return t + remaining / rate
        remaining -= capacity
        t = seg_end
        i += 1
        if i >= len(trace):
            raise TraceExhausted(f"bandwidth trace ends at {path.trace_end} ms with {remaining:.0f} B left")


def jittered(path: PathModel, rng: random.Random) -> PathModel:
    trace = tuple((s, r * rng.uniform(0.9, 1.1)) for s, r in path.bandwidth_trace)
    return replace(path, bandwidth_trace=trace)


@dataclass(frozen=True)
class SimConfig:
    paths: Tuple[Optional[PathModel], ...]
    object_size: int
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    buffer: BufferConfig = field(default_factory=lambda: BufferConfig(bitrate=312_500.0))
    rng_seed: int = 0
    jitter: bool = False
    time_limit_ms: float = 3_600_000.0
    stop_after_prebuffer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if len(self.paths) != 2:
            raise ValueError("exactly two path slots are required (None disables one)")
        if not any(p is not None for p in self.paths):
            raise ValueError("at least one path must be enabled")


@dataclass(frozen=True)
class EventRecord:
    t: float
    kind: str
    path: Optional[int] = None
    range_start: Optional[int] = None
    range_len: Optional[int] = None
    buffered: float = 0.0
    phase: str = ""
    chunk_size: Optional[int] = None
    throughput_mbps: Optional[float] = None


@dataclass
class SimSummary:
    prebuffer_download_ms: Optional[float]
    rebuffer_cycle_times: List[float]
    per_path_traffic_fraction: Dict[str, List[float]]
    stall_ms: float
    startup_ms: float
    end_ms: float
    truncated: bool
    bytes_by_path: Dict[str, List[int]]

    @property
    def mean_rebuffer_ms(self) -> Optional[float]:
        c = self.rebuffer_cycle_times
        return sum(c) / len(c) if c else None


@dataclass
class SimResult:
    log: List[EventRecord]
    summary: SimSummary
    released: List[ChunkAssignment]
    max_parked: int

    def write_log(self, fh: IO[str]) -> None:
        for rec in self.log:
            fh.write(json.dumps(asdict(rec), separators=(",", ":")) + "\n")


def _fractions(counts: Sequence[int]) -> List[float]:
    total = sum(counts)
    if total == 0:
        return [0.0 for _ in counts]
    return [c / total for c in counts]


class Simulation:
    """One simulated session. Use :func:`run` unless stepping is needed."""

    def __init__(self, config: SimConfig, check_invariants: bool = True):
        self.config = config
        self.check_invariants = check_invariants
        rng = random.Random(config.rng_seed)
        models = [
            (jittered(p, rng) if config.jitter else p) if p is not None else None
            for p in config.paths
        ]
        # a single enabled path is always scheduled as path 0
        self.models: List[PathModel] = [m for m in models if m is not None]
        self.path_labels = [i for i, m in enumerate(models) if m is not None]
        self.sched = ChunkScheduler(config.scheduler, config.object_size, n_paths=len(self.models))
        self.buffer = PlayoutBuffer(config.buffer, media_bytes=config.object_size)
        self.log: List[EventRecord] = []
        self._queue: List[tuple] = []
        self._seq = 0
        self._wake_at: Optional[float] = None
        self._issued_at: Dict[int, Tuple[float, ChunkAssignment, Phase]] = {}
        self.bytes_by_phase = {"prebuffer": [0] * 2, "rebuffer": [0] * 2}
        self.rebuffer_started: Optional[float] = None
        self.cycles: List[float] = []
        self.max_parked = 0
        self.now = 0.0

    def _push(self, t: float, kind: str, payload=None) -> None:
        heapq.heappush(self._queue, (t, self._seq, kind, payload))
        self._seq += 1

    def _record(self, kind: str, path: Optional[int] = None, a: Optional[ChunkAssignment] = None,
                chunk_size: Optional[int] = None, throughput: Optional[float] = None) -> None:
        self.log.append(
            EventRecord(
                self.now,
                kind,
                None if path is None else self.path_labels[path],
                a.range_start if a else None,
                a.range_len if a else None,
                self.buffer.buffered,
                self.buffer.phase.value,
                chunk_size,
                None if throughput is None else throughput / 125.0,
            )
        )

    def _observe_phase(self, mark: int) -> None:
        for t, src, dst in self.buffer.transitions[mark:]:
            self.log.append(EventRecord(t, "phase", buffered=self.buffer.buffered, phase=dst.value))
            if dst is Phase.RE_BUFFERING:
                self.rebuffer_started = t
            elif src in (Phase.RE_BUFFERING, Phase.DRAINED) and dst is Phase.STEADY \
                    and self.rebuffer_started is not None:
                self.cycles.append(t - self.rebuffer_started)
                self.rebuffer_started = None
            elif dst is Phase.DRAINED and self.rebuffer_started is None:
                self.rebuffer_started = t

    def _advance(self, t: float) -> None:
        mark = len(self.buffer.transitions)
        self.buffer.advance_to(t)
        self.now = t
        self._observe_phase(mark)

    def _try_assign(self) -> None:
        for i, p in enumerate(self.sched.paths):
            if p.busy or not p.ready:
                continue
            a = self.sched.next_assignment(i, self.buffer.phase)
            if a is DEFER:
                continue
            done = chunk_transfer_time(self.models[i], a.range_len, self.now)
            self._issued_at[i] = (self.now, a, self.buffer.phase)
            self._record("assign", i, a, p.chunk_size)
            self._push(done, "complete", (i, a))

    def _schedule_wake(self) -> None:
        dt = self.buffer.ms_until_next_threshold()
        if dt is None:
            return
        t = self.now + dt + _WAKE_EPSILON_MS
        if self._wake_at is not None and abs(self._wake_at - t) < 1e-9:
            return
        self._wake_at = t
        self._push(t, "wake", t)

    def run(self) -> SimResult:
        cfg = self.config
        for i, m in enumerate(self.models):
            self._push(setup_time(m)[2], "ready", i)
        truncated = False
        while self._queue:
            t, _, kind, payload = heapq.heappop(self._queue)
            if kind == "wake" and payload != self._wake_at:
                continue
            if t > cfg.time_limit_ms:
                self._advance(cfg.time_limit_ms)
                self._record("truncated")
                truncated = True
                break
            self._advance(t)
            if kind == "ready":
                self.sched.path_ready(payload, t)
                self._record("ready", payload)
            elif kind == "complete":
                i, a = payload
                issued, _, phase = self._issued_at.pop(i)
                sample = ThroughputSample(self.path_labels[i], a.range_len, t - issued)
                released = self.sched.on_chunk_complete(a, sample)
                key = "prebuffer" if phase is Phase.PRE_BUFFERING else "rebuffer"
                self.bytes_by_phase[key][self.path_labels[i]] += a.range_len
                self._record("complete", i, a, self.sched.paths[i].chunk_size, sample.throughput)
                parked = 1 if self.sched.reassembly.parked is not None else 0
                self.max_parked = max(self.max_parked, parked)
                if self.check_invariants and parked > 1:
                    raise AssertionError("more than one parked chunk")
                mark = len(self.buffer.transitions)
                self.buffer.ingest(sum(r.range_len for r in released))
                self._observe_phase(mark)
            if self.buffer.phase is Phase.FINISHED:
                break
            if cfg.stop_after_prebuffer and self.buffer.started_at is not None:
                break
            self._try_assign()
            self._schedule_wake()

        b = self.buffer
        summary = SimSummary(
            prebuffer_download_ms=b.started_at,
            rebuffer_cycle_times=list(self.cycles),
            per_path_traffic_fraction={k: _fractions(v) for k, v in self.bytes_by_phase.items()},
            stall_ms=b.drained_ms,
            startup_ms=b.started_at if b.started_at is not None else b.stall_time,
            end_ms=self.now,
            truncated=truncated,
            bytes_by_path={k: list(v) for k, v in self.bytes_by_phase.items()},
        )
        return SimResult(self.log, summary, list(self.sched.released), self.max_parked)


def run(config: SimConfig, check_invariants: bool = True) -> SimResult:
    return Simulation(config, check_invariants).run()


def random_trace(rng: random.Random, mean_rate: float, horizon_ms: float,
                 segment_ms: Tuple[float, float] = (200.0, 2000.0),
                 spread: Tuple[float, float] = (0.3, 1.7)) -> Tuple[Tuple[float, float], ...]:
    """Piecewise-constant trace with segment rates ``mean_rate * U(spread)``."""
    out = []
    t = 0.0
    while t < horizon_ms:
        out.append((t, mean_rate * rng.uniform(*spread)))
        t += rng.uniform(*segment_ms)
    return tuple(out)


def spiky_trace(rng: random.Random, base_rate: float, horizon_ms: float, factor: float = 10.0,
                spikes_per_s: float = 0.5, spike_ms: Tuple[float, float] = (50.0, 300.0)
                ) -> Tuple[Tuple[float, float], ...]:
    """Constant ``base_rate`` with short bursts at ``factor`` times the rate."""
    out = [(0.0, base_rate)]
    t = 0.0
    while True:
        t += rng.expovariate(spikes_per_s / 1000.0)
        if t >= horizon_ms:
            break
        width = rng.uniform(*spike_ms)
        if t <= out[-1][0]:
            continue
        out.append((t, base_rate * factor))
        out.append((t + width, base_rate))
        t += width
    return tuple(out)


def log_lines(records: Iterable[EventRecord]) -> List[str]:
    return [json.dumps(asdict(r), separators=(",", ":")) for r in records]

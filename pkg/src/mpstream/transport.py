"""HTTP/1.1 range-request transport with per-network server failover.

One worker thread per path fetches ranges sequentially over a persistent
connection bound to that path's local address. Workers only report results;
the session loop owns the scheduler, the playout buffer and all failover
decisions.
"""
from __future__ import annotations

import http.client
import logging
import queue
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Dict, List, Optional, Sequence, Tuple

from .estimators import ThroughputSample
from .playout import BufferConfig, Phase, PlayoutBuffer
from .scheduler import DEFER, ChunkAssignment, ChunkScheduler, SchedulerConfig

log = logging.getLogger(__name__)

FAILOVER_COOLDOWN_S = 30.0
_CONTENT_RANGE_RE = re.compile(r"^bytes (\d+)-(\d+)/(\d+|\*)$")


class TransportError(Exception):
    pass


class ConnectFailed(TransportError):
    pass


class FetchTimeout(TransportError):
    pass


class BadStatus(TransportError):
    pass


class ShortBody(TransportError):
    pass


class PathExhausted(Exception):
    """Every server of a network failed within the cooldown window."""


@dataclass(frozen=True)
class SourceEndpoint:
    network_id: int
    host: str
    port: int
    object_path: str = "/media.bin"

    @property
    def id(self) -> str:
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class PathBinding:
    path_id: int
    local_address: Optional[str] = None


def check_bindings(bindings: Sequence[PathBinding]) -> None:
    addrs = [b.local_address for b in bindings if b.local_address]
    if len(addrs) != len(set(addrs)):
        raise ValueError(f"paths must bind distinct local addresses, got {addrs}")


@dataclass
class FetchResult:
    assignment: ChunkAssignment
    body: bytes
    sent_ms: float
    first_byte_ms: float
    last_byte_ms: float
    server_used: SourceEndpoint

    @property
    def sample(self) -> ThroughputSample:
        return ThroughputSample(self.assignment.path_id, len(self.body), self.last_byte_ms - self.sent_ms)


def _now_ms() -> float:
    return time.monotonic() * 1000.0


class RangeClient:
    """Range fetches for one path; keeps one persistent connection per server."""

    def __init__(self, binding: PathBinding, timeout: float = 10.0):
        self.binding = binding
        self.timeout = timeout
        self._conns: Dict[SourceEndpoint, http.client.HTTPConnection] = {}
        self.connections_opened = 0

    def _conn(self, ep: SourceEndpoint) -> http.client.HTTPConnection:
        c = self._conns.get(ep)
        if c is None:
            src = (self.binding.local_address, 0) if self.binding.local_address else None
            c = http.client.HTTPConnection(ep.host, ep.port, timeout=self.timeout, source_address=src)
            try:
                c.connect()
            except socket.timeout as e:
                raise FetchTimeout(f"connect to {ep.id} timed out") from e
            except OSError as e:
                raise ConnectFailed(f"connect to {ep.id}: {e}") from e
            self.connections_opened += 1
            self._conns[ep] = c
        return c

    def drop(self, ep: SourceEndpoint) -> None:
        c = self._conns.pop(ep, None)
        if c is not None:
            c.close()

    def close(self) -> None:
        for ep in list(self._conns):
            self.drop(ep)

    def _request(self, ep: SourceEndpoint, method: str, headers: Dict[str, str]):
        c = self._conn(ep)
        try:
            c.request(method, ep.object_path, headers={"Connection": "keep-alive", **headers})
            sent = _now_ms()
            resp = c.getresponse()
            first = _now_ms()
            body = resp.read()
            last = _now_ms()
        except socket.timeout as e:
            self.drop(ep)
            raise FetchTimeout(f"{method} {ep.id} timed out") from e
        except (OSError, http.client.HTTPException) as e:
            self.drop(ep)
            raise ConnectFailed(f"{method} {ep.id}: {e!r}") from e
        if resp.will_close:
            self.drop(ep)
        return resp, body, sent, first, last

    def head_size(self, ep: SourceEndpoint) -> int:
        resp, _, _, _, _ = self._request(ep, "HEAD", {})
        if resp.status != 200:
            raise BadStatus(f"HEAD {ep.id} returned {resp.status}")
        length = resp.getheader("Content-Length")
        if length is None:
            raise BadStatus(f"HEAD {ep.id} has no Content-Length")
        return int(length)

    def fetch_range(self, ep: SourceEndpoint, assignment: ChunkAssignment) -> FetchResult:
        start, end = assignment.range_start, assignment.range_end - 1
        resp, body, sent, first, last = self._request(ep, "GET", {"Range": f"bytes={start}-{end}"})
        if resp.status != 206:
            raise BadStatus(f"GET {ep.id} range {start}-{end} returned {resp.status}")
        m = _CONTENT_RANGE_RE.match(resp.getheader("Content-Range") or "")
        if not m or (int(m.group(1)), int(m.group(2))) != (start, end):
            raise BadStatus(f"mismatched Content-Range {resp.getheader('Content-Range')!r}")
        if len(body) != assignment.range_len:
            raise ShortBody(f"got {len(body)} of {assignment.range_len} bytes from {ep.id}")
        return FetchResult(assignment, body, sent, first, last, ep)


def fetch_range(binding: PathBinding, endpoint: SourceEndpoint, assignment: ChunkAssignment,
                client: Optional[RangeClient] = None) -> FetchResult:
    """One-off fetch; pass a :class:`RangeClient` to reuse its connections."""
    own = client is None
    client = client or RangeClient(binding)
    try:
        return client.fetch_range(endpoint, assignment)
    finally:
        if own:
            client.close()


class ServerRotation:
    """Round-robin server choice within one network, with a failure cooldown."""

    def __init__(self, servers: Sequence[SourceEndpoint], cooldown_s: float = FAILOVER_COOLDOWN_S,
                 clock: Callable[[], float] = time.monotonic):
        if not servers:
            raise ValueError("a network needs at least one server")
        self.servers = list(servers)
        self.cooldown_s = cooldown_s
        self.clock = clock
        self._failed_at: Dict[SourceEndpoint, float] = {}
        self.current = self.servers[0]

    def _cooling(self, ep: SourceEndpoint, now: float) -> bool:
        t = self._failed_at.get(ep)
        return t is not None and now - t < self.cooldown_s

    def failover(self, failed: SourceEndpoint) -> SourceEndpoint:
        if failed not in self.servers:
            raise ValueError(f"{failed.id} is not in this network's server list")
        now = self.clock()
        self._failed_at[failed] = now
        k = self.servers.index(failed)
        n = len(self.servers)
        for step in range(1, n + 1):
            cand = self.servers[(k + step) % n]
            if not self._cooling(cand, now):
                self.current = cand
                return cand
        raise PathExhausted(f"all {n} server(s) of network {failed.network_id} failed")


def failover(network_id: int, failed_server: SourceEndpoint, server_list: Sequence[SourceEndpoint],
             rotation: Optional[ServerRotation] = None) -> SourceEndpoint:
    """Next server after ``failed_server`` in its network; raises PathExhausted."""
    rotation = rotation or ServerRotation(server_list)
    if failed_server.network_id != network_id:
        raise ValueError("failed server belongs to another network")
    return rotation.failover(failed_server)


def resume_after_failover(scheduler: ChunkScheduler, in_flight: Optional[ChunkAssignment],
                          replacement: Optional[SourceEndpoint]) -> Optional[ChunkAssignment]:
    """Reissue a failed range: to ``replacement`` on the same path, or, when the
    path is exhausted (``replacement`` is None), to the surviving path."""
    if in_flight is None:
        return None
    if replacement is None:
        scheduler.kill_path(in_flight.path_id)
        return None
    return scheduler.resume_after_failover(in_flight, replacement.id)


# -- live session -----------------------------------------------------------


@dataclass
class LiveSummary:
    prebuffer_download_ms: Optional[float]
    rebuffer_cycle_times: List[float]
    per_path_traffic_fraction: Dict[str, List[float]]
    stall_ms: float
    total_ms: float
    bytes_by_path: Dict[str, List[int]]
    failovers: List[Tuple[int, str, str]]
    dead_paths: List[int]
    connections_opened: List[int]


@dataclass
class LiveResult:
    summary: LiveSummary
    events: List[dict] = field(default_factory=list)
    data: Optional[bytes] = None


class SessionFailed(RuntimeError):
    pass


class _Worker(threading.Thread):
    def __init__(self, path_id: int, client: RangeClient, rotation: ServerRotation, events: "queue.Queue"):
        super().__init__(daemon=True, name=f"path-{path_id}")
        self.path_id = path_id
        self.client = client
        self.rotation = rotation
        self.events = events
        self.inbox: "queue.Queue" = queue.Queue()

    def run(self):
        while True:
            job = self.inbox.get()
            if job is None:
                self.client.close()
                return
            kind, payload = job
            ep = self.rotation.current
            try:
                if kind == "head":
                    size = self.client.head_size(ep)
                    self.events.put(("ready", self.path_id, size, ep))
                else:
                    res = self.client.fetch_range(ep, payload)
                    self.events.put(("done", self.path_id, res, ep))
            except TransportError as e:
                self.events.put(("error", self.path_id, (kind, payload, e), ep))


class LiveSession:
    """Streams one object over two networks into ``sink`` (or memory).

    The playout buffer runs on the wall clock. The session ends once every
    byte has been released in order, or at playback start with
    ``stop_after_prebuffer``.
    """

    def __init__(self, networks: Sequence[Sequence[SourceEndpoint]], bindings: Sequence[PathBinding],
                 scheduler: SchedulerConfig, buffer: BufferConfig, sink: Optional[BinaryIO] = None,
                 timeout: float = 10.0, cooldown_s: float = FAILOVER_COOLDOWN_S,
                 deadline_s: float = 600.0, stop_after_prebuffer: bool = False):
        if len(networks) != len(bindings) or len(networks) not in (1, 2):
            raise ValueError("one binding per network, one or two networks")
        check_bindings(bindings)
        self.networks = [list(n) for n in networks]
        self.bindings = list(bindings)
        self.sched_config = scheduler
        self.buffer_config = buffer
        self.sink = sink
        self.timeout = timeout
        self.cooldown_s = cooldown_s
        self.deadline_s = deadline_s
        self.stop_after_prebuffer = stop_after_prebuffer

    def run(self) -> LiveResult:
        events: "queue.Queue" = queue.Queue()
        n = len(self.networks)
        rotations = [ServerRotation(net, self.cooldown_s) for net in self.networks]
        clients = [RangeClient(b, self.timeout) for b in self.bindings]
        workers = [_Worker(i, clients[i], rotations[i], events) for i in range(n)]
        for w in workers:
            w.start()
            w.inbox.put(("head", None))

        t0 = _now_ms()
        log_events: List[dict] = []
        sched: Optional[ChunkScheduler] = None
        buf: Optional[PlayoutBuffer] = None
        parts: Dict[int, bytes] = {}
        out = bytearray() if self.sink is None else None
        issued_phase: Dict[int, Phase] = {}
        by_phase = {"prebuffer": [0, 0], "rebuffer": [0, 0]}
        failovers: List[Tuple[int, str, str]] = []
        dead: List[int] = []
        cycles: List[float] = []
        rebuf_start: Optional[float] = None
        seen_transitions = 0

        def now() -> float:
            return _now_ms() - t0

        def note(kind: str, path=None, a: Optional[ChunkAssignment] = None, **extra):
            rec = {"t": now(), "kind": kind, "path": path}
            if a is not None:
                rec.update(range_start=a.range_start, range_len=a.range_len, source=a.source_id)
            if buf is not None:
                rec.update(buffered=buf.buffered, phase=buf.phase.value)
            rec.update(extra)
            log_events.append(rec)

        def dispatch():
            for i, p in enumerate(sched.paths):
                if p.busy or not p.ready:
                    continue
                a = sched.next_assignment(i, buf.phase)
                if a is DEFER:
                    continue
                issued_phase[i] = buf.phase
                note("assign", i, a, chunk_size=p.chunk_size)
                workers[i].inbox.put(("get", a))

        def path_failed(i: int, ep: SourceEndpoint, pending: Optional[ChunkAssignment]):
            try:
                nxt = rotations[i].failover(ep)
            except PathExhausted:
                nxt = None
            failovers.append((i, ep.id, nxt.id if nxt else "exhausted"))
            note("failover", i, pending, failed=ep.id, replacement=nxt.id if nxt else None)
            return nxt

        def watch_phases():
            nonlocal rebuf_start, seen_transitions
            for t, src, dst in buf.transitions[seen_transitions:]:
                note("phase", phase_to=dst.value)
                if dst is Phase.RE_BUFFERING or (dst is Phase.DRAINED and rebuf_start is None):
                    rebuf_start = t
                elif dst is Phase.STEADY and src is not Phase.PRE_BUFFERING and rebuf_start is not None:
                    cycles.append(t - rebuf_start)
                    rebuf_start = None
            seen_transitions = len(buf.transitions)

        try:
            while True:
                if now() > self.deadline_s * 1000:
                    raise SessionFailed("deadline exceeded")
                wait = 0.5
                if buf is not None:
                    dt = buf.ms_until_next_threshold()
                    if dt is not None:
                        wait = min(wait, dt / 1000.0 + 0.001)
                try:
                    ev = events.get(timeout=max(wait, 0.0005))
                except queue.Empty:
                    ev = None
                if buf is not None:
                    buf.advance_to(now())
                    watch_phases()
                if ev is not None:
                    kind, i, payload, ep = ev
                    if kind == "ready":
                        if sched is None:
                            sched = ChunkScheduler(self.sched_config, payload, n_paths=n)
                            buf = PlayoutBuffer(self.buffer_config, media_bytes=payload, clock=now())
                            for j in dead:
                                sched.kill_path(j)
                        elif payload != sched.file_size:
                            raise SessionFailed(f"network {i} reports size {payload}, expected {sched.file_size}")
                        sched.path_ready(i, now(), ep.id)
                        note("ready", i, size=payload, source=ep.id)
                    elif kind == "done":
                        res: FetchResult = payload
                        a = res.assignment
                        released = sched.on_chunk_complete(a, res.sample)
                        parts[a.range_start] = res.body
                        key = "prebuffer" if issued_phase.pop(i) is Phase.PRE_BUFFERING else "rebuffer"
                        by_phase[key][i] += a.range_len
                        note("complete", i, a, chunk_size=sched.paths[i].chunk_size,
                             first_byte_ms=res.first_byte_ms - res.sent_ms)
                        for r in released:
                            data = parts.pop(r.range_start)
                            if out is not None:
                                out += data
                            else:
                                self.sink.write(data)
                        buf.ingest(sum(r.range_len for r in released))
                        watch_phases()
                    elif kind == "error":
                        job, pending, err = payload
                        log.warning("path %d: %s", i, err)
                        nxt = path_failed(i, ep, pending if job == "get" else None)
                        if job == "head":
                            if nxt is None:
                                dead.append(i)
                                if sched is not None:
                                    sched.kill_path(i)
                                if len(dead) == n:
                                    raise SessionFailed("no network could serve the object")
                            else:
                                workers[i].inbox.put(("head", None))
                        elif nxt is None:
                            dead.append(i)
                            issued_phase.pop(i, None)
                            resume_after_failover(sched, pending, None)
                            if all(not p.alive for p in sched.paths):
                                raise SessionFailed("all paths exhausted")
                        else:
                            again = resume_after_failover(sched, pending, nxt)
                            note("assign", i, again, chunk_size=sched.paths[i].chunk_size)
                            workers[i].inbox.put(("get", again))
                if sched is not None:
                    if sched.done or (self.stop_after_prebuffer and buf.started_at is not None):
                        break
                    dispatch()
        finally:
            for w in workers:
                w.inbox.put(None)
            for w in workers:
                w.join(timeout=2)

        total = now()
        note("end")
        fr = {k: [c / sum(v) if sum(v) else 0.0 for c in v] for k, v in by_phase.items()}
        summary = LiveSummary(
            prebuffer_download_ms=buf.started_at if buf else None,
            rebuffer_cycle_times=cycles,
            per_path_traffic_fraction=fr,
            stall_ms=buf.drained_ms if buf else 0.0,
            total_ms=total,
            bytes_by_path=by_phase,
            failovers=failovers,
            dead_paths=dead,
            connections_opened=[c.connections_opened for c in clients],
        )
        return LiveResult(summary, log_events, bytes(out) if out is not None else None)

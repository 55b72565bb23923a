"""Chunk size selection and byte-range assignment over two paths.

The scheduler is a single serialized decision point. Transport workers (real
or simulated) ask it for work with :meth:`ChunkScheduler.next_assignment` and
report back with :meth:`ChunkScheduler.on_chunk_complete`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import KB, MB
from .estimators import (
    DEFAULT_ALPHA,
    EstimatorState,
    EwmaState,
    HarmonicState,
    LastSampleState,
    ThroughputSample,
    update,
)
from .playout import Phase, fetch_allowed

MIN_CHUNK = 16 * KB
BASE_CHUNK = 256 * KB
MAX_CHUNK = 8 * MB
RATIO_ROUNDING = KB
# estimate ratios this close to an integer are treated as that integer
_CEIL_TOLERANCE = 1e-9


class Policy(str, enum.Enum):
    RATIO = "ratio"
    EWMA = "ewma"
    HARMONIC = "harmonic"

    @classmethod
    def parse(cls, value: "str | Policy") -> "Policy":
        if isinstance(value, Policy):
            return value
        return cls(value.lower())


@dataclass(frozen=True)
class SchedulerConfig:
    policy: Policy = Policy.HARMONIC
    base_chunk: int = BASE_CHUNK
    min_chunk: int = MIN_CHUNK
    max_chunk: int = MAX_CHUNK
    delta: float = 0.05
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy.parse(self.policy))
        if not self.min_chunk <= self.base_chunk <= self.max_chunk:
            raise ValueError(
                f"need min_chunk <= base_chunk <= max_chunk, got "
                f"{self.min_chunk}/{self.base_chunk}/{self.max_chunk}"
            )
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")

    def new_estimator(self) -> EstimatorState:
        if self.policy is Policy.HARMONIC:
            return HarmonicState()
        if self.policy is Policy.EWMA:
            return EwmaState(alpha=self.alpha)
        return LastSampleState()


def dcsa(
    path: int,
    est_self: Optional[float],
    est_other: Optional[float],
    sample: float,
    config: SchedulerConfig,
    cur_self: int,
    cur_other: int,
) -> int:
    """Dynamic chunk size adjustment for path ``path``.

    The slow path doubles or halves its chunk when the latest sample leaves the
    ``+-delta`` band around its estimate; the fast path takes the slow path's
    chunk scaled by the ceiling of the estimate ratio. Equal estimates make
    path 0 the slow one. With no estimate for the other path there is nothing
    to compare against and the chunk size is left alone.
    """
    if est_self is None:
        return config.base_chunk
    if est_other is None:
        return cur_self
    slow = est_self < est_other or (est_self == est_other and path == 0)
    if slow:
        if sample > (1.0 + config.delta) * est_self:
            size = 2 * cur_self
        elif sample < (1.0 - config.delta) * est_self:
            size = max(-(-cur_self // 2), config.min_chunk)
        else:
            size = cur_self
    else:
        gamma = max(1, math.ceil(est_self / est_other * (1.0 - _CEIL_TOLERANCE)))
        size = gamma * cur_other
    return min(size, config.max_chunk)


def ratio_sizes(w_slow: float, w_fast: float, config: SchedulerConfig) -> Tuple[int, int]:
    """Baseline split: the slower path gets the base chunk, the faster one a
    chunk scaled by the throughput ratio (rounded to 1 KB)."""
    if not 0 < w_slow <= w_fast:
        raise ValueError(f"need 0 < w_slow <= w_fast, got {w_slow}, {w_fast}")
    b = config.base_chunk
    fast = round(w_fast / w_slow * b / RATIO_ROUNDING) * RATIO_ROUNDING
    fast = max(min(fast, config.max_chunk), b)
    return b, fast


@dataclass(frozen=True)
class ChunkAssignment:
    path_id: int
    source_id: str
    range_start: int
    range_len: int
    sequence: int

    @property
    def range_end(self) -> int:
        return self.range_start + self.range_len


class _Defer:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DEFER"

    def __bool__(self):
        return False


DEFER = _Defer()


@dataclass
class PathState:
    path_id: int
    chunk_size: int
    estimator: EstimatorState
    source_id: str = ""
    bytes_delivered: int = 0
    busy: bool = False
    alive: bool = True
    available_since: Optional[float] = None  # ms; None until setup finishes

    @property
    def ready(self) -> bool:
        return self.alive and self.available_since is not None


@dataclass
class ReassemblyState:
    next_in_order: int = 0
    parked: Optional[ChunkAssignment] = None


class SchedulerError(RuntimeError):
    pass


class DuplicateCompletion(SchedulerError):
    """A completion arrived for a range that is not in flight on that path."""


@dataclass
class ChunkScheduler:
    """Stateful two-path range scheduler over one object of ``file_size`` bytes.

    Invariants maintained here: assigned ranges are disjoint and gap-free up to
    the high-water offset, and at most one completed chunk is ever parked
    waiting for an earlier range.
    """

    config: SchedulerConfig
    file_size: int
    n_paths: int = 2
    paths: List[PathState] = field(init=False)
    reassembly: ReassemblyState = field(init=False, default_factory=ReassemblyState)
    high_water: int = field(init=False, default=0)
    in_flight: Dict[int, ChunkAssignment] = field(init=False, default_factory=dict)
    released: List[ChunkAssignment] = field(init=False, default_factory=list)
    _pending: List[ChunkAssignment] = field(init=False, default_factory=list)
    _seq: int = field(init=False, default=0)

    def __post_init__(self):
        if self.n_paths not in (1, 2):
            raise ValueError("one or two paths are supported")
        if self.file_size < 0:
            raise ValueError("file_size must be non-negative")
        self.paths = [
            PathState(i, self.config.base_chunk, self.config.new_estimator(), source_id=f"net{i}")
            for i in range(self.n_paths)
        ]

    # -- queries -----------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.reassembly.next_in_order >= self.file_size

    @property
    def fully_assigned(self) -> bool:
        return self.high_water >= self.file_size and not self._pending

    def other(self, path_id: int) -> Optional[PathState]:
        if self.n_paths == 1:
            return None
        o = self.paths[1 - path_id]
        return o if o.alive else None

    # -- path lifecycle ----------------------------------------------------

    def path_ready(self, path_id: int, now: float, source_id: Optional[str] = None) -> None:
        p = self.paths[path_id]
        p.available_since = now
        if source_id is not None:
            p.source_id = source_id

    def kill_path(self, path_id: int) -> Optional[ChunkAssignment]:
        """Take a path out of service. Its in-flight range (if any) goes back to
        the pending queue for the surviving path; it is returned."""
        p = self.paths[path_id]
        p.alive = False
        p.busy = False
        lost = self.in_flight.pop(path_id, None)
        if lost is not None:
            self._pending.append(lost)
        return lost

    def resume_after_failover(
        self, assignment: Optional[ChunkAssignment], source_id: Optional[str] = None
    ) -> Optional[ChunkAssignment]:
        """Reissue the identical byte range of a failed fetch.

        When the path survives (a replacement server was found) the range is
        reissued on it right away with the new source; when the path is dead
        the range is queued for the other path and ``None`` is returned.
        """
        if assignment is None:
            return None
        p = self.paths[assignment.path_id]
        current = self.in_flight.get(assignment.path_id)
        if current is not None and current.range_start == assignment.range_start:
            del self.in_flight[assignment.path_id]
            p.busy = False
        if source_id is not None:
            p.source_id = source_id
        if not p.alive:
            if assignment not in self._pending:
                self._pending.append(assignment)
            return None
        again = ChunkAssignment(
            p.path_id, p.source_id, assignment.range_start, assignment.range_len, assignment.sequence
        )
        self._issue(p, again)
        return again

    # -- assignment --------------------------------------------------------

    def next_assignment(self, path_id: int, phase: Phase):
        """Next byte range for an idle path, or :data:`DEFER`.

        Defers while the playout buffer pauses fetching, while a completed chunk
        is parked (a fresh range could only add a second parked chunk), and
        once everything is assigned.
        """
        p = self.paths[path_id]
        if p.busy:
            raise SchedulerError(f"path {path_id} already has a range in flight")
        if not p.ready or not fetch_allowed(phase):
            return DEFER
        nxt = self.reassembly.next_in_order
        if self._pending:
            self._pending.sort(key=lambda a: a.range_start)
            head = self._pending[0]
            if self.reassembly.parked is not None and head.range_start != nxt:
                return DEFER
            self._pending.pop(0)
            a = ChunkAssignment(path_id, p.source_id, head.range_start, head.range_len, head.sequence)
            self._issue(p, a)
            return a
        if self.high_water >= self.file_size:
            return DEFER
        if self.reassembly.parked is not None and self.high_water != nxt:
            return DEFER
        length = min(p.chunk_size, self.file_size - self.high_water)
        a = ChunkAssignment(path_id, p.source_id, self.high_water, length, self._seq)
        self._seq += 1
        self.high_water += length
        self._issue(p, a)
        return a

    def _issue(self, p: PathState, a: ChunkAssignment) -> None:
        p.busy = True
        self.in_flight[p.path_id] = a

    # -- completion --------------------------------------------------------

    def on_chunk_complete(
        self, assignment: ChunkAssignment, sample: ThroughputSample
    ) -> List[ChunkAssignment]:
        """Record a finished range; returns the chunks released in order.

        The path's estimator absorbs the sample and its next chunk size is
        recomputed under the active policy before the estimator moves.
        """
        pid = assignment.path_id
        current = self.in_flight.get(pid)
        if current is None or current.range_start != assignment.range_start \
                or current.range_len != assignment.range_len:
            raise DuplicateCompletion(
                f"range [{assignment.range_start}, {assignment.range_end}) is not in flight on path {pid}"
            )
        del self.in_flight[pid]
        p = self.paths[pid]
        p.busy = False
        p.bytes_delivered += assignment.range_len
        self._resize(p, sample)

        r = self.reassembly
        if assignment.range_start != r.next_in_order:
            if r.parked is not None:
                raise SchedulerError("a second out-of-order chunk would be parked")
            r.parked = assignment
            return []
        out = [assignment]
        r.next_in_order = assignment.range_end
        if r.parked is not None and r.parked.range_start == r.next_in_order:
            out.append(r.parked)
            r.next_in_order = r.parked.range_end
            r.parked = None
        self.released.extend(out)
        return out

    def _resize(self, p: PathState, sample: ThroughputSample) -> None:
        cfg = self.config
        o = self.other(p.path_id)
        if cfg.policy is Policy.RATIO:
            p.estimator = update(p.estimator, sample)
            w_self = p.estimator.estimate
            w_other = o.estimator.estimate if o is not None else None
            if w_other is None:
                p.chunk_size = cfg.base_chunk
            elif w_self < w_other or (w_self == w_other and p.path_id == 0):
                p.chunk_size = ratio_sizes(w_self, w_other, cfg)[0]
            else:
                p.chunk_size = ratio_sizes(w_other, w_self, cfg)[1]
            return
        size = dcsa(
            p.path_id,
            p.estimator.estimate,
            o.estimator.estimate if o is not None else None,
            sample.throughput,
            cfg,
            p.chunk_size,
            o.chunk_size if o is not None else p.chunk_size,
        )
        p.chunk_size = max(size, cfg.min_chunk)
        p.estimator = update(p.estimator, sample)

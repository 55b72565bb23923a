"""Just-in-time playout buffer: pre-buffering, then ON/OFF re-buffering cycles.

Media is constant bitrate, so buffered media time is ``bytes / bitrate``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple


class Phase(str, enum.Enum):
    PRE_BUFFERING = "prebuffering"
    STEADY = "steady"
    RE_BUFFERING = "rebuffering"
    DRAINED = "drained"
    FINISHED = "finished"


# Every transition the buffer may take. Drained -> Steady is the recovery from a
# mid-stream stall (same threshold as a refill); PreBuffering/Drained -> Steady
# is also taken when the last media byte arrives below the threshold.
TRANSITIONS = frozenset(
    {
        (Phase.PRE_BUFFERING, Phase.STEADY),
        (Phase.STEADY, Phase.RE_BUFFERING),
        (Phase.RE_BUFFERING, Phase.STEADY),
        (Phase.STEADY, Phase.DRAINED),
        (Phase.RE_BUFFERING, Phase.DRAINED),
        (Phase.DRAINED, Phase.STEADY),
    }
    | {(p, Phase.FINISHED) for p in Phase if p is not Phase.FINISHED}
)

FETCHING_PHASES = frozenset({Phase.PRE_BUFFERING, Phase.RE_BUFFERING, Phase.DRAINED})


def fetch_allowed(phase: Phase) -> bool:
    return phase in FETCHING_PHASES


class FetchGate(str, enum.Enum):
    ALLOWED = "allowed"
    PAUSED = "paused"


@dataclass(frozen=True)
class BufferConfig:
    bitrate: float  # bytes per second of media
    prebuffer_target: float = 40.0
    low_watermark: float = 10.0
    refill_target: float = 20.0

    def __post_init__(self):
        if self.bitrate <= 0:
            raise ValueError("bitrate must be positive")
        if not self.low_watermark < self.refill_target <= self.prebuffer_target:
            raise ValueError(
                "need low_watermark < refill_target <= prebuffer_target, got "
                f"{self.low_watermark}/{self.refill_target}/{self.prebuffer_target}"
            )


@dataclass
class PlayoutBuffer:
    """Single-owner playout state. ``clock`` and all ``*_ms`` values are wall
    clock milliseconds, ``buffered`` is media seconds.

    ``stall_time`` covers both start-up (PreBuffering) and mid-stream stalls
    (Drained); ``drained_ms`` isolates the latter.
    """

    config: BufferConfig
    media_bytes: Optional[int] = None
    phase: Phase = Phase.PRE_BUFFERING
    buffered: float = 0.0
    clock: float = 0.0
    stall_time: float = 0.0
    drained_ms: float = 0.0
    ingested: float = 0.0
    consumed: float = 0.0
    bytes_in: int = 0
    transitions: List[Tuple[float, Phase, Phase]] = field(default_factory=list)

    @property
    def all_released(self) -> bool:
        return self.media_bytes is not None and self.bytes_in >= self.media_bytes

    @property
    def started_at(self) -> Optional[float]:
        for t, src, _ in self.transitions:
            if src is Phase.PRE_BUFFERING:
                return t
        return None

    def _move(self, to: Phase) -> None:
        if (self.phase, to) not in TRANSITIONS:
            raise AssertionError(f"illegal playout transition {self.phase.value} -> {to.value}")
        self.transitions.append((self.clock, self.phase, to))
        self.phase = to

    def ingest(self, released_bytes: int) -> "PlayoutBuffer":
        if released_bytes < 0:
            raise ValueError("released_bytes must be >= 0")
        if released_bytes == 0:
            return self
        secs = released_bytes / self.config.bitrate
        self.buffered += secs
        self.ingested += secs
        self.bytes_in += released_bytes
        cfg = self.config
        if self.phase is Phase.PRE_BUFFERING:
            if self.buffered > cfg.prebuffer_target or self.all_released:
                self._move(Phase.STEADY)
        elif self.phase in (Phase.RE_BUFFERING, Phase.DRAINED):
            if self.buffered >= cfg.refill_target or self.all_released:
                self._move(Phase.STEADY)
        return self

    def consume(self, elapsed_ms: float) -> "PlayoutBuffer":
        if elapsed_ms < 0:
            raise ValueError("elapsed_ms must be >= 0")
        if self.phase in (Phase.PRE_BUFFERING, Phase.DRAINED):
            self.stall_time += elapsed_ms
            if self.phase is Phase.DRAINED:
                self.drained_ms += elapsed_ms
            self.clock += elapsed_ms
            return self
        if self.phase is Phase.FINISHED:
            self.clock += elapsed_ms
            return self

        want = elapsed_ms / 1000.0
        if want < self.buffered:
            self.buffered -= want
            self.consumed += want
            self.clock += elapsed_ms
            if (
                self.phase is Phase.STEADY
                and self.buffered < self.config.low_watermark
                and not self.all_released
            ):
                self._move(Phase.RE_BUFFERING)
            return self

        # runs dry inside this interval
        played_ms = self.buffered * 1000.0
        self.consumed += self.buffered
        self.buffered = 0.0
        self.clock += played_ms
        if self.all_released:
            self._move(Phase.FINISHED)
            self.clock += elapsed_ms - played_ms
            return self
        self._move(Phase.DRAINED)
        rest = elapsed_ms - played_ms
        self.stall_time += rest
        self.drained_ms += rest
        self.clock += rest
        return self

    def advance_to(self, now_ms: float) -> "PlayoutBuffer":
        if now_ms > self.clock:
            self.consume(now_ms - self.clock)
        return self

    def fetch_gate(self) -> FetchGate:
        return FetchGate.ALLOWED if fetch_allowed(self.phase) else FetchGate.PAUSED

    def ms_until_next_threshold(self) -> Optional[float]:
        """Wall time until consumption alone changes the phase, if it will."""
        if self.phase is Phase.STEADY:
            if self.all_released:
                return self.buffered * 1000.0
            return max(self.buffered - self.config.low_watermark, 0.0) * 1000.0
        if self.phase is Phase.RE_BUFFERING:
            return self.buffered * 1000.0
        return None


def ingest(buffer: PlayoutBuffer, released_bytes: int) -> PlayoutBuffer:
    return buffer.ingest(released_bytes)


def consume(buffer: PlayoutBuffer, elapsed_ms: float) -> PlayoutBuffer:
    return buffer.consume(elapsed_ms)


def fetch_gate(buffer: PlayoutBuffer) -> FetchGate:
    return buffer.fetch_gate()

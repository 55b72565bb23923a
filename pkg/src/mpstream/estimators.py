"""Per-path throughput estimators.

Throughput is kept in bytes per millisecond. Every estimator is seeded by its
first sample; there is no prior.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

DEFAULT_ALPHA = 0.9


class InvalidSample(ValueError):
    """A throughput sample that cannot come from a real transfer."""


@dataclass(frozen=True)
class ThroughputSample:
    path_id: int
    bytes: int
    duration: float  # ms, request issued -> last payload byte

    @property
    def throughput(self) -> float:
        if self.duration <= 0:
            return float("nan") if self.bytes <= 0 else float("inf")
        return self.bytes / self.duration


@dataclass(frozen=True, slots=True)
class EwmaState:
    estimate: Optional[float] = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True, slots=True)
class HarmonicState:
    estimate: Optional[float] = None
    count: int = 0


@dataclass(frozen=True, slots=True)
class LastSampleState:
    estimate: Optional[float] = None


EstimatorState = Union[EwmaState, HarmonicState, LastSampleState]


def _checked(sample: ThroughputSample) -> float:
    w = sample.throughput
    # also rejects nan and inf
    if not 0.0 < w < float("inf"):
        raise InvalidSample(
            f"throughput must be positive and finite (path {sample.path_id}: "
            f"{sample.bytes} B in {sample.duration} ms)"
        )
    return w


def ewma_update(state: EwmaState, sample: ThroughputSample) -> EwmaState:
    w = _checked(sample)
    if state.estimate is None:
        return EwmaState(w, state.alpha)
    a = state.alpha
    return EwmaState(a * state.estimate + (1.0 - a) * w, a)


def harmonic_update(state: HarmonicState, sample: ThroughputSample) -> HarmonicState:
    """Fold one sample into a running harmonic mean using only (estimate, count)."""
    w = _checked(sample)
    n = state.count
    if n == 0 or state.estimate is None:
        return HarmonicState(w, 1)
    return HarmonicState((n + 1) / (n / state.estimate + 1.0 / w), n + 1)


def last_sample_update(state: LastSampleState, sample: ThroughputSample) -> LastSampleState:
    return LastSampleState(_checked(sample))


def update(state: EstimatorState, sample: ThroughputSample) -> EstimatorState:
    if isinstance(state, HarmonicState):
        return harmonic_update(state, sample)
    if isinstance(state, EwmaState):
        return ewma_update(state, sample)
    if isinstance(state, LastSampleState):
        return last_sample_update(state, sample)
    raise TypeError(f"unknown estimator state {type(state).__name__}")

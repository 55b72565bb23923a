"""Experiment sweeps: policy x initial chunk size x pre-buffer target x repetition.

Configs are YAML (or JSON) documents validated with pydantic; unknown keys are
rejected. Results are a summary CSV with a fixed column order plus one JSONL
event log per run.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import random
import statistics
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import KB, MB
from .netsim import PathModel, SimConfig, run as run_sim
from .origin import OriginConfig
from .playout import BufferConfig
from .scheduler import Policy, SchedulerConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BYTES_PER_MS_PER_MBPS = 125.0  # 1 Mbit/s = 125 bytes/ms

SUMMARY_COLUMNS = (
    "run_id",
    "policy",
    "chunk_size",
    "prebuffer_s",
    "repetition",
    "prebuffer_download_ms",
    "mean_rebuffer_ms",
    "frac_path0_prebuffer",
    "frac_path0_rebuffer",
    "stall_ms",
    "error",
)


def mbps_to_bytes_per_ms(mbps: float) -> float:
    return mbps * BYTES_PER_MS_PER_MBPS


def bytes_per_ms_to_mbps(rate: float) -> float:
    return rate / BYTES_PER_MS_PER_MBPS


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathModelSpec(_Strict):
    rtt_ms: float = Field(gt=0)
    delta1_ms: float = Field(default=0.0, ge=0)
    delta2_ms: float = Field(default=0.0, ge=0)
    # [start_ms, Mbit/s] segments
    trace_mbps: List[Tuple[float, float]]
    trace_end_ms: Optional[float] = None

    def to_model(self) -> PathModel:
        trace = tuple((s, mbps_to_bytes_per_ms(r)) for s, r in self.trace_mbps)
        return PathModel(self.rtt_ms, self.delta1_ms, self.delta2_ms, trace, self.trace_end_ms)


class SimSection(_Strict):
    paths: List[Optional[PathModelSpec]] = Field(min_length=2, max_length=2)
    jitter: bool = False
    time_limit_ms: float = 3_600_000.0


class EndpointSpec(_Strict):
    host: str
    port: int
    object_path: str = "/media.bin"


class LiveSection(_Strict):
    networks: List[List[EndpointSpec]] = Field(min_length=1, max_length=2)
    bindings: List[Optional[str]] = Field(default_factory=lambda: [None, None])
    timeout_s: float = 10.0
    cooldown_s: float = 30.0

    @model_validator(mode="after")
    def _shape(self):
        if any(not n for n in self.networks):
            raise ValueError("every network needs a non-empty server list")
        if len(self.bindings) != len(self.networks):
            raise ValueError("one binding per network")
        return self


class OriginSpec(_Strict):
    port: int = 0
    object_size: int = Field(default=4 * MB, gt=0)
    seed: int = 0
    added_latency_ms: float = Field(default=0.0, ge=0)
    throttle_bytes_per_s: Optional[float] = Field(default=None, gt=0)
    ranges_enabled: bool = True
    fail_after: Optional[int] = Field(default=None, ge=0)
    host: str = "127.0.0.1"

    def to_config(self) -> OriginConfig:
        return OriginConfig(
            port=self.port,
            object_size=self.object_size,
            seed=self.seed,
            added_latency=self.added_latency_ms,
            throttle=self.throttle_bytes_per_s,
            ranges_enabled=self.ranges_enabled,
            fail_after=self.fail_after,
            host=self.host,
        )


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    mode: Literal["sim", "live"] = "sim"
    repetitions: int = Field(default=20, ge=1)
    policies: List[Policy] = Field(default_factory=lambda: [Policy.HARMONIC, Policy.EWMA, Policy.RATIO])
    chunk_sizes: List[int] = Field(default_factory=lambda: [16 * KB, 64 * KB, 256 * KB, 1 * MB])
    prebuffer_targets: List[float] = Field(default_factory=lambda: [20.0, 40.0, 60.0])
    rng_seed: int = 0
    out: str = "results"
    session: Literal["full", "prebuffer"] = "full"

    object_size: int = Field(default=64 * MB, gt=0)
    bitrate_bytes_per_s: float = Field(default=312_500.0, gt=0)
    low_watermark_s: float = 10.0
    refill_target_s: float = 20.0

    delta: float = Field(default=0.05, gt=0, lt=1)
    alpha: float = Field(default=0.9, ge=0, le=1)
    min_chunk: int = 16 * KB
    max_chunk: int = 8 * MB

    sim: Optional[SimSection] = None
    live: Optional[LiveSection] = None
    origins: List[OriginSpec] = Field(default_factory=list)

    @field_validator("policies", mode="before")
    @classmethod
    def _lower(cls, v):
        return [p.lower() if isinstance(p, str) else p for p in v]

    @model_validator(mode="after")
    def _check(self):
        if not (self.policies and self.chunk_sizes and self.prebuffer_targets):
            raise ValueError("sweep axes must be non-empty")
        if self.mode == "sim" and self.sim is None:
            raise ValueError("mode 'sim' needs a 'sim' section")
        if self.mode == "live" and self.live is None:
            raise ValueError("mode 'live' needs a 'live' section")
        for c in self.chunk_sizes:
            if not self.min_chunk <= c <= self.max_chunk:
                raise ValueError(f"chunk size {c} outside [{self.min_chunk}, {self.max_chunk}]")
        for t in self.prebuffer_targets:
            if not self.low_watermark_s < self.refill_target_s <= t:
                raise ValueError(f"pre-buffer target {t} s below refill target {self.refill_target_s} s")
        return self

    def combinations(self) -> List[Tuple[Policy, int, float]]:
        return list(itertools.product(self.policies, self.chunk_sizes, self.prebuffer_targets))

    def scheduler_config(self, policy: Policy, chunk: int) -> SchedulerConfig:
        return SchedulerConfig(policy, chunk, self.min_chunk, self.max_chunk, self.delta, self.alpha)

    def buffer_config(self, target: float) -> BufferConfig:
        return BufferConfig(self.bitrate_bytes_per_s, target, self.low_watermark_s, self.refill_target_s)

    def sim_config(self, policy: Policy, chunk: int, target: float, repetition: int = 0) -> SimConfig:
        # the seed only feeds jitter, so unjittered repetitions stay identical
        paths = tuple(p.to_model() if p is not None else None for p in self.sim.paths)
        return SimConfig(
            paths=paths,
            object_size=self.object_size,
            scheduler=self.scheduler_config(policy, chunk),
            buffer=self.buffer_config(target),
            rng_seed=self.rng_seed + repetition,
            jitter=self.sim.jitter,
            time_limit_ms=self.sim.time_limit_ms,
            stop_after_prebuffer=self.session == "prebuffer",
        )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.model_validate(doc)


# -- summary rows -----------------------------------------------------------

class SummaryRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    run_id: str
    policy: Policy
    chunk_size: int
    prebuffer_s: float
    repetition: int
    prebuffer_download_ms: Optional[float] = Field(default=None, ge=0)
    mean_rebuffer_ms: Optional[float] = Field(default=None, ge=0)
    frac_path0_prebuffer: Optional[float] = Field(default=None, ge=0, le=1)
    frac_path0_rebuffer: Optional[float] = Field(default=None, ge=0, le=1)
    stall_ms: Optional[float] = Field(default=None, ge=0)
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, Policy):
        return v.value
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_summary(rows: Sequence[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def parse_summary(text: str) -> List[SummaryRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
        raise ValueError(f"unexpected summary columns {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(SummaryRow(**{k: (None if v == "" and k != "error" else v) for k, v in rec.items()}))
    return rows


def write_summary(rows: Sequence[SummaryRow], path: Union[str, Path]) -> None:
    Path(path).write_text(emit_summary(rows), encoding="utf-8")


def read_summary(path: Union[str, Path]) -> List[SummaryRow]:
    return parse_summary(Path(path).read_text(encoding="utf-8"))


# -- running ----------------------------------------------------------------

def run_id(policy: Policy, chunk: int, target: float, rep: int) -> str:
    return f"{policy.value}-{chunk // KB}k-{target:g}s-r{rep:02d}"


def sweep_order(config: ExperimentConfig) -> List[Tuple[int, Policy, int, float]]:
    """All (repetition, policy, chunk, target) runs, shuffled within each repetition."""
    rng = random.Random(config.rng_seed)
    order = []
    for rep in range(config.repetitions):
        combos = config.combinations()
        rng.shuffle(combos)
        order.extend((rep, *c) for c in combos)
    return order


def _sim_row(config: ExperimentConfig, rid: str, policy, chunk, target, rep) -> Tuple[SummaryRow, List[str]]:
    res = run_sim(config.sim_config(policy, chunk, target, rep))
    s = res.summary
    lines = [json.dumps(rec, separators=(",", ":")) for rec in
             ({k: getattr(r, k) for k in r.__dataclass_fields__} for r in res.log)]
    lines.append(json.dumps({"t": s.end_ms, "kind": "end", "truncated": s.truncated}))
    row = SummaryRow(
        run_id=rid,
        policy=policy,
        chunk_size=chunk,
        prebuffer_s=target,
        repetition=rep,
        prebuffer_download_ms=s.prebuffer_download_ms,
        mean_rebuffer_ms=s.mean_rebuffer_ms,
        frac_path0_prebuffer=_frac0(s.bytes_by_path["prebuffer"]),
        frac_path0_rebuffer=_frac0(s.bytes_by_path["rebuffer"]),
        stall_ms=s.stall_ms,
        error="truncated" if s.truncated else "",
    )
    return row, lines


def _frac0(counts: Sequence[int]) -> Optional[float]:
    total = sum(counts)
    return counts[0] / total if total else None


def _live_row(config: ExperimentConfig, rid: str, policy, chunk, target, rep) -> Tuple[SummaryRow, List[str]]:
    from .transport import LiveSession, PathBinding, SessionFailed, SourceEndpoint, TransportError

    live = config.live
    networks = [
        [SourceEndpoint(i, e.host, e.port, e.object_path) for e in net] for i, net in enumerate(live.networks)
    ]
    bindings = [PathBinding(i, a) for i, a in enumerate(live.bindings)]
    session = LiveSession(
        networks, bindings, config.scheduler_config(policy, chunk), config.buffer_config(target),
        sink=io.BytesIO(), timeout=live.timeout_s, cooldown_s=live.cooldown_s,
        stop_after_prebuffer=config.session == "prebuffer",
    )
    base = dict(run_id=rid, policy=policy, chunk_size=chunk, prebuffer_s=target, repetition=rep)
    try:
        res = session.run()
    except (SessionFailed, TransportError, OSError, ValueError) as e:
        log.warning("%s failed: %s", rid, e)
        return SummaryRow(**base, error=f"{type(e).__name__}: {e}".replace("\n", " ")), [
            json.dumps({"t": 0.0, "kind": "end", "error": str(e)})
        ]
    s = res.summary
    lines = [json.dumps(ev, separators=(",", ":")) for ev in res.events]
    row = SummaryRow(
        **base,
        prebuffer_download_ms=s.prebuffer_download_ms,
        mean_rebuffer_ms=(sum(s.rebuffer_cycle_times) / len(s.rebuffer_cycle_times)
                          if s.rebuffer_cycle_times else None),
        frac_path0_prebuffer=_frac0(s.bytes_by_path["prebuffer"]),
        frac_path0_rebuffer=_frac0(s.bytes_by_path["rebuffer"]),
        stall_ms=s.stall_ms,
    )
    return row, lines


def run_experiment(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> List[SummaryRow]:
    """Run the whole sweep. With ``out_dir``, writes ``summary.csv`` and
    ``logs/<run_id>.jsonl`` there."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "logs").mkdir(parents=True, exist_ok=True)
    runner = _sim_row if config.mode == "sim" else _live_row
    rows = []
    for rep, policy, chunk, target in sweep_order(config):
        rid = run_id(policy, chunk, target, rep)
        row, lines = runner(config, rid, policy, chunk, target, rep)
        rows.append(row)
        if out is not None:
            (out / "logs" / f"{rid}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if out is not None:
        write_summary(rows, out / "summary.csv")
    return rows


# -- reporting --------------------------------------------------------------

def _stats(values: Sequence[float]) -> Dict[str, float]:
    if not values:
        return {}
    return {
        "median": statistics.median(values),
        "mean": statistics.fmean(values),
        "std": statistics.stdev(values) if len(values) > 1 else 0.0,
    }


def report(rows: Sequence[SummaryRow]) -> Dict:
    """Per-combination median/mean/std of download times and mean +- std of the
    path-0 traffic fraction per phase."""
    if not rows:
        raise ValueError("empty summary")
    groups: Dict[Tuple[str, int, float], List[SummaryRow]] = {}
    for r in rows:
        groups.setdefault((r.policy.value, r.chunk_size, r.prebuffer_s), []).append(r)
    out, warnings = [], []
    for key in sorted(groups):
        members = [r for r in groups[key] if r.ok]
        if not members:
            msg = f"{key[0]}/{key[1]}/{key[2]:g}s: no successful runs, omitted"
            log.warning(msg)
            warnings.append(msg)
            continue

        def col(name):
            return [getattr(r, name) for r in members if getattr(r, name) is not None]

        n = len(members)
        out.append({
            "policy": key[0],
            "chunk_size": key[1],
            "prebuffer_s": key[2],
            "n": n,
            "single_sample": n == 1,
            "prebuffer_download_ms": _stats(col("prebuffer_download_ms")),
            "mean_rebuffer_ms": _stats(col("mean_rebuffer_ms")),
            "frac_path0_prebuffer": _stats(col("frac_path0_prebuffer")),
            "frac_path0_rebuffer": _stats(col("frac_path0_rebuffer")),
            "stall_ms": _stats(col("stall_ms")),
        })
    return {"combinations": out, "warnings": warnings}


REPORT_COLUMNS = (
    "policy", "chunk_size", "prebuffer_s", "n",
    "download_median_ms", "download_mean_ms", "download_std_ms",
    "rebuffer_mean_ms", "rebuffer_std_ms",
    "frac_path0_prebuffer_mean", "frac_path0_prebuffer_std",
    "frac_path0_rebuffer_mean", "frac_path0_rebuffer_std",
)


def report_csv(doc: Dict) -> str:
    """Plot-ready flat table of :func:`report` output."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for c in doc["combinations"]:
        d, rb = c["prebuffer_download_ms"], c["mean_rebuffer_ms"]
        f0, f1 = c["frac_path0_prebuffer"], c["frac_path0_rebuffer"]
        w.writerow([
            c["policy"], c["chunk_size"], c["prebuffer_s"], c["n"],
            *(_fmt(d.get(k)) for k in ("median", "mean", "std")),
            _fmt(rb.get("mean")), _fmt(rb.get("std")),
            _fmt(f0.get("mean")), _fmt(f0.get("std")),
            _fmt(f1.get("mean")), _fmt(f1.get("std")),
        ])
    return buf.getvalue()


def format_report(doc: Dict) -> str:
    lines = [f"{'policy':<9} {'chunk':>7} {'target':>6} {'n':>3} {'median s':>9} {'mean s':>8} "
             f"{'std s':>7} {'path0 pre':>15} {'path0 re':>15}"]
    for c in doc["combinations"]:
        d = c["prebuffer_download_ms"]
        f0, f1 = c["frac_path0_prebuffer"], c["frac_path0_rebuffer"]

        def pm(s):
            return f"{100 * s['mean']:.1f}±{100 * s['std']:.1f}%" if s else "-"

        lines.append(
            f"{c['policy']:<9} {c['chunk_size'] // KB:>6}K {c['prebuffer_s']:>5g}s {c['n']:>3} "
            f"{d.get('median', math.nan) / 1000:>9.2f} {d.get('mean', math.nan) / 1000:>8.2f} "
            f"{d.get('std', math.nan) / 1000:>7.2f} {pm(f0):>15} {pm(f1):>15}"
        )
    lines.extend(f"warning: {w}" for w in doc["warnings"])
    return "\n".join(lines)

"""Command line: ``run`` a sweep, ``report`` on its results, launch an ``origin``."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import List, Optional

from .experiment import (
    ExperimentConfig,
    OriginSpec,
    format_report,
    load_config,
    read_summary,
    report,
    report_csv,
    run_experiment,
)
from .origin import serve


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None:
        overrides["out"] = args.out
    if overrides:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **overrides})
    out = Path(cfg.out)
    rows = run_experiment(cfg, out)
    failed = sum(1 for r in rows if not r.ok)
    print(f"{len(rows)} runs ({failed} failed) -> {out / 'summary.csv'}")
    if rows and any(r.ok for r in rows):
        doc = report(rows)
        (out / "report.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
        (out / "report.csv").write_text(report_csv(doc), encoding="utf-8")
        print(format_report(doc))
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    summary = Path(args.summary) if args.summary else out / "summary.csv"
    rows = read_summary(summary)
    if not rows:
        print(f"{summary}: no rows", file=sys.stderr)
        return 1
    doc = report(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    (out / "report.csv").write_text(report_csv(doc), encoding="utf-8")
    print(format_report(doc))
    return 0


def _cmd_origin(args) -> int:
    if args.config:
        specs = load_config(args.config).origins
        if not specs:
            print(f"{args.config}: no 'origins' entries", file=sys.stderr)
            return 2
        spec = specs[args.index]
    else:
        spec = OriginSpec()
    fields = {
        "port": args.port,
        "object_size": args.size,
        "seed": args.seed,
        "added_latency_ms": args.latency,
        "throttle_bytes_per_s": args.throttle,
        "fail_after": args.fail_after,
        "host": args.host,
    }
    spec = spec.model_copy(update={k: v for k, v in fields.items() if v is not None})
    if args.no_ranges:
        spec = spec.model_copy(update={"ranges_enabled": False})
    handle = serve(spec.to_config())
    print(f"serving {spec.object_size} bytes (seed {spec.seed}) at {handle.url}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.is_set() and handle.alive:
            stop.wait(0.2)
    except KeyboardInterrupt:
        pass
    handle.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpstream", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=["sim", "live"])
    r.add_argument("--out")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="aggregate an existing summary.csv")
    rep.add_argument("--out", required=True, help="results directory")
    rep.add_argument("--summary", help="summary CSV (default: <out>/summary.csv)")
    rep.set_defaults(func=_cmd_report)

    o = sub.add_parser("origin", help="launch the test origin")
    o.add_argument("--config", help="take settings from this config's 'origins' list")
    o.add_argument("--index", type=int, default=0)
    o.add_argument("--host")
    o.add_argument("--port", type=int)
    o.add_argument("--size", type=int, help="object size in bytes")
    o.add_argument("--seed", type=int)
    o.add_argument("--latency", type=float, help="added latency per request, ms")
    o.add_argument("--throttle", type=float, help="bytes per second")
    o.add_argument("--no-ranges", action="store_true")
    o.add_argument("--fail-after", type=int)
    o.set_defaults(func=_cmd_origin)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

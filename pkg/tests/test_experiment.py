import json
import math
import statistics

import pytest
import yaml
from pydantic import ValidationError

from mpstream import KB, MB
from mpstream.experiment import (
    SUMMARY_COLUMNS,
    ExperimentConfig,
    SummaryRow,
    emit_summary,
    load_config,
    parse_summary,
    report,
    report_csv,
    run_experiment,
    sweep_order,
)
from mpstream.netsim import PathModel, SimConfig, run as run_sim
from mpstream.origin import OriginConfig, serve
from mpstream.playout import BufferConfig
from mpstream.scheduler import Policy, SchedulerConfig

SIM = {"paths": [{"rtt_ms": 30, "delta1_ms": 5, "delta2_ms": 5, "trace_mbps": [[0, 10]]},
                 {"rtt_ms": 60, "delta1_ms": 5, "delta2_ms": 5, "trace_mbps": [[0, 10]]}]}


def small(**kw):
    doc = dict(policies=["harmonic"], chunk_sizes=[256 * KB], prebuffer_targets=[40.0],
               repetitions=3, rng_seed=4, object_size=24 * MB, sim=SIM)
    doc.update(kw)
    return ExperimentConfig.model_validate(doc)


def row(frac=None, policy=Policy.HARMONIC, rep=0, error="", dl=1000.0):
    return SummaryRow(run_id=f"r{rep}", policy=policy, chunk_size=256 * KB, prebuffer_s=40.0,
                      repetition=rep, prebuffer_download_ms=None if error else dl,
                      frac_path0_prebuffer=frac, error=error)


class TestRunExperiment:
    def test_fixed_seed_gives_identical_rows(self):
        rows = run_experiment(small())
        assert len(rows) == 3
        strip = [r.model_dump(exclude={"run_id", "repetition"}) for r in rows]
        assert strip[0] == strip[1] == strip[2]

    def test_default_axes_cardinality(self):
        cfg = ExperimentConfig.model_validate({"sim": SIM})
        order = sweep_order(cfg)
        assert len(order) == 3 * 4 * 3 * 20 == 720
        assert len(set(order)) == 720

    def test_order_shuffled_within_repetitions(self):
        cfg = ExperimentConfig.model_validate({"sim": SIM})
        order = sweep_order(cfg)
        assert [o[0] for o in order] == sorted(o[0] for o in order)
        assert order[:36] != [(0, *c) for c in cfg.combinations()]

    def test_jittered_repetitions_differ_but_reproduce(self):
        cfg = small(sim={**SIM, "jitter": True})
        rows = run_experiment(cfg)
        assert len({r.prebuffer_download_ms for r in rows}) == 3
        assert run_experiment(cfg) == rows

    def test_every_run_has_a_complete_log(self, tmp_path):
        rows = run_experiment(small(policies=["harmonic", "ratio"], repetitions=2), tmp_path)
        assert parse_summary((tmp_path / "summary.csv").read_text()) == rows
        for r in rows:
            lines = (tmp_path / "logs" / f"{r.run_id}.jsonl").read_text().splitlines()
            recs = [json.loads(x) for x in lines]
            assert recs[-1]["kind"] == "end"
            assert any(x["kind"] == "complete" for x in recs)

    def test_truncated_run_is_recorded_not_fatal(self):
        cfg = small(repetitions=1, sim={**SIM, "time_limit_ms": 1000})
        (r,) = run_experiment(cfg)
        assert r.error == "truncated"

    def test_live_failure_recorded_per_row(self):
        cfg = small(mode="live", repetitions=2, live={"networks": [[{"host": "127.0.0.1", "port": 9}]],
                                                      "bindings": [None], "timeout_s": 1})
        rows = run_experiment(cfg)
        assert len(rows) == 2 and all(r.error for r in rows)
        assert report(rows)["combinations"] == []


def test_live_matches_sim_prediction():
    size = 16 * MB
    a = serve(OriginConfig(object_size=size, seed=1, throttle=5e6))
    b = serve(OriginConfig(object_size=size, seed=1, throttle=3e6))
    try:
        cfg = small(mode="live", repetitions=1, object_size=size, session="prebuffer",
                    prebuffer_targets=[20.0], low_watermark_s=5, refill_target_s=10,
                    live={"networks": [[{"host": a.host, "port": a.port}], [{"host": b.host, "port": b.port}]],
                          "bindings": ["127.0.0.1", "127.0.0.2"]})
        (live,) = run_experiment(cfg)
    finally:
        a.stop()
        b.stop()
    assert live.ok, live.error
    # loopback: ~1 ms round trips, rates from the origin throttles
    sim = run_sim(SimConfig(
        (PathModel.constant(1, 5000), PathModel.constant(1, 3000)), size,
        SchedulerConfig(Policy.HARMONIC), BufferConfig(312_500, 20, 5, 10), stop_after_prebuffer=True,
    )).summary.prebuffer_download_ms
    assert live.prebuffer_download_ms == pytest.approx(sim, rel=0.2)


class TestReport:
    def test_hand_computed_stats(self):
        doc = report([row(0.6, rep=0), row(0.62, rep=1), row(0.64, rep=2)])
        (c,) = doc["combinations"]
        f = c["frac_path0_prebuffer"]
        assert f["mean"] == pytest.approx(0.62)
        assert f["std"] == pytest.approx(0.02)
        assert f["median"] == pytest.approx(0.62)
        assert c["n"] == 3 and not c["single_sample"]

    def test_single_row(self):
        (c,) = report([row(0.5)])["combinations"]
        assert c["frac_path0_prebuffer"]["std"] == 0.0
        assert c["n"] == 1 and c["single_sample"]

    def test_failed_combination_omitted_with_warning(self):
        doc = report([row(0.5), row(policy=Policy.EWMA, error="ConnectFailed: refused")])
        assert [c["policy"] for c in doc["combinations"]] == ["harmonic"]
        assert len(doc["warnings"]) == 1 and "ewma" in doc["warnings"][0]

    def test_empty_table_rejected(self):
        with pytest.raises(ValueError):
            report([])

    def test_download_stats_against_statistics_module(self):
        times = [900.0, 1100.0, 1000.0, 1300.0]
        (c,) = report([row(dl=t, rep=i) for i, t in enumerate(times)])["combinations"]
        d = c["prebuffer_download_ms"]
        assert d == {"median": statistics.median(times), "mean": statistics.fmean(times),
                     "std": statistics.stdev(times)}

    def test_report_csv_shape(self):
        text = report_csv(report([row(0.6), row(0.7, rep=1)]))
        header, line = text.strip().splitlines()
        assert len(header.split(",")) == len(line.split(","))


class TestSummaryCsv:
    def test_round_trip_exact(self):
        rows = run_experiment(small(policies=["harmonic", "ewma", "ratio"], repetitions=1))
        rows.append(row(error="BadStatus: 200, not 206"))
        text = emit_summary(rows)
        assert parse_summary(text) == rows
        assert report(parse_summary(text)) == report(rows)

    def test_column_order(self):
        assert emit_summary([]).strip().split(",") == list(SUMMARY_COLUMNS)

    def test_odd_floats_survive(self):
        r = SummaryRow(run_id="x", policy="ewma", chunk_size=1, prebuffer_s=0.1, repetition=0,
                       prebuffer_download_ms=1 / 3, frac_path0_prebuffer=math.nextafter(1.0, 0.0))
        assert parse_summary(emit_summary([r])) == [r]

    def test_fractions_validated(self):
        with pytest.raises(ValidationError):
            row(1.5)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"sim": SIM, "chunk_size": [1024]}))
        with pytest.raises(ValidationError):
            load_config(p)

    def test_unknown_nested_key_rejected(self):
        bad = {"paths": [dict(SIM["paths"][0], rtt=3), SIM["paths"][1]]}
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"sim": bad})

    def test_schema_version_checked(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"sim": SIM, "schema_version": 2})

    def test_mode_needs_section(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"mode": "live", "sim": SIM})

    def test_policy_names_case_insensitive(self):
        assert small(policies=["Harmonic", "EWMA"]).policies == [Policy.HARMONIC, Policy.EWMA]

    def test_mbps_conversion(self):
        m = small().sim_config(Policy.HARMONIC, 256 * KB, 40.0).paths[0]
        assert m.bandwidth_trace == ((0.0, 1250.0),)

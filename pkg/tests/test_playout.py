import pytest

from mpstream.playout import (
    BufferConfig,
    FetchGate,
    Phase,
    PlayoutBuffer,
    TRANSITIONS,
    consume,
    fetch_gate,
    ingest,
)

BITRATE = 100_000.0  # bytes per media second
CFG = BufferConfig(BITRATE)


def buf(phase, buffered, media_bytes=None):
    b = PlayoutBuffer(CFG, media_bytes=media_bytes, phase=phase, buffered=buffered, ingested=buffered)
    return b


def secs(s):
    return round(s * BITRATE)


def test_defaults():
    assert (CFG.prebuffer_target, CFG.low_watermark, CFG.refill_target) == (40.0, 10.0, 20.0)


@pytest.mark.parametrize("low,refill,pre", [(20, 10, 40), (10, 50, 40), (10, 10, 40)])
def test_watermark_order_enforced(low, refill, pre):
    with pytest.raises(ValueError):
        BufferConfig(BITRATE, pre, low, refill)


class TestIngest:
    def test_prebuffer_threshold_crossed(self):
        b = ingest(buf(Phase.PRE_BUFFERING, 39.9), secs(0.2))
        assert b.phase is Phase.STEADY
        assert b.buffered == pytest.approx(40.1)

    def test_exactly_target_is_not_enough(self):
        b = ingest(buf(Phase.PRE_BUFFERING, 39.0), secs(1.0))
        assert b.phase is Phase.PRE_BUFFERING

    def test_refill_threshold_inclusive(self):
        b = ingest(buf(Phase.RE_BUFFERING, 19.0), secs(1.0))
        assert b.phase is Phase.STEADY
        assert b.buffered == pytest.approx(20.0)

    @pytest.mark.parametrize("phase", list(Phase))
    def test_zero_is_identity(self, phase):
        b = buf(phase, 12.5)
        ingest(b, 0)
        assert (b.phase, b.buffered) == (phase, 12.5)

    def test_last_bytes_start_playback(self):
        b = PlayoutBuffer(CFG, media_bytes=secs(5))
        ingest(b, secs(5))
        assert b.phase is Phase.STEADY

    def test_drained_recovers_at_refill(self):
        b = buf(Phase.DRAINED, 0.0)
        ingest(b, secs(15))
        assert b.phase is Phase.DRAINED
        ingest(b, secs(5))
        assert b.phase is Phase.STEADY


class TestConsume:
    def test_drop_below_low_watermark(self):
        b = consume(buf(Phase.STEADY, 10.5), 1000)
        assert b.buffered == pytest.approx(9.5)
        assert b.phase is Phase.RE_BUFFERING

    def test_floor_at_zero_and_drain(self):
        b = consume(buf(Phase.STEADY, 0.5), 1000)
        assert b.buffered == 0
        assert b.phase is Phase.DRAINED
        assert b.stall_time == pytest.approx(500)
        consume(b, 250)
        assert b.stall_time == pytest.approx(750)
        assert b.drained_ms == pytest.approx(750)

    def test_no_consumption_before_start(self):
        b = consume(buf(Phase.PRE_BUFFERING, 5.0), 500)
        assert b.buffered == 5.0
        assert b.stall_time == 500
        assert b.drained_ms == 0

    def test_finishes_when_media_exhausted(self):
        b = PlayoutBuffer(CFG, media_bytes=secs(30))
        ingest(b, secs(30))
        consume(b, 31_000)
        assert b.phase is Phase.FINISHED
        assert b.buffered == 0

    def test_no_rebuffering_after_last_byte(self):
        b = PlayoutBuffer(CFG, media_bytes=secs(45))
        ingest(b, secs(45))
        consume(b, 40_000)
        assert b.phase is Phase.STEADY

    def test_negative_elapsed_rejected(self):
        with pytest.raises(ValueError):
            consume(buf(Phase.STEADY, 1.0), -1)


@pytest.mark.parametrize("phase,buffered,gate", [
    (Phase.PRE_BUFFERING, 0.0, FetchGate.ALLOWED),
    (Phase.STEADY, 35.0, FetchGate.PAUSED),
    (Phase.RE_BUFFERING, 12.0, FetchGate.ALLOWED),
    (Phase.DRAINED, 0.0, FetchGate.ALLOWED),
    (Phase.FINISHED, 0.0, FetchGate.PAUSED),
])
def test_fetch_gate(phase, buffered, gate):
    assert fetch_gate(buf(phase, buffered)) is gate


def test_on_off_cycle_and_conservation():
    b = PlayoutBuffer(CFG, media_bytes=secs(600))
    ingest(b, secs(40.5))
    assert b.phase is Phase.STEADY
    consume(b, 31_000)
    assert b.phase is Phase.RE_BUFFERING
    ingest(b, secs(10.5))
    assert b.phase is Phase.STEADY
    assert b.buffered == pytest.approx(b.ingested - b.consumed, abs=1e-12)
    assert all((src, dst) in TRANSITIONS for _, src, dst in b.transitions)
    assert [dst for _, _, dst in b.transitions] == [Phase.STEADY, Phase.RE_BUFFERING, Phase.STEADY]

import io

import pytest

from mpstream import KB
from mpstream.origin import OriginConfig, serve
from mpstream.playout import BufferConfig
from mpstream.scheduler import ChunkAssignment, ChunkScheduler, Policy, SchedulerConfig
from mpstream.playout import Phase
from mpstream.transport import (
    BadStatus,
    ConnectFailed,
    LiveSession,
    PathBinding,
    PathExhausted,
    RangeClient,
    ServerRotation,
    SessionFailed,
    SourceEndpoint,
    check_bindings,
    failover,
    fetch_range,
    resume_after_failover,
)


@pytest.fixture
def origins():
    handles = []

    def make(**kw):
        h = serve(OriginConfig(**kw))
        handles.append(h)
        return h

    yield make
    for h in handles:
        h.stop()


def ep(h, net=0):
    return SourceEndpoint(net, h.host, h.port)


def asg(start, length, path=0):
    return ChunkAssignment(path, "", start, length, 0)


class TestFetchRange:
    def test_prefix(self, origins):
        h = origins(object_size=4096, seed=5)
        r = fetch_range(PathBinding(0), ep(h), asg(0, 1024))
        assert r.body == h.content[:1024]
        assert r.sent_ms <= r.first_byte_ms <= r.last_byte_ms

    def test_tail_byte(self, origins):
        h = origins(object_size=4096, seed=5)
        assert fetch_range(PathBinding(0), ep(h), asg(4095, 1)).body == h.content[4095:]

    def test_full_body_reply_is_bad_status(self, origins):
        h = origins(object_size=4096, ranges_enabled=False)
        with pytest.raises(BadStatus):
            fetch_range(PathBinding(0), ep(h), asg(0, 1024))

    def test_connect_failure(self, origins):
        h = origins(object_size=10)
        dead = ep(h)
        h.stop()
        with pytest.raises(ConnectFailed):
            fetch_range(PathBinding(0), dead, asg(0, 5))

    def test_persistent_connection_reused(self, origins):
        h = origins(object_size=64 * KB, seed=2)
        c = RangeClient(PathBinding(0))
        for k in range(8):
            assert c.fetch_range(ep(h), asg(k * 8 * KB, 8 * KB)).body == h.content[k * 8 * KB:(k + 1) * 8 * KB]
        c.close()
        assert c.connections_opened == 1
        assert len(h.connections) == 1

    def test_source_address_binding(self, origins):
        h = origins(object_size=100)
        fetch_range(PathBinding(0, "127.0.0.2"), ep(h), asg(0, 10))
        assert h.connections[0][0] == "127.0.0.2"

    def test_first_byte_after_origin_latency(self, origins):
        h = origins(object_size=100, added_latency=50)
        r = fetch_range(PathBinding(0), ep(h), asg(0, 10))
        assert r.first_byte_ms - r.sent_ms >= 50

    def test_bindings_must_differ(self):
        with pytest.raises(ValueError):
            check_bindings([PathBinding(0, "10.0.0.1"), PathBinding(1, "10.0.0.1")])
        check_bindings([PathBinding(0), PathBinding(1)])


class TestFailover:
    A, B = SourceEndpoint(0, "a", 1), SourceEndpoint(0, "b", 2)

    def test_next_in_order(self):
        assert failover(0, self.A, [self.A, self.B]) == self.B

    def test_singleton_exhausted(self):
        with pytest.raises(PathExhausted):
            failover(0, self.A, [self.A])

    def test_full_rotation_exhausted(self):
        rot = ServerRotation([self.A, self.B])
        assert rot.failover(self.A) == self.B
        with pytest.raises(PathExhausted):
            rot.failover(self.B)

    def test_cooldown_expires(self):
        now = [0.0]
        rot = ServerRotation([self.A, self.B], cooldown_s=30, clock=lambda: now[0])
        rot.failover(self.A)
        now[0] = 31.0
        assert rot.failover(self.B) == self.A

    def test_unknown_server(self):
        with pytest.raises(ValueError):
            failover(0, SourceEndpoint(0, "c", 3), [self.A, self.B])


class TestResume:
    def sched(self):
        s = ChunkScheduler(SchedulerConfig(), 2 * 1024 * KB)
        s.path_ready(0, 0)
        s.path_ready(1, 0)
        return s

    def test_same_range_next_server(self):
        s = self.sched()
        a = s.next_assignment(0, Phase.PRE_BUFFERING)
        again = resume_after_failover(s, a, SourceEndpoint(0, "b", 2))
        assert (again.range_start, again.range_len, again.source_id) == (a.range_start, a.range_len, "b:2")

    def test_exhausted_moves_to_other_path(self):
        s = self.sched()
        s.next_assignment(0, Phase.PRE_BUFFERING)
        a1 = s.next_assignment(1, Phase.PRE_BUFFERING)
        assert resume_after_failover(s, a1, None) is None
        a0 = s.in_flight[0]
        from mpstream.estimators import ThroughputSample
        s.on_chunk_complete(a0, ThroughputSample(0, a0.range_len, 10.0))
        b = s.next_assignment(0, Phase.PRE_BUFFERING)
        assert (b.path_id, b.range_start) == (0, a1.range_start)

    def test_nothing_in_flight(self):
        assert resume_after_failover(self.sched(), None, None) is None


SMALL_BUF = BufferConfig(bitrate=100_000, prebuffer_target=40, low_watermark=10, refill_target=20)


def session(networks, **kw):
    bindings = [PathBinding(i, f"127.0.0.{i + 1}") for i in range(len(networks))]
    return LiveSession(networks, bindings, SchedulerConfig(Policy.HARMONIC, base_chunk=64 * KB),
                       SMALL_BUF, **kw)


class TestLiveSession:
    def test_byte_exact_two_paths(self, origins):
        a = origins(object_size=3_000_000, seed=9, throttle=4e6)
        b = origins(object_size=3_000_000, seed=9, throttle=2e6)
        res = session([[ep(a, 0)], [ep(b, 1)]]).run()
        assert res.data == a.content
        assert len(a.connections) == 1 and len(b.connections) == 1
        assert all(x > 0 for x in res.summary.bytes_by_path["prebuffer"])

    def test_writes_to_sink(self, origins):
        a = origins(object_size=500_000, seed=1)
        b = origins(object_size=500_000, seed=1)
        sink = io.BytesIO()
        res = session([[ep(a, 0)], [ep(b, 1)]], sink=sink).run()
        assert res.data is None and sink.getvalue() == a.content

    def test_failover_within_network(self, origins):
        a = origins(object_size=2_000_000, seed=4, throttle=3e6)
        b1 = origins(object_size=2_000_000, seed=4, throttle=3e6, fail_after=3)
        b2 = origins(object_size=2_000_000, seed=4, throttle=3e6)
        res = session([[ep(a, 0)], [ep(b1, 1), ep(b2, 1)]]).run()
        assert res.data == a.content
        assert res.summary.failovers == [(1, f"{b1.host}:{b1.port}", f"{b2.host}:{b2.port}")]
        assert b2.requests_served > 0

    def test_single_path_degradation(self, origins):
        a = origins(object_size=2_000_000, seed=6, throttle=3e6)
        b = origins(object_size=2_000_000, seed=6, throttle=3e6, fail_after=4)
        res = session([[ep(a, 0)], [ep(b, 1)]]).run()
        assert res.data == a.content
        assert res.summary.dead_paths == [1]

    def test_all_paths_dead(self, origins):
        a = origins(object_size=2_000_000, fail_after=2)
        b = origins(object_size=2_000_000, fail_after=2)
        with pytest.raises(SessionFailed):
            session([[ep(a, 0)], [ep(b, 1)]]).run()

    def test_size_mismatch_detected(self, origins):
        # slow enough that both sizes are known long before the last byte
        a = origins(object_size=2_000_000, throttle=1e6)
        b = origins(object_size=3_000_000, throttle=1e6)
        with pytest.raises(SessionFailed):
            session([[ep(a, 0)], [ep(b, 1)]]).run()

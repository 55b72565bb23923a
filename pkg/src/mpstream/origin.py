"""Loopback HTTP/1.1 origin serving one synthetic object with byte ranges.

Latency, throughput cap, range support and a request-count kill switch are
configurable so the transport and failover paths can be exercised locally.
"""
from __future__ import annotations

import logging
import random
import re
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import List, Optional, Tuple

log = logging.getLogger(__name__)

OBJECT_PATH = "/media.bin"
_RANGE_RE = re.compile(r"^bytes=(\d+)-(\d*)$")
_BLOCK = 16 * 1024


@dataclass(frozen=True)
class OriginConfig:
    port: int = 0  # 0 picks a free port
    object_size: int = 4 * 1024 * 1024
    seed: int = 0
    added_latency: float = 0.0  # ms, before the response headers
    throttle: Optional[float] = None  # bytes per second, None = unlimited
    ranges_enabled: bool = True
    fail_after: Optional[int] = None  # requests served before the origin dies
    host: str = "127.0.0.1"
    object_path: str = OBJECT_PATH


@lru_cache(maxsize=8)
def object_content(seed: int, size: int) -> bytes:
    """The served object: a pure function of (seed, size)."""
    return random.Random(seed).randbytes(size)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # paced partial blocks otherwise wait on delayed ACKs
    disable_nagle_algorithm = True
    server: "_OriginServer"

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.client_address[0], fmt % args)

    def setup(self):
        super().setup()
        self.server.note_connection(self.client_address)

    def handle_one_request(self):
        if self.server.dead.is_set():
            self.close_connection = True
            return
        super().handle_one_request()

    def do_HEAD(self):
        self._respond(head=True)

    def do_GET(self):
        self._respond(head=False)

    def _respond(self, head: bool):
        srv = self.server
        cfg = srv.config
        n = srv.count_request()
        if cfg.fail_after is not None:
            if n > cfg.fail_after:
                self.close_connection = True
                return
            if n == cfg.fail_after:
                # stop listening before the last response goes out
                srv.kill()
                self.close_connection = True
        if self.path.split("?", 1)[0] != cfg.object_path:
            self.send_error(404)
            return
        if cfg.added_latency > 0:
            time.sleep(cfg.added_latency / 1000.0)

        body = srv.content
        size = len(body)
        start, end = 0, size - 1
        status = 200
        header = self.headers.get("Range")
        if header and cfg.ranges_enabled and not head:
            m = _RANGE_RE.match(header.strip())
            if not m:
                self.send_error(416)
                return
            start = int(m.group(1))
            end = int(m.group(2)) if m.group(2) else size - 1
            end = min(end, size - 1)
            if start > end:
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{size}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            status = 206

        self.send_response(status)
        self.send_header("Content-Type", "application/octet-stream")
        if cfg.ranges_enabled:
            self.send_header("Accept-Ranges", "bytes")
        if status == 206:
            self.send_header("Content-Range", f"bytes {start}-{end}/{size}")
        self.send_header("Content-Length", str(end - start + 1))
        self.end_headers()
        if not head:
            self._send_paced(memoryview(body)[start:end + 1])

    def _send_paced(self, payload: memoryview):
        rate = self.server.config.throttle
        if not rate:
            self.wfile.write(payload)
            return
        t0 = time.perf_counter()
        sent = 0
        block = max(1024, min(_BLOCK, int(rate / 100)))
        while sent < len(payload):
            chunk = payload[sent:sent + block]
            sent += len(chunk)
            # a block leaves no earlier than its share of the rate allows
            ahead = t0 + sent / rate - time.perf_counter()
            if ahead > 0:
                time.sleep(ahead)
            self.wfile.write(chunk)


class _OriginServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, config: OriginConfig):
        self.config = config
        self.content = object_content(config.seed, config.object_size)
        self.dead = threading.Event()
        self._lock = threading.Lock()
        self.requests = 0
        self.connections: List[Tuple[str, int]] = []
        super().__init__((config.host, config.port), _Handler)

    def count_request(self) -> int:
        with self._lock:
            self.requests += 1
            return self.requests

    def note_connection(self, addr):
        with self._lock:
            self.connections.append(addr)

    def kill(self):
        """Stop accepting connections; open ones are closed at their next request.

        Must not be called from the serve_forever thread."""
        with self._lock:
            if self.dead.is_set():
                return
            self.dead.set()
        self.shutdown()
        self.server_close()


class OriginHandle:
    """A running origin. Stop it with :meth:`stop` or use it as a context manager."""

    def __init__(self, server: _OriginServer):
        self._server = server
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True, name=f"origin-{self.port}")
        self._thread.start()

    @property
    def config(self) -> OriginConfig:
        return self._server.config

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}{self.config.object_path}"

    @property
    def content(self) -> bytes:
        return self._server.content

    @property
    def requests_served(self) -> int:
        return self._server.requests

    @property
    def connections(self) -> List[Tuple[str, int]]:
        with self._server._lock:
            return list(self._server.connections)

    @property
    def alive(self) -> bool:
        return not self._server.dead.is_set()

    def kill(self):
        self._server.kill()

    def stop(self):
        self._server.kill()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(config: OriginConfig) -> OriginHandle:
    """Start an origin in a background thread; raises ``OSError`` if the port is taken."""
    return OriginHandle(_OriginServer(config))

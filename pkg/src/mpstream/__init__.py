"""Two-path, two-source chunked media download engine.

Bandwidth estimators, a completion-aligned chunk scheduler, a playout buffer
state machine, an HTTP range transport with per-network failover, a bundled
test origin and a deterministic discrete-event simulator.
"""

__version__ = "0.1.0"

KB = 1024
MB = 1024 * KB

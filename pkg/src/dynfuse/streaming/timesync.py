"""Clock-offset estimation between a client and the server.

Four-timestamp exchange: the client stamps t1 when sending, the server
stamps t2 on receive and t3 on reply, the client stamps t4 on arrival.
offset = ((t2 - t1) + (t3 - t4)) / 2 estimates server_clock - client_clock;
the median over several rounds rejects outliers.  With asymmetric network
delays the estimate is off by at most half the asymmetry.
"""

from __future__ import annotations

import statistics
import time


class SyncUnavailable(RuntimeError):
    pass


def now_us() -> int:
    return time.time_ns() // 1000


def estimate_offset(exchange, rounds: int = 8, clock=now_us) -> int:
    """Runs `rounds` four-timestamp exchanges and returns the median offset.

    `exchange(seq, t1)` must return (t2, t3) from the server or raise
    TimeoutError; a complete failure raises SyncUnavailable so callers can
    flag latency numbers as unreliable.
    """
    offsets = []
    for seq in range(rounds):
        t1 = clock()
        try:
            t2, t3 = exchange(seq, t1)
        except TimeoutError:
            continue
        t4 = clock()
        offsets.append(((t2 - t1) + (t3 - t4)) // 2)
    if not offsets:
        raise SyncUnavailable("no time-sync round completed")
    return int(statistics.median(offsets))

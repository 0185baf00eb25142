"""Deterministic fault injection for datagram traces.

The simulator turns an ordered list of sent datagrams into a delivery
schedule, applying loss, duplication, single-bit corruption, uniform
delay and bounded local reordering.  Everything is driven by one seeded
``random.Random``, so a given (trace, model) pair always produces the
same schedule.

Draw order is part of the contract (tests replay it): for each datagram,
first the loss coin; if it survives, the duplication coin; then for each
copy, in this order, the corruption coin (plus a bit index when it fires
on a non-empty datagram), the delay, and the displacement.  Send times
are spaced 1 ms apart, a displacement of d delays a copy by d of those
slots, and the final schedule is a stable sort by delivery time, so ties
keep send order.
"""

import random
from dataclasses import dataclass
from typing import Iterable, List, Tuple

SEND_SPACING_MS = 1.0


@dataclass(frozen=True)
class FaultModel:
    seed: int = 0
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    corrupt_prob: float = 0.0
    reorder_window: int = 0
    delay_min_ms: float = 0.0
    delay_max_ms: float = 0.0

    def __post_init__(self):
        for name in ("loss_prob", "dup_prob", "corrupt_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError("%s must be within [0, 1], got %r" % (name, value))
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be >= 0")
        if self.delay_min_ms < 0 or self.delay_max_ms < self.delay_min_ms:
            raise ValueError("need 0 <= delay_min_ms <= delay_max_ms")


def _flip_one_bit(datagram: bytes, bit: int) -> bytes:
    corrupted = bytearray(datagram)
    corrupted[bit >> 3] ^= 1 << (bit & 7)
    return bytes(corrupted)


def simulate(trace: Iterable[bytes], model: FaultModel, rng=None,
             first_index: int = 0) -> List[Tuple[bytes, float]]:
    """Map a send trace to a list of (datagram, deliver_time_ms).

    ``rng`` and ``first_index`` let a live channel feed successive send
    batches through one generator stream; left at their defaults, the
    whole trace is one batch seeded from the model.
    """
    rng = random.Random(model.seed) if rng is None else rng
    staged: List[Tuple[float, bytes]] = []
    for i, datagram in enumerate(trace, start=first_index):
        if rng.random() < model.loss_prob:
            continue
        copies = 2 if rng.random() < model.dup_prob else 1
        for _ in range(copies):
            payload = datagram
            if rng.random() < model.corrupt_prob and payload:
                payload = _flip_one_bit(payload, rng.randrange(len(payload) * 8))
            delay = rng.uniform(model.delay_min_ms, model.delay_max_ms)
            displacement = rng.randint(0, model.reorder_window)
            deliver = i * SEND_SPACING_MS + delay + displacement * SEND_SPACING_MS
            staged.append((deliver, payload))
    staged.sort(key=lambda item: item[0])
    return [(payload, deliver) for deliver, payload in staged]

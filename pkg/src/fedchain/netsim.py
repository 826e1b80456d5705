"""Single-clock discrete-event network with seeded latency, loss and partitions."""

from __future__ import annotations

import csv
import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .seeding import rng

DELIVER_MESSAGE = "deliver_message"
TRAINING_DONE = "training_done"
MINING_DONE = "mining_done"
ROUND_TIMEOUT = "round_timeout"
EVENT_KINDS = (DELIVER_MESSAGE, TRAINING_DONE, MINING_DONE, ROUND_TIMEOUT)

TRACE_HEADER = ("time", "sequence", "kind", "from", "to", "size_bytes", "note")


class LiveLockError(RuntimeError):
    pass


@dataclass(frozen=True)
class Partition:
    peers: frozenset[int]
    start: float
    end: float

    def splits(self, a: int, b: int, t: float) -> bool:
        return self.start <= t < self.end and ((a in self.peers) != (b in self.peers))


@dataclass(frozen=True)
class NetConfig:
    latency_min: float = 1.0
    latency_max: float = 1.0
    drop_probability: float = 0.0
    partitions: tuple[Partition, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.latency_min <= self.latency_max:
            raise ValueError(f"need 0 <= latency_min <= latency_max, got "
                             f"{self.latency_min}, {self.latency_max}")
        if not 0 <= self.drop_probability < 1:
            raise ValueError(f"drop_probability must be in [0, 1), got {self.drop_probability}")
        parts = tuple(p if isinstance(p, Partition) else Partition(frozenset(p[0]), p[1], p[2])
                      for p in self.partitions)
        object.__setattr__(self, "partitions", parts)


@dataclass(order=True)
class Event:
    fire_time: float
    sequence: int
    kind: str = field(compare=False)
    src: int | None = field(compare=False, default=None)
    dst: int | None = field(compare=False, default=None)
    payload: Any = field(compare=False, default=None)
    size_bytes: int = field(compare=False, default=0)
    note: str = field(compare=False, default="")


@dataclass(frozen=True)
class TraceRecord:
    time: float
    sequence: int
    kind: str
    src: int | None
    dst: int | None
    size_bytes: int
    note: str

    def row(self) -> tuple:
        return (repr(float(self.time)), self.sequence, self.kind,
                "" if self.src is None else self.src,
                "" if self.dst is None else self.dst, self.size_bytes, self.note)


class Simulator:
    """Event queue ordered by (fire_time, sequence).

    ``dispatch`` is called with each event in order; handlers schedule new
    events through :meth:`schedule` and :meth:`broadcast`.
    """

    def __init__(self, net: NetConfig, dispatch: Callable[[Event], None] | None = None,
                 max_events: int = 1_000_000):
        self.net = net
        self.dispatch = dispatch
        self.max_events = max_events
        self.now = 0.0
        self.peers: list[int] = []
        self.trace: list[TraceRecord] = []
        self.delivered = 0
        self.dropped = 0
        self._queue: list[Event] = []
        self._seq = 0
        self._rng = rng(net.seed, 0x4E37)

    def register(self, peer_id: int):
        if peer_id not in self.peers:
            self.peers.append(peer_id)

    def schedule(self, delay: float, kind: str, *, src=None, dst=None, payload=None,
                 size_bytes: int = 0, note: str = "") -> Event:
        if delay < 0:
            raise ValueError(f"cannot schedule into the past (delay={delay})")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        ev = Event(self.now + delay, self._seq, kind, src, dst, payload, size_bytes, note)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def _latency(self) -> float:
        lo, hi = self.net.latency_min, self.net.latency_max
        return lo if lo == hi else float(self._rng.uniform(lo, hi))

    def broadcast(self, sender: int, message: Any, size_bytes: int = 0,
                  note: str = "", recipients: Sequence[int] | None = None) -> list[Event]:
        """Schedule one delivery per other registered peer; returns the scheduled events."""
        if sender not in self.peers:
            raise KeyError(f"sender {sender} is not registered")
        targets = [p for p in (self.peers if recipients is None else recipients) if p != sender]
        out = []
        for dst in targets:
            # both draws happen for every recipient so the stream stays aligned
            drop = self._rng.random() < self.net.drop_probability
            latency = self._latency()
            cut = any(p.splits(sender, dst, self.now) for p in self.net.partitions)
            if drop or cut:
                self.dropped += 1
                self.trace.append(TraceRecord(self.now, -1, DELIVER_MESSAGE, sender, dst, size_bytes,
                                              f"dropped:{'partition' if cut else 'loss'}:{note}"))
                continue
            out.append(self.schedule(latency, DELIVER_MESSAGE, src=sender, dst=dst,
                                     payload=message, size_bytes=size_bytes, note=note))
        return out

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: float | None = None) -> list[TraceRecord]:
        """Execute events until the queue drains or the clock would pass ``until``."""
        executed = 0
        while self._queue:
            if until is not None and self._queue[0].fire_time > until:
                self.now = max(self.now, until)
                break
            ev = heapq.heappop(self._queue)
            executed += 1
            if executed > self.max_events:
                raise LiveLockError(f"exceeded {self.max_events} events at t={self.now}")
            self.now = ev.fire_time
            if ev.kind == DELIVER_MESSAGE:
                self.delivered += 1
            self.trace.append(TraceRecord(ev.fire_time, ev.sequence, ev.kind, ev.src, ev.dst,
                                          ev.size_bytes, ev.note))
            if self.dispatch is not None:
                self.dispatch(ev)
        return self.trace

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for rec in self.trace:
            h.update(repr(rec.row()).encode())
        return h.hexdigest()


def write_trace_csv(trace: Iterable[TraceRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for rec in trace:
            w.writerow(rec.row())

"""Global event queue and the peer-to-peer latency model."""
from __future__ import annotations

import enum
import heapq
import random
from dataclasses import dataclass
from typing import Any, Iterable, NamedTuple


class EventKind(enum.IntEnum):
    TXN_SUBMITTED = 0
    MINING_COMPLETE = 1
    BLOCK_ARRIVAL = 2
    VOTE_ARRIVAL = 3
    BLOCK_COMMITTED = 4


class Event(NamedTuple):
    timestamp: float
    seq: int
    kind: EventKind
    target: int
    payload: Any = None


class EmptyQueue(IndexError):
    pass


class EventQueue:
    """Min-heap on ``(timestamp, seq)``; equal timestamps pop in push order."""

    def __init__(self):
        self._heap: list[Event] = []
        self._seq = 0
        self.pushed = 0
        self.popped = 0

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)

    def push(self, timestamp: float, kind: EventKind, target: int, payload: Any = None) -> Event:
        ev = Event(timestamp, self._seq, kind, target, payload)
        self._seq += 1
        self.pushed += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop_earliest(self) -> Event:
        if not self._heap:
            raise EmptyQueue("event queue is empty")
        self.popped += 1
        return heapq.heappop(self._heap)

    def peek(self) -> Event:
        if not self._heap:
            raise EmptyQueue("event queue is empty")
        return self._heap[0]


@dataclass(frozen=True)
class LatencyModel:
    mean_ms: float = 100.0
    stddev_ms: float = 20.0
    floor_ms: float = 1.0

    def __post_init__(self):
        if self.floor_ms <= 0:
            raise ValueError("floor_ms must be positive")
        if self.stddev_ms < 0:
            raise ValueError("stddev_ms must be non-negative")

    def sample(self, rng: random.Random) -> float:
        if self.stddev_ms == 0:
            return max(self.mean_ms, self.floor_ms)
        return max(rng.gauss(self.mean_ms, self.stddev_ms), self.floor_ms)


def sample_latency(model: LatencyModel, rng: random.Random) -> float:
    return model.sample(rng)


def broadcast(queue: EventQueue, sender: int, kind: EventKind, payload: Any,
              nodes: Iterable[int], model: LatencyModel, rng: random.Random, now: float) -> int:
    """Deliver one event to every node except ``sender`` after an independent delay."""
    push = queue.push
    sample = model.sample
    sent = 0
    for n in nodes:
        if n != sender:
            push(now + sample(rng), kind, n, payload)
            sent += 1
    return sent

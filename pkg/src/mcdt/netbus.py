"""Broadcast message bus with latency, jitter and loss."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, TextIO

import numpy as np


class MessageKind(str, Enum):
    SELF_POSE = "SelfPose"
    DETECTION = "Detection"


@dataclass(frozen=True)
class AgentMessage:
    kind: MessageKind
    sender: int
    seq: int
    sent_at: float
    payload: Any


@dataclass(frozen=True)
class LinkModel:
    latency_base: float = 0.020
    latency_jitter_std: float = 0.005
    drop_prob: float = 0.01

    def __post_init__(self):
        if self.latency_base < 0 or self.latency_jitter_std < 0:
            raise ValueError("latencies must be non-negative")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")


@dataclass
class BusStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0


@dataclass
class MessageBus:
    """Single logically-serialized queue keyed by (delivery time, sender, seq).

    ``trace``, when given, receives one JSON line per delivery or drop.
    """

    agents: list[int]
    link: LinkModel = field(default_factory=LinkModel)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    trace: TextIO | None = None
    stats: BusStats = field(default_factory=BusStats)

    def __post_init__(self):
        self._queues: dict[int, list] = {a: [] for a in self.agents}
        self._last_now: dict[int, float] = {a: -np.inf for a in self.agents}

    def pending(self, recipient: int) -> int:
        return len(self._queues[recipient])

    def next_delivery_time(self, recipient: int) -> float | None:
        q = self._queues[recipient]
        return q[0][0] if q else None

    def _record(self, event: str, msg: AgentMessage, recipient: int, t: float) -> None:
        if self.trace is None:
            return
        rec = {"event": event, "time": round(t, 9), "recipient": recipient, "sender": msg.sender,
               "kind": msg.kind.value, "seq": msg.seq, "sent_at": round(msg.sent_at, 9)}
        self.trace.write(json.dumps(rec, sort_keys=True) + "\n")

    def send(self, msg: AgentMessage) -> list[tuple[int, float]]:
        """Broadcast ``msg`` to every other agent; returns (recipient, delivery time) pairs.

        Each recipient draws one uniform and one normal variate regardless of
        the outcome.
        """
        scheduled = []
        for r in self.agents:
            if r == msg.sender:
                continue
            self.stats.sent += 1
            drop_u, jitter = self.rng.random(), self.rng.standard_normal()
            if drop_u < self.link.drop_prob:
                self.stats.dropped += 1
                self._record("drop", msg, r, msg.sent_at)
                continue
            t = msg.sent_at + max(0.0, self.link.latency_base + self.link.latency_jitter_std * jitter)
            heapq.heappush(self._queues[r], (t, msg.sender, msg.seq, msg.kind.value, msg))
            scheduled.append((r, t))
        return scheduled

    def deliver_due(self, recipient: int, now: float) -> list[AgentMessage]:
        if now < self._last_now[recipient]:
            raise ValueError("deliver_due called with decreasing time")
        self._last_now[recipient] = now
        q = self._queues[recipient]
        out = []
        while q and q[0][0] <= now:
            t, *_, msg = heapq.heappop(q)
            self.stats.delivered += 1
            self._record("deliver", msg, recipient, t)
            out.append(msg)
        return out


def send(bus: MessageBus, msg: AgentMessage) -> None:
    bus.send(msg)


def deliver_due(bus: MessageBus, recipient: int, now: float) -> list[AgentMessage]:
    return bus.deliver_due(recipient, now)

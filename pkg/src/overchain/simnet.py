"""Deterministic discrete-event network simulation.

A single priority queue orders deliveries by (time, sequence number); ties are
broken by enqueue order, so a run is a pure function of configuration and
seed. All randomness flows from one master seed through named sub-streams, so
per-node behavior stays stable when unrelated configuration changes.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from random import Random
from typing import Any, Callable, Optional


# ---------------------------------------------------------------------------
# structured trace
# ---------------------------------------------------------------------------

class Trace:
    """Collects line-delimited structured records of everything observable.

    Lines are JSON with insertion-ordered keys; two runs with the same
    configuration and seed produce byte-identical output.
    """

    def __init__(self) -> None:
        self.lines: list[str] = []

    def emit(self, t: float, actor: str, event: str, **fields: Any) -> None:
        record = {"t": t, "actor": actor, "event": event}
        record.update(fields)
        self.lines.append(json.dumps(record, separators=(",", ":")))

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")


# ---------------------------------------------------------------------------
# link model
# ---------------------------------------------------------------------------

class LinkModel:
    """Per-ordered-pair base delays with optional jitter and timed overrides.

    Node movement is expressed purely as scheduled base-delay changes: an
    override (t, delay) takes effect for sends at or after time t.
    """

    def __init__(self, default_delay: float = 5.0, jitter: float = 0.0):
        if default_delay <= 0:
            raise ValueError("default_delay must be positive")
        self.default_delay = default_delay
        self.jitter = jitter
        self._base: dict[tuple[str, str], float] = {}
        self._overrides: dict[tuple[str, str], list[tuple[float, float]]] = {}

    def set_link(self, a: str, b: str, delay: float, symmetric: bool = True) -> None:
        self._base[(a, b)] = delay
        if symmetric:
            self._base[(b, a)] = delay

    def add_override(self, a: str, b: str, at: float, delay: float,
                     symmetric: bool = True) -> None:
        pairs = [(a, b), (b, a)] if symmetric else [(a, b)]
        for pair in pairs:
            entries = self._overrides.setdefault(pair, [])
            entries.append((at, delay))
            entries.sort(key=lambda e: e[0])

    def base_delay(self, a: str, b: str, now: float) -> float:
        entries = self._overrides.get((a, b))
        if entries:
            idx = bisect_right(entries, (now, float("inf"))) - 1
            if idx >= 0:
                return entries[idx][1]
        return self._base.get((a, b), self.default_delay)

    def sample(self, a: str, b: str, now: float, rng: Random) -> float:
        base = self.base_delay(a, b, now)
        if self.jitter:
            return base * (1.0 + self.jitter * rng.random())
        return base


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class Engine:
    """Single-threaded event loop. Nodes are objects exposing ``node_id`` and
    ``handle(engine, payload)``; each node's state is mutated only from its
    own deliveries."""

    def __init__(self, seed: int | str, links: LinkModel, trace: Optional[Trace] = None):
        self.seed = seed
        self.links = links
        self.trace = trace if trace is not None else Trace()
        self.now = 0.0
        self.nodes: dict[str, Any] = {}
        self._queue: list[tuple[float, int, str, Any]] = []
        self._seq = 0
        self._rngs: dict[str, Random] = {}
        self._request_seq = 0

    # -- nodes and randomness ------------------------------------------------

    def add_node(self, node: Any) -> None:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node

    def rng(self, stream: str) -> Random:
        rng = self._rngs.get(stream)
        if rng is None:
            material = hashlib.sha256(f"{self.seed}:{stream}".encode()).digest()
            rng = Random(int.from_bytes(material, "big"))
            self._rngs[stream] = rng
        return rng

    def next_request_id(self) -> int:
        self._request_seq += 1
        return self._request_seq

    # -- scheduling ----------------------------------------------------------

    def _push(self, at: float, target: str, payload: Any) -> None:
        if target not in self.nodes:
            raise KeyError(f"unknown node {target!r}")
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, target, payload))

    def send(self, sender: str, target: str, payload: Any) -> None:
        """Network send: delivery after the sampled link delay."""
        delay = self.links.sample(sender, target, self.now, self.rng(f"link:{sender}"))
        self._push(self.now + delay, target, payload)

    def schedule(self, delay: float, target: str, payload: Any) -> None:
        """Local timer on the target node (no network hop)."""
        self._push(self.now + delay, target, payload)

    def schedule_at(self, at: float, target: str, payload: Any) -> None:
        self._push(max(at, self.now), target, payload)

    # -- measurements ---------------------------------------------------------

    def probe_rtt(self, sender: str, target: str, samples: int = 3) -> float:
        """Mean round-trip delay over ``samples`` simulated probe exchanges at
        the current link schedule. Consumes no simulated time."""
        rng = self.rng(f"probe:{sender}")
        total = 0.0
        for _ in range(samples):
            total += self.links.sample(sender, target, self.now, rng)
            total += self.links.sample(target, sender, self.now, rng)
        return total / samples

    # -- main loop -----------------------------------------------------------

    def run(self, max_time: Optional[float] = None) -> bool:
        """Dispatch events in (time, sequence) order until the queue drains.

        Returns True when the run went quiescent (no pending events); False if
        ``max_time`` was hit first with events still pending.
        """
        while self._queue:
            at, _, target, payload = self._queue[0]
            if max_time is not None and at > max_time:
                return False
            heapq.heappop(self._queue)
            self.now = max(self.now, at)
            self.nodes[target].handle(self, payload)
        return True

    @property
    def pending_events(self) -> int:
        return len(self._queue)

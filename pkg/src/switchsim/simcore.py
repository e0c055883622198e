"""Deterministic discrete-event engine with a lossy wireless channel model.

One tick is one millisecond of simulated time.  All randomness flows from a
single 64-bit run seed split into per-link and per-node substreams by stable
hashing, so adding a node or reordering setup calls never perturbs the draws
on unrelated links.  Events at the same tick are processed in scheduling
order (global sequence number), which makes whole runs bit-reproducible.
"""

from __future__ import annotations

import heapq
import random
import struct
from dataclasses import dataclass, field

from .ledger import digest64


class SimError(Exception):
    pass


@dataclass(frozen=True)
class Partition:
    """Directed links severed during [start, end)."""

    start: int
    end: int
    links: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class BandwidthWindow:
    """Per-node send capacity override during [start, end)."""

    start: int
    end: int
    cap: int


@dataclass(frozen=True)
class ChannelConfig:
    loss_prob: float = 0.0
    latency_min: int = 1
    latency_max: int = 1
    bandwidth_cap: int = 8
    partitions: tuple[Partition, ...] = ()
    bandwidth_windows: tuple[BandwidthWindow, ...] = ()

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.loss_prob <= 1.0:
            errs.append(f"loss_prob {self.loss_prob} outside [0, 1]")
        if self.latency_min < 1 or self.latency_max < self.latency_min:
            errs.append(f"latency bounds [{self.latency_min}, {self.latency_max}] invalid")
        if self.bandwidth_cap < 1:
            errs.append(f"bandwidth_cap {self.bandwidth_cap} must be >= 1")
        for w in self.bandwidth_windows:
            if w.cap < 1 or w.end <= w.start:
                errs.append(f"bandwidth window {w} invalid")
        for p in self.partitions:
            if p.end <= p.start:
                errs.append(f"partition {p} has empty range")
        return errs

    def cap_at(self, tick: int) -> int:
        for w in self.bandwidth_windows:
            if w.start <= tick < w.end:
                return w.cap
        return self.bandwidth_cap

    def severed(self, src: int, dst: int, tick: int) -> bool:
        for p in self.partitions:
            if p.start <= tick < p.end and (src, dst) in p.links:
                return True
        return False


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    payload: object
    kind: str
    send_tick: int
    eff_send_tick: int
    deliver_tick: int | None  # None == dropped


@dataclass(frozen=True)
class Delivery:
    node: int
    src: int
    payload: object
    kind: str


@dataclass(frozen=True)
class TimerFired:
    node: int
    tag: tuple


class MessageStats:
    """Conservation accounting: sent = delivered + dropped after finalize()."""

    __slots__ = (
        "sent", "delivered", "dropped",
        "dropped_loss", "dropped_partition", "dropped_cutoff",
        "per_node_sent", "per_kind_sent",
    )

    def __init__(self) -> None:
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.dropped_loss = 0
        self.dropped_partition = 0
        self.dropped_cutoff = 0
        self.per_node_sent: dict[int, int] = {}
        self.per_kind_sent: dict[str, int] = {}

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped

    def record_send(self, src: int, kind: str) -> None:
        self.sent += 1
        self.per_node_sent[src] = self.per_node_sent.get(src, 0) + 1
        self.per_kind_sent[kind] = self.per_kind_sent.get(kind, 0) + 1

    def as_dict(self) -> dict:
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "dropped_loss": self.dropped_loss,
            "dropped_partition": self.dropped_partition,
            "dropped_cutoff": self.dropped_cutoff,
            "per_node_sent": {str(k): self.per_node_sent[k] for k in sorted(self.per_node_sent)},
            "per_kind_sent": {k: self.per_kind_sent[k] for k in sorted(self.per_kind_sent)},
        }


class TraceRecorder:
    """Ordered run trace; one dict per event, exported as JSONL."""

    __slots__ = ("events",)

    def __init__(self) -> None:
        self.events: list[dict] = []

    def emit(self, tick: int, node: int, kind: str, data: dict) -> None:
        self.events.append({"tick": tick, "seq": len(self.events), "node": node, "kind": kind, "data": data})


def link_seed(run_seed: int, src: int, dst: int) -> int:
    return digest64(struct.pack("<Qqq", run_seed & 0xFFFFFFFFFFFFFFFF, src, dst) + b"link")


def node_seed(run_seed: int, node: int) -> int:
    return digest64(struct.pack("<Qq", run_seed & 0xFFFFFFFFFFFFFFFF, node) + b"node")


def stream_seed(run_seed: int, label: str) -> int:
    return digest64(struct.pack("<Q", run_seed & 0xFFFFFFFFFFFFFFFF) + label.encode())


_DELIVER = 0
_TIMER = 1


class Simulator:
    """Single-threaded event loop over an integer tick clock.

    Message path: a send consumes a bandwidth slot at the earliest tick with
    capacity (deferred, never dropped, when the per-node per-tick cap is
    full), then the directed partition set is consulted, then the per-link
    substream draws loss and latency.  Lost and severed sends still consume
    the sender's slot: airtime is spent whether or not the frame arrives.
    """

    def __init__(
        self,
        n_nodes: int,
        channel: ChannelConfig,
        seed: int,
        trace: TraceRecorder | None = None,
        stats: MessageStats | None = None,
    ) -> None:
        errs = channel.validate()
        if errs:
            raise SimError("invalid channel config: " + "; ".join(errs))
        self.n = n_nodes
        self.channel = channel
        self.seed = seed
        self.now = 0
        self.trace = trace
        self.stats = stats if stats is not None else MessageStats()
        self._heap: list[tuple] = []
        self._seq = 0
        self._link_rng: dict[tuple[int, int], random.Random] = {}
        self._node_rng: dict[int, random.Random] = {}
        self._cancelled: set[int] = set()
        self._next_timer_id = 1
        self._send_slots: dict[int, dict[int, int]] = {i: {} for i in range(n_nodes)}

    def link_rng(self, src: int, dst: int) -> random.Random:
        rng = self._link_rng.get((src, dst))
        if rng is None:
            rng = random.Random(link_seed(self.seed, src, dst))
            self._link_rng[(src, dst)] = rng
        return rng

    def node_rng(self, node: int) -> random.Random:
        rng = self._node_rng.get(node)
        if rng is None:
            rng = random.Random(node_seed(self.seed, node))
            self._node_rng[node] = rng
        return rng

    def _claim_slot(self, src: int, tick: int) -> int:
        slots = self._send_slots[src]
        t = tick
        while slots.get(t, 0) >= self.channel.cap_at(t):
            t += 1
        slots[t] = slots.get(t, 0) + 1
        return t

    def schedule_message(self, src: int, dst: int, payload: object, kind: str, send_tick: int | None = None) -> Envelope:
        if not 0 <= dst < self.n or not 0 <= src < self.n:
            raise SimError(f"link {src}->{dst} outside node set 0..{self.n - 1}")
        if src == dst:
            raise SimError("self-send is a local call, not a message")
        tick = self.now if send_tick is None else send_tick
        if tick < self.now:
            raise SimError(f"send tick {tick} in the past (now={self.now})")
        self.stats.record_send(src, kind)
        eff = self._claim_slot(src, tick)
        rng = self.link_rng(src, dst)
        if self.channel.severed(src, dst, eff):
            env = Envelope(src, dst, payload, kind, tick, eff, None)
            self.stats.dropped += 1
            self.stats.dropped_partition += 1
            if self.trace is not None:
                self.trace.emit(self.now, src, "drop", {"dst": dst, "kind": kind, "reason": "partition"})
            return env
        if self.channel.loss_prob > 0.0 and rng.random() < self.channel.loss_prob:
            env = Envelope(src, dst, payload, kind, tick, eff, None)
            self.stats.dropped += 1
            self.stats.dropped_loss += 1
            if self.trace is not None:
                self.trace.emit(self.now, src, "drop", {"dst": dst, "kind": kind, "reason": "loss"})
            return env
        if self.channel.latency_min == self.channel.latency_max:
            lat = self.channel.latency_min
        else:
            lat = rng.randint(self.channel.latency_min, self.channel.latency_max)
        deliver = eff + lat
        env = Envelope(src, dst, payload, kind, tick, eff, deliver)
        heapq.heappush(self._heap, (deliver, self._seq, _DELIVER, env))
        self._seq += 1
        if self.trace is not None:
            meta = getattr(payload, "trace_meta", None)
            data = {"dst": dst, "kind": kind, "deliver": deliver}
            if meta is not None:
                data.update(meta())
            self.trace.emit(self.now, src, "send", data)
        return env

    def set_timer(self, node: int, fire_tick: int, tag: tuple) -> int:
        if fire_tick <= self.now:
            raise SimError(f"timer tick {fire_tick} not in the future (now={self.now})")
        tid = self._next_timer_id
        self._next_timer_id += 1
        heapq.heappush(self._heap, (fire_tick, self._seq, _TIMER, tid, node, tag))
        self._seq += 1
        return tid

    def cancel_timer(self, timer_id: int) -> None:
        self._cancelled.add(timer_id)

    def peek_next_tick(self) -> int | None:
        while self._heap:
            item = self._heap[0]
            if item[2] == _TIMER and item[3] in self._cancelled:
                heapq.heappop(self._heap)
                continue
            return item[0]
        return None

    def step(self) -> list[Delivery | TimerFired]:
        """Advance to the earliest pending event tick and return every event
        at that tick in scheduling order.  Empty queue leaves the clock
        unchanged."""
        tick = self.peek_next_tick()
        if tick is None:
            return []
        self.now = tick
        out: list[Delivery | TimerFired] = []
        while self._heap and self._heap[0][0] == tick:
            item = heapq.heappop(self._heap)
            if item[2] == _DELIVER:
                env: Envelope = item[3]
                self.stats.delivered += 1
                if self.trace is not None:
                    self.trace.emit(tick, env.dst, "deliver", {"src": env.src, "kind": env.kind})
                out.append(Delivery(env.dst, env.src, env.payload, env.kind))
            else:
                _, _, _, tid, node, tag = item
                if tid in self._cancelled:
                    self._cancelled.discard(tid)
                    continue
                out.append(TimerFired(node, tag))
        return out

    def finalize(self) -> None:
        """Fold in-flight messages into dropped (reason cutoff) at end of run."""
        while self._heap:
            item = heapq.heappop(self._heap)
            if item[2] == _DELIVER:
                self.stats.dropped += 1
                self.stats.dropped_cutoff += 1
        self._cancelled.clear()

"""Per-node harness: owns the ledger, the live protocol instance, the
condition monitor, the switch engine, and the node's fault state, and wires
them to the simulator.

Delivery pipeline: crash gate -> tag verification (failures feed the
monitor as evidence) -> monitor observation (evidence and condition data
are extracted from every valid message, stale eras included) -> dispatch.
Protocol traffic additionally passes the freeze gate and the era filter;
switch and monitoring traffic always flows.

Protocol timers are stamped with a generation number so a timer armed by a
replaced protocol instance can never fire into its successor.
"""

from __future__ import annotations

from .faults import FaultSpec, FaultState
from .ledger import Checkpoint, Command, CommittedLedger, LedgerEntry, ProtocolMode
from .hotstuff import HotstuffConfig, HotstuffNode
from .messages import (
    ClientForward, ConditionReport, Ping, Pong, SwitchAbort, SwitchCommit,
    SwitchPrepare, SwitchReply, SwitchSyncRequest, SyncSnapshot,
    sign_message, verify_message,
)
from .monitor import ConditionMonitor
from .raft import RaftConfig, RaftNode
from .simcore import Delivery, Simulator, TimerFired
from .switching import SwitchEngine, SwitchPolicy

PULSE_INTERVAL = 50
SYNC_REQUEST_GAP = 200


class NodeContext:
    """What protocols and the switch engine see of the outside world."""

    __slots__ = ("h", "gen")

    def __init__(self, harness: "NodeHarness", gen: int | None) -> None:
        self.h = harness
        self.gen = gen

    @property
    def now(self) -> int:
        return self.h.sim.now

    @property
    def rng(self):
        return self.h.sim.node_rng(self.h.node_id)

    def set_timer(self, delay: int, tag: tuple) -> int:
        if self.gen is not None:
            tag = ("p", self.gen) + tuple(tag)
        return self.h.sim.set_timer(self.h.node_id, self.h.sim.now + max(delay, 1), tag)

    def cancel_timer(self, timer_id: int) -> None:
        self.h.sim.cancel_timer(timer_id)

    def send(self, dst: int, msg) -> None:
        self.h.send(dst, msg)

    def commit(self, entry: LedgerEntry) -> None:
        self.h.commit_entry(entry)

    def is_committed(self, key: tuple[int, int]) -> bool:
        return key in self.h.committed_keys

    def forward_command(self, leader: int, cmd) -> None:
        if leader == self.h.node_id:
            self.h.submit(cmd)
        else:
            self.h.send(leader, ClientForward(cmd))

    def leader_elected(self, term: int) -> None:
        self.h.on_leader_elected(term)

    def view_outcome(self, view: int, success: bool) -> None:
        self.h.monitor.observe_view(success)

    def trace(self, kind: str, data: dict) -> None:
        self.h.emit_trace(kind, data)


class NodeHarness:
    def __init__(self, node_id: int, n: int, f: int, sim: Simulator,
                 initial_mode: ProtocolMode, policy: SwitchPolicy,
                 fault: FaultSpec | None = None,
                 raft_cfg: RaftConfig = RaftConfig(),
                 hs_cfg: HotstuffConfig = HotstuffConfig(),
                 probe_interval: int = 100, report_interval: int = 200,
                 alpha: float = 0.2) -> None:
        self.node_id = node_id
        self.n = n
        self.f = f
        self.sim = sim
        self.raft_cfg = raft_cfg
        self.hs_cfg = hs_cfg
        self.probe_interval = probe_interval
        self.report_interval = report_interval
        self.ledger = CommittedLedger()
        self.committed_keys: set[tuple[int, int]] = set()
        self.commits: list[tuple[int, LedgerEntry, bool]] = []  # (tick, entry, adopted)
        self.switch_history: list[dict] = []  # one record per era activation
        self.monitor = ConditionMonitor(node_id, n, alpha)
        self.engine = SwitchEngine(node_id, n, f, policy)
        self.fault = FaultState(fault, n)
        self.frozen = False
        self.freeze_tick: int | None = None
        self.mode = initial_mode
        self.leader_terms: list[tuple[int, int]] = []   # (era, term) wins
        self.activation_snapshots: dict[int, tuple[int, int]] = {
            0: (self.ledger.height, self.ledger.head_hash)}
        self.pending_client: list = []
        self.proto_gen = 0
        self.protocol = self._build_protocol(initial_mode, 0,
                                             Checkpoint(0, self.ledger.head_hash,
                                                        initial_mode))
        self.pctx = NodeContext(self, self.proto_gen)
        self.ectx = NodeContext(self, None)
        self._probe_idx = node_id % max(n - 1, 1)
        self._last_sync_req = -(10 ** 9)

    # ---- lifecycle

    def _build_protocol(self, mode: ProtocolMode, era: int, cp: Checkpoint):
        self.proto_gen += 1
        if mode is ProtocolMode.RAFT:
            return RaftNode(self.node_id, self.n, era, cp.height, self.raft_cfg)
        return HotstuffNode(self.node_id, self.n, self.f, era, cp.height,
                            cp.ledger_hash, mode is ProtocolMode.HOTSTUFF_CHAINED,
                            self.hs_cfg)

    def start(self) -> None:
        self.protocol.start(self.pctx)
        self.ectx.set_timer(self.probe_interval + self.node_id, ("mon.probe",))
        self.ectx.set_timer(self.report_interval + self.node_id, ("mon.report",))
        self.ectx.set_timer(self.engine.policy.decide_interval + 7 * self.node_id + 1,
                            ("switch.decide",))
        if self.fault.needs_pulse():
            self.ectx.set_timer(max(self.fault.spec.start, 1), ("fault.pulse",))
        revive = self.fault.revive_tick()
        if revive is not None:
            self.ectx.set_timer(revive, ("fault.revive",))

    def emit_trace(self, kind: str, data: dict) -> None:
        if self.sim.trace is not None:
            self.sim.trace.emit(self.sim.now, self.node_id, kind, data)

    # ---- freeze / activation

    def freeze(self) -> None:
        if self.frozen:
            return
        self.frozen = True
        self.freeze_tick = self.sim.now
        self.emit_trace("freeze", {"era": self.engine.era})

    def unfreeze(self, _ctx=None) -> None:
        if not self.frozen:
            return
        self.frozen = False
        self.freeze_tick = None
        self.protocol.resume(self.pctx)
        self.emit_trace("unfreeze", {"era": self.engine.era})
        self._flush_client()

    def activate_protocol(self, mode: ProtocolMode, cp: Checkpoint, era: int,
                          _ctx=None) -> None:
        self.mode = mode
        self.frozen = False
        self.freeze_tick = None
        self.activation_snapshots[era] = (self.ledger.height, self.ledger.head_hash)
        self.monitor.view_outcomes.clear()
        self.protocol = self._build_protocol(mode, era, cp)
        self.pctx = NodeContext(self, self.proto_gen)
        self.protocol.start(self.pctx)
        self._flush_client()

    def _flush_client(self) -> None:
        if not self.pending_client:
            return
        cmds, self.pending_client = self.pending_client, []
        for cmd in cmds:
            self.submit(cmd)

    # ---- ledger

    def commit_entry(self, entry: LedgerEntry) -> None:
        if self.frozen:
            raise RuntimeError(f"node {self.node_id} tried to commit while frozen")
        self.ledger.append(entry)
        self.committed_keys.add((entry.cmd.client, entry.cmd.seq))
        self.commits.append((self.sim.now, entry, False))

    def note_commit(self, entry: LedgerEntry, adopted: bool = False) -> None:
        """Bookkeeping for entries the switch engine appended directly."""
        self.committed_keys.add((entry.cmd.client, entry.cmd.seq))
        self.commits.append((self.sim.now, entry, adopted))

    def on_leader_elected(self, term: int) -> None:
        self.leader_terms.append((self.engine.era, term))
        self.emit_trace("leader_elected", {"era": self.engine.era, "term": term})

    # ---- client commands

    def submit(self, cmd) -> None:
        if self.fault.crashed(self.sim.now):
            return
        if (cmd.client, cmd.seq) in self.committed_keys:
            return
        if self.frozen:
            self.pending_client.append(cmd)
            return
        self.protocol.submit(cmd, self.pctx)

    # ---- outbound

    def send(self, dst: int, msg) -> None:
        now = self.sim.now
        if self.fault.crashed(now):
            return
        for d, m, delay in self.fault.transform_send(now, dst, msg, self.node_id):
            tick = now + delay if delay else None
            self.sim.schedule_message(self.node_id, d, m, m.kind, send_tick=tick)

    def _broadcast_raw(self, msg) -> None:
        """Send to every peer bypassing fault transforms (used for the fault
        module's own crafted emissions)."""
        for p in range(self.n):
            if p != self.node_id:
                self.sim.schedule_message(self.node_id, p, msg, msg.kind)

    # ---- inbound

    def on_delivery(self, ev: Delivery) -> None:
        now = self.sim.now
        if self.fault.crashed(now):
            return
        msg = ev.payload
        if not verify_message(msg, ev.src):
            tag = getattr(msg, "tag", None)
            self.monitor.note_invalid_tag(now, tag.signer if tag is not None else ev.src)
            return
        self.monitor.observe_message(now, ev.src, msg)
        if isinstance(msg, Ping):
            self.send(msg.sender, Pong(self.node_id, msg.sent_tick))
            return
        if isinstance(msg, Pong):
            rtt = now - msg.echo_tick
            self.monitor.observe_latency(rtt / 2.0)
            return
        if isinstance(msg, ConditionReport):
            if msg.era > self.engine.era and now - self._last_sync_req >= SYNC_REQUEST_GAP:
                self._last_sync_req = now
                self.send(msg.sender, self.engine.sync_request(self))
            return
        if isinstance(msg, ClientForward):
            self.submit(msg.cmd)
            return
        if isinstance(msg, SwitchPrepare):
            self.engine.handle_prepare(self, self.ectx, msg)
            return
        if isinstance(msg, SwitchReply):
            self.engine.handle_reply(self, self.ectx, msg)
            return
        if isinstance(msg, SwitchCommit):
            self.engine.handle_commit(self, self.ectx, ev.src, msg)
            return
        if isinstance(msg, SwitchAbort):
            self.engine.handle_abort(self, self.ectx, msg)
            return
        if isinstance(msg, SwitchSyncRequest):
            self.engine.handle_sync_request(self, self.ectx, msg)
            return
        if isinstance(msg, SyncSnapshot):
            self.engine.handle_snapshot(self, self.ectx, ev.src, msg)
            return
        # protocol traffic: freeze gate, then era filter
        if self.frozen:
            return
        if getattr(msg, "era", None) != self.engine.era:
            return
        self.protocol.on_message(ev.src, msg, self.pctx)

    # ---- timers

    def on_timer(self, ev: TimerFired) -> None:
        tag = ev.tag
        now = self.sim.now
        head = tag[0]
        if head == "p":
            if tag[1] != self.proto_gen:
                return  # armed by a replaced protocol instance
            if self.fault.crashed(now) or self.frozen:
                return
            self.protocol.on_timer(tuple(tag[2:]), self.pctx)
            return
        if head == "mon.probe":
            self.ectx.set_timer(self.probe_interval, ("mon.probe",))
            if not self.fault.crashed(now) and self.n > 1:
                peers = [p for p in range(self.n) if p != self.node_id]
                peer = peers[self._probe_idx % len(peers)]
                self._probe_idx += 1
                self.send(peer, Ping(self.node_id, now))
            return
        if head == "mon.report":
            self.ectx.set_timer(self.report_interval, ("mon.report",))
            if not self.fault.crashed(now):
                self.monitor.observe_bandwidth(float(self.sim.channel.cap_at(now)))
                rep = sign_message(self.monitor.make_report(self.engine.era, now),
                                   self.node_id)
                rep = self.fault.transform_report(now, rep)
                for p in range(self.n):
                    if p != self.node_id:
                        self.send(p, rep)
            return
        if head == "switch.decide":
            self.ectx.set_timer(self.engine.policy.decide_interval, ("switch.decide",))
            if not self.fault.crashed(now):
                self.engine.maybe_decide(self, self.ectx)
            return
        if head == "fault.pulse":
            self.ectx.set_timer(PULSE_INTERVAL, ("fault.pulse",))
            for msg in self.fault.pulse(now, self.engine.era, self.mode):
                self._broadcast_raw(msg)
            return
        if head == "fault.revive":
            if self.frozen:
                # a switch we were part of resolved (or timed out) while we
                # were down; drop the stale lock and rejoin
                self.engine.active = None
                self.engine.reply_lock = None
                self.unfreeze()
            else:
                self.protocol.resume(self.pctx)
            self.emit_trace("revive", {})
            return
        if head == "client.inject":
            _, client, seq, payload = tag
            self.submit(Command(client, seq, payload))
            return
        if head == "switch.manual":
            if not self.fault.crashed(now):
                self.engine.manual_request(ProtocolMode(tag[1]))
            return
        if head in ("switch.timeout", "switch.part_timeout", "switch.retx"):
            if self.fault.crashed(now):
                return
            self.engine.on_timer(self, self.ectx, tag)
            return

    # ---- introspection

    def node_state(self) -> dict:
        return {
            "node": self.node_id,
            "era": self.engine.era,
            "mode": self.mode.value,
            "height": self.ledger.height,
            "head_hash": f"{self.ledger.head_hash:016x}",
            "frozen": self.frozen,
            "refused": self.engine.refused,
            "suspected": sorted(self.monitor.suspected),
        }

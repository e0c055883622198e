"""Autonomous protocol switching.

`decide()` turns monitor aggregates into a switch decision
(CFT->BFT on the suspected-Byzantine ratio, BFT->CFT once an evidence-free
window meets degraded bandwidth or latency, BASIC<->CHAINED inside BFT on
view success), `detect_fraud()` gates decisions against manipulation
(rate locking and outlier suppression), and `SwitchEngine` runs the
four-step handover:

  1. SWITCH-PREPARE broadcast with the proposed checkpoint (the running
     protocol freezes),
  2. signed checkpoint-hash replies, carrying each replier's log tail so
     surviving suffixes can be promoted instead of lost,
  3. quorum of matching signed (height, hash) replies - majority for a Raft
     target, N-f for a HotStuff target,
  4. SWITCH-COMMIT carrying the reply quorum; nodes verify it and activate
     the target protocol at checkpoint height + 1.

Every protocol message carries an era (completed-switch count); stale-era
traffic is discarded, which keeps exactly one state machine live per node.
No node activates without a verified reply quorum over the exact checkpoint
statement, so no single node can switch the cluster alone.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

from .ledger import (
    Checkpoint, CommittedLedger, LedgerEntry, OriginProtocol, ProtocolMode,
    chain_hash,
)
from .messages import (
    InstanceId, PromotedEntry, SwitchAbort, SwitchCommit, SwitchPrepare,
    SwitchReply, SwitchSyncRequest, SyncSnapshot, reply_statement, sign_message,
)
from .monitor import ConditionMonitor
from .raft import majority

BYZ_RATIO = "BYZ_RATIO"
LATENCY = "LATENCY"
BANDWIDTH = "BANDWIDTH"
MANUAL = "MANUAL"

ALLOW = "ALLOW"
SUPPRESS = "SUPPRESS"
LOCK_BFT = "LOCK_BFT"

COMPLETED = "completed"
ABORTED = "aborted"
SUPPRESSED = "suppressed"


@dataclass
class SwitchPolicy:
    enabled: bool = True
    detector: bool = True
    byz_ratio_up: float = 0.0              # 0.0 -> 1/(3N) at load time
    byz_clear_window: int = 1500
    evidence_horizon: int = 0              # 0 -> byz_clear_window
    latency_req: float = 60.0
    bandwidth_min: float = 2.0
    cooldown: int = 500
    max_switch_rate: int = 3
    rate_window: int = 3000
    z_thresh: float = 3.5
    switch_timeout: int = 300
    decide_interval: int = 100
    report_staleness: int = 500
    chained_up: float = 0.8
    chained_down: float = 0.5
    min_view_samples: int = 8
    commit_retx_delay: int = 20

    def resolved(self, n: int) -> "SwitchPolicy":
        p = replace(self)
        if p.byz_ratio_up == 0.0:
            p.byz_ratio_up = 1.0 / (3 * n)
        if p.evidence_horizon == 0:
            p.evidence_horizon = p.byz_clear_window
        return p

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 < self.byz_ratio_up <= 1.0 / 3.0 and self.byz_ratio_up != 0.0:
            errs.append(f"byz_ratio_up {self.byz_ratio_up} outside (0, 1/3]")
        if self.cooldown <= 0:
            errs.append("cooldown must be positive")
        if self.max_switch_rate < 1:
            errs.append("max_switch_rate must be >= 1")
        if self.switch_timeout < 1 or self.rate_window < 1:
            errs.append("switch_timeout and rate_window must be >= 1")
        if not 0.0 <= self.chained_down <= self.chained_up <= 1.0:
            errs.append("need 0 <= chained_down <= chained_up <= 1")
        return errs


@dataclass
class SwitchDecision:
    target: ProtocolMode
    trigger: str
    decided_tick: int
    initiator: int
    checkpoint: Checkpoint | None = None
    note: str = ""


@dataclass
class SwitchLogEntry:
    decision: SwitchDecision
    outcome: str
    completed_tick: int | None = None

    def as_dict(self) -> dict:
        cp = self.decision.checkpoint
        return {
            "target": self.decision.target.value,
            "trigger": self.decision.trigger,
            "decided_tick": self.decision.decided_tick,
            "initiator": self.decision.initiator,
            "outcome": self.outcome,
            "completed_tick": self.completed_tick,
            "cp_height": cp.height if cp else None,
            "cp_hash": cp.ledger_hash if cp else None,
            "note": self.decision.note,
        }


def _mean(vals: dict[int, float]) -> float:
    return sum(vals.values()) / len(vals)


def decide(policy: SwitchPolicy, monitor: ConditionMonitor, mode: ProtocolMode,
           now: int) -> tuple[ProtocolMode, str] | None:
    """Pure decision rule; cooldown and fraud gating happen in the engine."""
    if mode is ProtocolMode.RAFT:
        if monitor.recent_suspect_ratio(now, policy.evidence_horizon) >= policy.byz_ratio_up:
            return (ProtocolMode.HOTSTUFF_BASIC, BYZ_RATIO)
        return None
    if monitor.evidence_free_for(now) >= policy.byz_clear_window:
        bw = _mean(monitor.report_values(now, policy.report_staleness, "bandwidth"))
        lat = _mean(monitor.report_values(now, policy.report_staleness, "latency"))
        if bw < policy.bandwidth_min:
            return (ProtocolMode.RAFT, BANDWIDTH)
        if lat > policy.latency_req:
            return (ProtocolMode.RAFT, LATENCY)
    if len(monitor.view_outcomes) >= policy.min_view_samples:
        rate = _mean(monitor.report_values(now, policy.report_staleness, "success"))
        if mode is ProtocolMode.HOTSTUFF_BASIC and rate >= policy.chained_up:
            return (ProtocolMode.HOTSTUFF_CHAINED, LATENCY)
        if mode is ProtocolMode.HOTSTUFF_CHAINED and rate < policy.chained_down:
            return (ProtocolMode.HOTSTUFF_BASIC, LATENCY)
    return None


def detect_fraud(policy: SwitchPolicy, monitor: ConditionMonitor, n: int,
                 attempt_ticks: list[int], completed_ticks: list[int],
                 trigger: str, now: int) -> tuple[str, list[int]]:
    """Gate a pending decision.  Returns (verdict, outlier reporters)."""
    window_start = now - policy.rate_window
    completed_recent = sum(1 for t in completed_ticks if t > window_start)
    if completed_recent >= policy.max_switch_rate:
        return (LOCK_BFT, [])
    attempts_recent = sum(1 for t in attempt_ticks if t > window_start)
    if attempts_recent + 1 > policy.max_switch_rate:
        return (LOCK_BFT, [])
    if trigger in (LATENCY, BANDWIDTH):
        fname = "latency" if trigger == LATENCY else "bandwidth"
        vals = monitor.report_values(now, policy.report_staleness, fname)
        if len(vals) >= 3:
            med = statistics.median(vals.values())
            mad = statistics.median(abs(v - med) for v in vals.values())
            scaled = max(mad, 1.0)  # one-tick granularity floor
            limit = policy.z_thresh * scaled / 0.6745
            outliers = sorted(node for node, v in vals.items() if abs(v - med) > limit)
            if outliers and len(outliers) * 2 < len(vals):
                return (SUPPRESS, outliers)
    return (ALLOW, [])


# ------------------------------------------------------------ promotion

def promote_raft(base: int, replies: list[SwitchReply]) -> list[PromotedEntry]:
    """Adopt the most up-to-date log tail (last term, then last index).
    Any committed entry is present in the winner by the same quorum
    intersection that protects Raft elections; divergent minority suffixes
    are discarded."""
    best = None
    best_key = None
    for r in sorted(replies, key=lambda r: r.replier):
        t = r.raft_tail
        if t is None:
            continue
        key = (t.last_term, t.last_index)
        if best_key is None or key > best_key:
            best, best_key = t, key
    if best is None:
        return []
    out = []
    expect = base + 1
    for height, term, cmd in best.rows:
        if height < expect:
            continue
        if height != expect:
            break  # gap; stop promoting
        out.append(PromotedEntry(LedgerEntry(height, cmd, OriginProtocol.RAFT, term)))
        expect += 1
    return out


def promote_hotstuff(base: int, base_block_hash: int, replies: list[SwitchReply],
                     n: int, f: int, genesis_hash: int) -> list[PromotedEntry]:
    """Adopt the parent-linked chain with the highest-view tip certificate.
    The tip QC anchors every ancestor through the block hash chain, and a
    certified chain conflicting with a committed block cannot exist above
    the lock, so the highest-view tip is always an extension of anything
    committed."""
    candidates = []
    for r in sorted(replies, key=lambda r: r.replier):
        t = r.hs_tail
        if t is None:
            continue
        entries = list(t.committed)
        if t.locked_chain and t.locked_qc is not None:
            for i, blk in enumerate(t.locked_chain):
                cert = t.locked_qc if i == len(t.locked_chain) - 1 else None
                entries.append(PromotedEntry(
                    LedgerEntry(blk.height, blk.cmd, OriginProtocol.HOTSTUFF, blk.view),
                    cert, blk))
        if not entries:
            continue
        tip = entries[-1]
        tip_view = tip.qc.view if tip.qc is not None else 0
        candidates.append((tip_view, r.replier, entries))
    for tip_view, _, entries in sorted(candidates, key=lambda c: (-c[0], c[1])):
        if _verify_hs_chain(base, base_block_hash, entries, n, f, genesis_hash):
            return entries
    return []


def _verify_hs_chain(base: int, base_block_hash: int, entries: list[PromotedEntry],
                     n: int, f: int, genesis_hash: int) -> bool:
    expect = base + 1
    parent = base_block_hash
    tip_cert = None
    for pe in entries:
        if pe.entry.height != expect:
            return False
        blk = pe.block
        if blk is None:
            return False
        if blk.height != expect or blk.parent_hash != parent or blk.cmd != pe.entry.cmd:
            return False
        if pe.qc is not None:
            if pe.qc.block_hash != blk.hash or not pe.qc.verify(n, f, genesis_hash):
                return False
            tip_cert = pe.qc
        parent = blk.hash
        expect += 1
    # the chain is only as good as a certificate over its tip region
    return tip_cert is not None and tip_cert.block_hash == entries[-1].block.hash


def payload_hash(base_hash: int, payload: tuple[PromotedEntry, ...]) -> int:
    h = base_hash
    for pe in payload:
        h = chain_hash(h, pe.entry)
    return h


# -------------------------------------------------------------- engine

@dataclass
class _ActiveInstance:
    instance: InstanceId
    target: ProtocolMode
    trigger: str
    note: str
    attempt: int = 1
    cp_height: int = 0
    cp_hash: int = 0
    payload: tuple[PromotedEntry, ...] = ()
    payload_base: int = 0
    replies: dict[int, SwitchReply] = field(default_factory=dict)
    timer: int | None = None


class SwitchEngine:
    """One per node; drives and follows handovers.  The harness owns the
    ledger and protocol instance and exposes them through ``h``."""

    def __init__(self, node_id: int, n: int, f: int, policy: SwitchPolicy) -> None:
        self.node_id = node_id
        self.n = n
        self.f = f
        self.policy = policy
        self.era = 0
        self.active: _ActiveInstance | None = None
        self.reply_lock: tuple[InstanceId, int] | None = None  # (instance, expiry)
        self.lock_timer: int | None = None
        self.bft_locked_until = -1
        self.last_attempt_tick = -(10 ** 9)
        self.attempt_ticks: list[int] = []
        self.completed_ticks: list[int] = []
        self.log: list[SwitchLogEntry] = []
        self.last_commits: dict[int, SwitchCommit] = {}
        self.manual_queue: list[ProtocolMode] = []
        self.refused = False

    def quorum_for(self, target: ProtocolMode) -> int:
        return majority(self.n) if target is ProtocolMode.RAFT else self.n - self.f

    # ---- decision cadence

    def manual_request(self, target: ProtocolMode) -> None:
        self.manual_queue.append(target)

    def maybe_decide(self, h, ctx) -> None:
        if not self.policy.enabled or self.refused or self.active is not None or h.frozen:
            return
        now = ctx.now
        since = now - max(self.last_attempt_tick,
                          self.completed_ticks[-1] if self.completed_ticks else -(10 ** 9))
        if since < self.policy.cooldown:
            return
        note = ""
        draft = None
        while self.manual_queue:
            target = self.manual_queue[0]
            if target is h.mode:
                # already on the requested protocol; drop the stale request
                self.manual_queue.pop(0)
                continue
            if target is ProtocolMode.RAFT and now < self.bft_locked_until:
                # the operator wants CFT but the detector pinned BFT; hold
                # the request and retry once the lock expires
                return
            self.manual_queue.pop(0)
            draft = (target, MANUAL)
            break
        if draft is None:
            draft = decide(self.policy, h.monitor, h.mode, now)
            if draft is None:
                return
        target, trigger = draft
        if target is ProtocolMode.RAFT and now < self.bft_locked_until:
            self._log(SwitchDecision(target, trigger, now, self.node_id, note="bft_locked"),
                      SUPPRESSED)
            return
        if self.policy.detector:
            verdict, outliers = detect_fraud(self.policy, h.monitor, self.n,
                                             self.attempt_ticks, self.completed_ticks,
                                             trigger, now)
            if verdict == SUPPRESS:
                for node in outliers:
                    h.monitor.suspect_reporter(now, node, "outlier condition report")
                self._log(SwitchDecision(target, trigger, now, self.node_id,
                                         note="outliers:" + ",".join(map(str, outliers))),
                          SUPPRESSED)
                return
            if verdict == LOCK_BFT:
                self.bft_locked_until = now + self.policy.rate_window
                if not target.is_bft:
                    self._log(SwitchDecision(target, trigger, now, self.node_id,
                                             note="rate_lock"), SUPPRESSED)
                    if trigger == MANUAL:
                        self.manual_queue.insert(0, target)
                    if h.mode is ProtocolMode.RAFT:
                        # pin to the safe protocol
                        self._initiate(h, ctx, ProtocolMode.HOTSTUFF_BASIC,
                                       BYZ_RATIO, "detector_lock")
                    return
                # a BFT-bound switch is the pin itself; let it through
        self._initiate(h, ctx, target, trigger, note)

    def _log(self, decision: SwitchDecision, outcome: str,
             completed: int | None = None) -> None:
        self.log.append(SwitchLogEntry(decision, outcome, completed))

    # ---- initiator

    def _initiate(self, h, ctx, target: ProtocolMode, trigger: str, note: str) -> None:
        now = ctx.now
        self.last_attempt_tick = now
        self.attempt_ticks.append(now)
        inst = InstanceId(self.node_id, now)
        act = _ActiveInstance(inst, target, trigger, note,
                              cp_height=h.ledger.height, cp_hash=h.ledger.head_hash)
        self.active = act
        h.freeze()
        self.reply_lock = (inst, now + 2 * self.policy.switch_timeout)
        act.replies[self.node_id] = self._build_reply(h, inst, 1, target.value,
                                                      act.cp_height, ())
        act.timer = ctx.set_timer(self.policy.switch_timeout, ("switch.timeout", inst.key()))
        msg = sign_message(SwitchPrepare(self.era, inst, 1, target.value, trigger,
                                         act.cp_height, act.cp_hash, (), act.cp_height),
                           self.node_id)
        for p in range(self.n):
            if p != self.node_id:
                ctx.send(p, msg)
        ctx.trace("switch_prepare", {"target": target.value, "trigger": trigger,
                                     "cp_height": act.cp_height, "attempt": 1})

    def _build_reply(self, h, inst: InstanceId, attempt: int, target: str,
                     base: int, payload: tuple[PromotedEntry, ...]) -> SwitchReply:
        ledger: CommittedLedger = h.ledger
        if payload and base > ledger.height:
            cert_h, cert_hash = self._virtual_hash(h, base, payload)
        elif base <= ledger.height:
            cert_h, cert_hash = base, ledger.hash_at(base)
        else:
            cert_h, cert_hash = ledger.height, ledger.head_hash
        raft_tail = None
        hs_tail = None
        proto = h.protocol
        if h.mode is ProtocolMode.RAFT:
            raft_tail = proto.tail_info(min(base, ledger.height))
        else:
            hs_tail = proto.tail_info(min(base, ledger.height), ledger)
        rep = SwitchReply(self.era, inst, attempt, self.node_id, target,
                          cert_h, cert_hash, ledger.height, raft_tail, hs_tail)
        return sign_message(rep, self.node_id)

    def _virtual_hash(self, h, base: int, payload: tuple[PromotedEntry, ...]) -> tuple[int, int]:
        """Certify a checkpoint above our committed height by chaining the
        payload entries we verified onto our own prefix."""
        ledger: CommittedLedger = h.ledger
        rolling = None
        height = None
        for pe in payload:
            if pe.entry.height <= ledger.height:
                continue
            if rolling is None:
                if pe.entry.height != ledger.height + 1:
                    return (ledger.height, ledger.head_hash)
                rolling = ledger.head_hash
                height = ledger.height
            rolling = chain_hash(rolling, pe.entry)
            height = pe.entry.height
        if rolling is None or height < base:
            return (ledger.height, ledger.head_hash)
        return (height, rolling)

    def handle_reply(self, h, ctx, msg: SwitchReply) -> None:
        act = self.active
        if act is None or msg.instance != act.instance or msg.attempt != act.attempt:
            return
        act.replies[msg.replier] = msg
        quorum = self.quorum_for(act.target)
        matching = [r for r in act.replies.values()
                    if r.attempt == act.attempt
                    and r.cp_height == act.cp_height and r.cp_hash == act.cp_hash]
        if len(matching) >= quorum:
            if act.attempt == 1:
                payload = self._compute_promotion(h, act)
                if payload:
                    # replicated-but-uncommitted suffix found; finalize it
                    # under the switch instead of discarding it
                    self._second_attempt(h, ctx, act, payload)
                    return
            self._commit(h, ctx, act, matching)
            return
        if act.attempt == 1 and len(act.replies) >= quorum:
            # a reply quorum exists but their committed heights straggle
            # (normal: followers trail the leader's commit index); promote
            # the best reported tail and re-prepare on it
            payload = self._compute_promotion(h, act)
            if payload:
                self._second_attempt(h, ctx, act, payload)

    def _compute_promotion(self, h, act: _ActiveInstance) -> tuple[PromotedEntry, ...]:
        replies = list(act.replies.values())
        if h.mode is ProtocolMode.RAFT:
            promoted = promote_raft(act.cp_height, replies)
        else:
            proto = h.protocol
            base_blk = proto.chain_hashes.get(act.cp_height)
            if base_blk is None:
                return ()
            promoted = promote_hotstuff(act.cp_height, base_blk, replies,
                                        self.n, self.f, proto.genesis_hash)
        return tuple(promoted)

    def _second_attempt(self, h, ctx, act: _ActiveInstance,
                        payload: tuple[PromotedEntry, ...]) -> None:
        base = act.cp_height
        # repliers may have committed less than we have (followers trail a
        # Raft leader's commit index by a heartbeat); anchor the payload at
        # the lowest reported height and bridge with our own committed rows
        # so every replier can chain it onto its prefix
        floor = min(r.committed_height for r in act.replies.values())
        floor = min(floor, base)
        if floor < base:
            if h.mode is ProtocolMode.RAFT:
                bridge = tuple(PromotedEntry(h.ledger.entry_at(x))
                               for x in range(floor + 1, base + 1))
            else:
                tail = h.protocol.tail_info(floor, h.ledger)
                bridge = tuple(pe for pe in tail.committed
                               if pe.entry.height <= base)
            payload = bridge + payload
        act.payload = payload
        act.payload_base = floor
        act.cp_height = payload[-1].entry.height
        act.cp_hash = payload_hash(h.ledger.hash_at(floor), payload)
        act.attempt = 2
        act.replies = {self.node_id: self._build_reply(h, act.instance, 2,
                                                       act.target.value,
                                                       act.cp_height, payload)}
        if act.timer is not None:
            ctx.cancel_timer(act.timer)
        act.timer = ctx.set_timer(self.policy.switch_timeout,
                                  ("switch.timeout", act.instance.key()))
        msg = sign_message(SwitchPrepare(self.era, act.instance, 2, act.target.value,
                                         act.trigger, act.cp_height, act.cp_hash,
                                         payload, floor), self.node_id)
        for p in range(self.n):
            if p != self.node_id:
                ctx.send(p, msg)
        ctx.trace("switch_prepare", {"target": act.target.value, "trigger": act.trigger,
                                     "cp_height": act.cp_height, "attempt": 2})

    def _commit(self, h, ctx, act: _ActiveInstance, matching: list[SwitchReply]) -> None:
        chosen = sorted(matching, key=lambda r: r.replier)[: self.quorum_for(act.target)]
        tags = tuple(r.tag for r in chosen)
        new_leader = act.cp_height % self.n if act.target.is_bft else -1
        commit = sign_message(
            SwitchCommit(self.era, act.instance, act.attempt, act.target.value,
                         act.trigger, act.cp_height, act.cp_hash, tags,
                         act.payload, act.payload_base, new_leader),
            self.node_id)
        for p in range(self.n):
            if p != self.node_id:
                ctx.send(p, commit)
        ctx.set_timer(self.policy.commit_retx_delay, ("switch.retx", act.instance.key()))
        if act.timer is not None:
            ctx.cancel_timer(act.timer)
        decision = SwitchDecision(act.target, act.trigger, act.instance.decided_tick,
                                  self.node_id,
                                  Checkpoint(act.cp_height, act.cp_hash, act.target),
                                  act.note)
        self._log(decision, COMPLETED, ctx.now)
        self.active = None
        self._apply_commit(h, ctx, self.node_id, commit)

    # ---- participant

    def handle_prepare(self, h, ctx, msg: SwitchPrepare) -> None:
        now = ctx.now
        if msg.era < self.era:
            # the initiator missed a switch; its cp_height is its ledger height
            self._send_snapshot(h, ctx, msg.instance.initiator, msg.era, msg.cp_height)
            return
        if msg.era > self.era:
            ctx.send(msg.instance.initiator, self.sync_request(h))
            return
        if self.refused:
            return
        inst = msg.instance
        if self.active is not None:
            if self.active.instance == inst:
                return
            if self.active.instance.key() <= inst.key():
                return  # our instance outranks; theirs will abort or lose
            self._abort_own(h, ctx, "superseded")
        if self.reply_lock is not None and self.reply_lock[0] != inst:
            held, expiry = self.reply_lock
            # an initiator replacing its own aborted instance rolls its lock
            # forward; the abort and the fresh prepare may arrive either way
            # around, so do not make the new attempt wait out the old lock
            rollover = (held.initiator == inst.initiator
                        and inst.decided_tick > held.decided_tick)
            if now < expiry and not rollover:
                return
            self.reply_lock = None
        if self.policy.detector and msg.attempt == 1:
            verdict, _ = detect_fraud(self.policy, h.monitor, self.n,
                                      self.attempt_ticks, self.completed_ticks,
                                      msg.trigger, now)
            if verdict != ALLOW:
                target = ProtocolMode(msg.target)
                if verdict == LOCK_BFT:
                    self.bft_locked_until = now + self.policy.rate_window
                if verdict == LOCK_BFT and target is not ProtocolMode.RAFT:
                    pass  # moving toward BFT is always allowed under a lock
                else:
                    return
        if msg.attempt > 1 and msg.payload:
            if not self._payload_ok(h, msg.payload, msg.payload_base):
                return
        if msg.attempt == 1:
            self.attempt_ticks.append(now)
        if self.reply_lock is None or self.reply_lock[0] != inst:
            self.reply_lock = (inst, now + 2 * self.policy.switch_timeout)
            ctx.set_timer(2 * self.policy.switch_timeout,
                          ("switch.part_timeout", inst.key()))
        if not h.frozen:
            h.freeze()
        rep = self._build_reply(h, inst, msg.attempt, msg.target,
                                msg.cp_height, msg.payload)
        ctx.send(inst.initiator, rep)

    def _payload_ok(self, h, payload: tuple[PromotedEntry, ...], base: int) -> bool:
        ledger: CommittedLedger = h.ledger
        expect = base + 1
        for pe in payload:
            if pe.entry.height != expect:
                return False
            if pe.entry.height <= ledger.height:
                if ledger.entry_at(pe.entry.height) != pe.entry:
                    return False
            expect += 1
        overlap_done = all(pe.entry.height <= ledger.height for pe in payload)
        if overlap_done:
            return True
        if payload[0].entry.origin_protocol is OriginProtocol.HOTSTUFF:
            proto = h.protocol
            base_blk = proto.chain_hashes.get(base) if hasattr(proto, "chain_hashes") else None
            if base_blk is None:
                return False
            return _verify_hs_chain(base, base_blk, list(payload),
                                    self.n, self.f, proto.genesis_hash)
        # Raft-origin tails ride on the crash-fault trust model
        return True

    def _abort_own(self, h, ctx, note: str) -> None:
        act = self.active
        if act is None:
            return
        if act.timer is not None:
            ctx.cancel_timer(act.timer)
        decision = SwitchDecision(act.target, act.trigger, act.instance.decided_tick,
                                  self.node_id, None, note)
        self._log(decision, ABORTED)
        abort = sign_message(SwitchAbort(self.era, act.instance), self.node_id)
        for p in range(self.n):
            if p != self.node_id:
                ctx.send(p, abort)
        self.active = None
        if act.trigger == MANUAL:
            # an operator request stays pending until it lands (or the mode
            # already matches when it next comes up)
            self.manual_queue.insert(0, act.target)

    def handle_abort(self, h, ctx, msg: SwitchAbort) -> None:
        if msg.era != self.era:
            return
        if self.reply_lock is not None and self.reply_lock[0] == msg.instance:
            self.reply_lock = None
            if h.frozen and (self.active is None):
                h.unfreeze(ctx)

    def handle_commit(self, h, ctx, src: int, msg: SwitchCommit) -> None:
        if msg.era < self.era:
            return
        if msg.era > self.era:
            ctx.send(src, self.sync_request(h))
            return
        if self.refused:
            return
        if not self._verify_commit(msg):
            return
        self._apply_commit(h, ctx, src, msg)

    def _verify_commit(self, msg: SwitchCommit) -> bool:
        signers = set()
        for tag in msg.quorum:
            stmt = reply_statement(msg.era, msg.instance, msg.attempt, tag.signer,
                                   msg.cp_height, msg.cp_hash, msg.target)
            if tag.verify(stmt):
                signers.add(tag.signer)
        return len(signers) >= self.quorum_for(ProtocolMode(msg.target))

    def sync_request(self, h) -> SwitchSyncRequest:
        return sign_message(SwitchSyncRequest(self.era, self.node_id, h.ledger.height),
                            self.node_id)

    def _send_snapshot(self, h, ctx, dst: int, era: int, from_height: int) -> None:
        stored = self.last_commits.get(era)
        if stored is None:
            return
        ledger: CommittedLedger = h.ledger
        lo = min(from_height, stored.cp_height)
        entries = tuple(ledger.entry_at(hh) for hh in range(lo + 1, stored.cp_height + 1))
        snap = sign_message(SyncSnapshot(self.node_id, stored, entries), self.node_id)
        ctx.send(dst, snap)

    def handle_sync_request(self, h, ctx, msg: SwitchSyncRequest) -> None:
        self._send_snapshot(h, ctx, msg.requester, msg.era, msg.height)

    def handle_snapshot(self, h, ctx, src: int, msg: SyncSnapshot) -> None:
        commit = msg.commit
        if commit.era != self.era or self.refused:
            return
        if not self._verify_commit(commit):
            return
        ledger: CommittedLedger = h.ledger
        if ledger.height > commit.cp_height:
            return  # we are past this checkpoint already
        rolling = ledger.head_hash
        expect = ledger.height + 1
        fresh = []
        for e in msg.entries:
            if e.height < expect:
                continue
            if e.height != expect:
                return  # gapped backfill; useless
            rolling = chain_hash(rolling, e)
            fresh.append(e)
            expect += 1
        if expect != commit.cp_height + 1 or rolling != commit.cp_hash:
            return  # does not land on the certified checkpoint
        for e in fresh:
            ledger.append(e)
            h.note_commit(e, adopted=True)
        self._apply_commit(h, ctx, src, commit)

    def _apply_commit(self, h, ctx, src: int, msg: SwitchCommit) -> None:
        ledger: CommittedLedger = h.ledger
        if ledger.height > msg.cp_height:
            self.refused = True
            ctx.trace("switch_refused", {"cp_height": msg.cp_height,
                                         "committed": ledger.height})
            return
        anchor = msg.payload[0].entry.height - 1 if msg.payload else msg.cp_height
        if ledger.height < min(anchor, msg.cp_height):
            # missed commits in the ending era; fetch a verified backfill
            if src != self.node_id:
                ctx.send(src, self.sync_request(h))
            return
        for pe in msg.payload:
            if pe.entry.height <= ledger.height:
                if ledger.entry_at(pe.entry.height) != pe.entry:
                    self.refused = True
                    ctx.trace("switch_refused", {"reason": "payload_conflict",
                                                 "height": pe.entry.height})
                    return
                continue
            ledger.append(pe.entry)
            h.note_commit(pe.entry, adopted=True)
        if ledger.height != msg.cp_height or ledger.head_hash != msg.cp_hash:
            self.refused = True
            ctx.trace("switch_refused", {"reason": "hash_mismatch",
                                         "cp_height": msg.cp_height})
            return
        if self.active is not None and self.active.instance != msg.instance:
            self._abort_own(h, ctx, "superseded")
        if self.active is not None and self.active.timer is not None:
            ctx.cancel_timer(self.active.timer)
        self.active = None
        self.last_commits[self.era] = msg
        self.completed_ticks.append(ctx.now)
        self.reply_lock = None
        self.era += 1
        cp = Checkpoint(msg.cp_height, msg.cp_hash, ProtocolMode(msg.target))
        h.switch_history.append({
            "era": self.era, "tick": ctx.now, "target": msg.target,
            "trigger": msg.trigger, "cp_height": msg.cp_height,
            "attempt": msg.attempt,
            "initiator": msg.instance.initiator,
            "decided_tick": msg.instance.decided_tick,
        })
        ctx.trace("switch_activate", {"era": self.era, "target": msg.target,
                                      "cp_height": msg.cp_height,
                                      "trigger": msg.trigger})
        h.activate_protocol(ProtocolMode(msg.target), cp, self.era, ctx)

    # ---- timers

    def on_timer(self, h, ctx, tag: tuple) -> None:
        kind = tag[0]
        if kind == "switch.timeout":
            act = self.active
            if act is not None and act.instance.key() == tag[1]:
                self._abort_own(h, ctx, "timeout")
                if self.reply_lock is not None and self.reply_lock[0].key() == tag[1]:
                    self.reply_lock = None
                if h.frozen:
                    h.unfreeze(ctx)
        elif kind == "switch.part_timeout":
            if (self.reply_lock is not None and self.reply_lock[0].key() == tag[1]
                    and h.frozen and self.active is None):
                self.reply_lock = None
                h.unfreeze(ctx)
        elif kind == "switch.retx":
            for era, commit in self.last_commits.items():
                if commit.instance.key() == tag[1]:
                    for p in range(self.n):
                        if p != self.node_id:
                            ctx.send(p, commit)
                    break

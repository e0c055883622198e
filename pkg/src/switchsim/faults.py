"""Fault injection.

Four fault kinds, at most one per node:

  crash            stops processing entirely; an end tick revives the node
                   with volatile state intact (protocol timers re-arm).
  byz_silent       suppresses the node's outgoing votes; produces no
                   provable evidence, so it never drives a switch.
  byz_equivocate   sends conflicting proposals / log entries to the two
                   halves of the cluster and twin votes to leaders, and
                   broadcasts one provable signed vote contradiction when
                   it activates (without that, a stable Raft leader era
                   carries no vote traffic to equivocate on).
  byz_fraud_switch tries to force protocol churn: inflates its condition
                   reports, delays its traffic in duty-cycle bursts, and
                   frames itself with a vote contradiction whenever the
                   cluster is back on Raft, pulling it to HotStuff again.

Byzantine transforms only ever re-sign as the faulty node itself; keys are
never shared, so forging another node's tag stays impossible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .ledger import ProtocolMode
from .messages import (
    AppendEntries, Block, ConditionReport, PhaseVote, Proposal, VoteReply,
    sign_message,
)

CRASH = "crash"
BYZ_EQUIVOCATE = "byz_equivocate"
BYZ_SILENT = "byz_silent"
BYZ_FRAUD_SWITCH = "byz_fraud_switch"

FAULT_KINDS = (CRASH, BYZ_EQUIVOCATE, BYZ_SILENT, BYZ_FRAUD_SWITCH)
BYZ_KINDS = (BYZ_EQUIVOCATE, BYZ_SILENT, BYZ_FRAUD_SWITCH)

_VOTE_KINDS = ("raft.vote_rep", "hs.vote")

# byz_fraud_switch knobs (overridable per fault via params)
_FRAUD_DEFAULTS = {
    "report_latency": 600.0,   # claimed one-way latency, ms
    "report_bandwidth": 0.0,   # claimed spare bandwidth, msgs/tick
    "burst_period": 200,
    "burst_on": 100,           # duty cycle 0.5
    "burst_delay": 40,
}


@dataclass(frozen=True)
class FaultSpec:
    node: int
    kind: str
    start: int
    end: int | None = None     # exclusive; None = permanent
    params: dict = field(default_factory=dict)

    def validate(self, n: int) -> list[str]:
        errs = []
        if not 0 <= self.node < n:
            errs.append(f"fault node {self.node} outside cluster of {n}")
        if self.kind not in FAULT_KINDS:
            errs.append(f"unknown fault kind {self.kind!r}")
        if self.start < 0:
            errs.append("fault start must be >= 0")
        if self.end is not None and self.end <= self.start:
            errs.append("fault end must be after start")
        return errs


@dataclass
class FaultPlan:
    specs: list[FaultSpec] = field(default_factory=list)

    def validate(self, n: int) -> list[str]:
        errs = []
        seen = set()
        for spec in self.specs:
            errs.extend(spec.validate(n))
            if spec.node in seen:
                errs.append(f"node {spec.node} has more than one fault")
            seen.add(spec.node)
        return errs

    def for_node(self, node: int) -> FaultSpec | None:
        for spec in self.specs:
            if spec.node == node:
                return spec
        return None

    def byz_nodes(self) -> list[int]:
        return sorted(s.node for s in self.specs if s.kind in BYZ_KINDS)

    def crash_nodes(self) -> list[int]:
        return sorted(s.node for s in self.specs if s.kind == CRASH)


def _twin_command(cmd):
    return replace(cmd, payload=cmd.payload + b"\x01")


def _twin_message(msg, signer: int, n: int):
    """A conflicting variant of an equivocable message, re-signed as the
    faulty node.  Returns None for kinds with nothing to equivocate on."""
    if isinstance(msg, AppendEntries):
        if not msg.entries:
            return None
        twin = replace(msg, entries=tuple((t, _twin_command(c)) for t, c in msg.entries))
        return sign_message(twin, signer)
    if isinstance(msg, Proposal):
        b = msg.block
        twin_block = Block(b.era, b.height, b.parent_hash, _twin_command(b.cmd),
                           b.proposer, b.view)
        return sign_message(replace(msg, block=twin_block), signer)
    if isinstance(msg, PhaseVote):
        return sign_message(replace(msg, block_hash=msg.block_hash ^ 0x1), signer)
    if isinstance(msg, VoteReply) and msg.granted:
        twin = replace(msg, candidate=(msg.candidate + 1) % n)
        return sign_message(twin, signer)
    return None


def frame_pair(node: int, era: int) -> tuple[VoteReply, VoteReply]:
    """Two signed vote grants for the same (era, term, voter) slot naming
    different candidates: compact, locally checkable equivocation proof.
    Term 1 keeps the pair stale for the actual Raft state machine."""
    a = sign_message(VoteReply(era, 1, node, (node + 1) % 2, True), node)
    b = sign_message(VoteReply(era, 1, node, (node + 1) % 2 + 1, True), node)
    return a, b


class FaultState:
    """Per-node runtime view of its fault spec (if any)."""

    def __init__(self, spec: FaultSpec | None, n: int) -> None:
        self.spec = spec
        self.n = n
        self.framed_eras: set[int] = set()
        self.activation_done = False
        if spec is not None and spec.kind == BYZ_FRAUD_SWITCH:
            self.knobs = dict(_FRAUD_DEFAULTS)
            self.knobs.update(spec.params)
        else:
            self.knobs = {}

    def active(self, now: int) -> bool:
        s = self.spec
        if s is None or now < s.start:
            return False
        return s.end is None or now < s.end

    def crashed(self, now: int) -> bool:
        return self.spec is not None and self.spec.kind == CRASH and self.active(now)

    def is_byz(self, now: int) -> bool:
        return (self.spec is not None and self.spec.kind in BYZ_KINDS
                and self.active(now))

    def revive_tick(self) -> int | None:
        s = self.spec
        if s is not None and s.kind == CRASH and s.end is not None:
            return s.end
        return None

    def needs_pulse(self) -> bool:
        return (self.spec is not None
                and self.spec.kind in (BYZ_EQUIVOCATE, BYZ_FRAUD_SWITCH))

    # ---- outbound transforms

    def transform_send(self, now: int, dst: int, msg, signer: int) -> list[tuple[int, object, int]]:
        """Map one outbound (dst, msg) to a list of (dst, msg, extra_delay).
        Honest behaviour is the identity."""
        if not self.is_byz(now):
            return [(dst, msg, 0)]
        kind = self.spec.kind
        if kind == BYZ_SILENT:
            if getattr(msg, "kind", "") in _VOTE_KINDS:
                return []
            return [(dst, msg, 0)]
        if kind == BYZ_EQUIVOCATE:
            if getattr(msg, "kind", "") in ("raft.append", "hs.proposal"):
                # disjoint halves: odd destinations get the twin
                if dst % 2 == 1:
                    twin = _twin_message(msg, signer, self.n)
                    if twin is not None:
                        return [(dst, twin, 0)]
                return [(dst, msg, 0)]
            if getattr(msg, "kind", "") in _VOTE_KINDS:
                out = [(dst, msg, 0)]
                twin = _twin_message(msg, signer, self.n)
                if twin is not None:
                    out.append((dst, twin, 0))
                return out
            return [(dst, msg, 0)]
        if kind == BYZ_FRAUD_SWITCH:
            period = int(self.knobs["burst_period"])
            on = int(self.knobs["burst_on"])
            phase = (now - self.spec.start) % max(period, 1)
            delay = int(self.knobs["burst_delay"]) if phase < on else 0
            return [(dst, msg, delay)]
        return [(dst, msg, 0)]

    def transform_report(self, now: int, rep: ConditionReport) -> ConditionReport:
        if not self.is_byz(now) or self.spec.kind != BYZ_FRAUD_SWITCH:
            return rep
        forged = replace(rep,
                         latency_ewma=float(self.knobs["report_latency"]),
                         bandwidth_avail=float(self.knobs["report_bandwidth"]),
                         tag=None)
        return sign_message(forged, rep.sender)

    # ---- scheduled emissions

    def pulse(self, now: int, era: int, mode: ProtocolMode) -> list[VoteReply]:
        """Called periodically by the harness; returns messages to broadcast."""
        if not self.is_byz(now):
            return []
        kind = self.spec.kind
        if kind == BYZ_EQUIVOCATE and not self.activation_done:
            self.activation_done = True
            return list(frame_pair(self.spec.node, era))
        if kind == BYZ_FRAUD_SWITCH and mode is ProtocolMode.RAFT \
                and era not in self.framed_eras:
            self.framed_eras.add(era)
            return list(frame_pair(self.spec.node, era))
        return []

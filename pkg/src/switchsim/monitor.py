"""Per-node condition monitoring feeding the switch controller.

Latency comes from round-trip probes to rotating peers (sample = RTT/2,
folded into an EWMA).  Byzantine suspicion is evidence-based only: a node
joins the suspected set when the monitor holds a verifiable contradiction
(two conflicting signed messages in the same slot) or a message whose tag
fails verification.  The suspected set never shrinks; the switch policy's
ratio trigger looks at evidence inside a recency horizon so a cluster that
switched away from BFT is not bounced straight back by stale history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ledger import encode_command
from .messages import (
    AppendEntries, ConditionReport, PhaseBroadcast, PhaseVote, Proposal,
    QuorumCertificate, VoteReply, vote_payload,
)


@dataclass(frozen=True)
class EvidenceRecord:
    node: int
    kind: str          # "equivocation" | "invalid_tag"
    tick: int
    slot: tuple
    detail: str


@dataclass
class PeerReport:
    tick: int
    latency_ewma: float
    bandwidth_avail: float
    view_success_rate: float


class ConditionMonitor:
    def __init__(self, node_id: int, n: int, alpha: float = 0.2,
                 view_window: int = 16) -> None:
        self.node_id = node_id
        self.n = n
        self.alpha = alpha
        self.latency_ewma: float | None = None
        self.bandwidth_avail: float = 0.0
        self.suspected: dict[int, int] = {}      # node -> first evidence tick
        self.last_evidence: dict[int, int] = {}  # node -> latest evidence tick
        self.evidence: list[EvidenceRecord] = []
        self.reports: dict[int, PeerReport] = {}
        self.view_window = view_window
        self.view_outcomes: list[bool] = []
        # first-seen registries backing equivocation detection
        self._slots: dict[tuple, object] = {}

    # ---- local observations

    def observe_latency(self, sample: float) -> None:
        if self.latency_ewma is None:
            self.latency_ewma = float(sample)
        else:
            self.latency_ewma = (1.0 - self.alpha) * self.latency_ewma + self.alpha * sample

    def observe_bandwidth(self, cap: float) -> None:
        self.bandwidth_avail = float(cap)

    def observe_view(self, success: bool) -> None:
        self.view_outcomes.append(success)
        if len(self.view_outcomes) > self.view_window:
            self.view_outcomes.pop(0)

    @property
    def view_success_rate(self) -> float:
        if not self.view_outcomes:
            return 1.0
        return sum(self.view_outcomes) / len(self.view_outcomes)

    # ---- evidence

    def _suspect(self, now: int, node: int, kind: str, slot: tuple, detail: str) -> None:
        if node == self.node_id:
            return
        self.suspected.setdefault(node, now)
        self.last_evidence[node] = now
        self.evidence.append(EvidenceRecord(node, kind, now, slot, detail))

    def note_invalid_tag(self, now: int, claimed: int) -> None:
        self._suspect(now, claimed, "invalid_tag", ("tag", claimed), "tag verification failed")

    def suspect_reporter(self, now: int, node: int, why: str) -> None:
        """Flag a reporter whose condition values were ruled fraudulent."""
        self._suspect(now, node, "fraud_report", ("fraud", node), why)

    def _check_slot(self, now: int, node: int, slot: tuple, value, detail: str) -> None:
        seen = self._slots.get(slot)
        if seen is None:
            self._slots[slot] = value
        elif seen != value:
            self._suspect(now, node, "equivocation", slot, detail)

    def observe_message(self, now: int, src: int, msg) -> None:
        """Fold one delivered (tag-verified) message into the evidence
        registries.  QCs are mined for the votes they embed."""
        if isinstance(msg, VoteReply):
            if msg.granted:
                self._check_slot(now, msg.voter,
                                 ("raft.vote", msg.era, msg.term, msg.voter),
                                 msg.candidate, "conflicting vote grants in one term")
        elif isinstance(msg, AppendEntries):
            # a leader's own log is append-only within its term, so the entry
            # it replicates at a given index must never change (the suffix
            # length legitimately varies between sends)
            for k, (eterm, cmd) in enumerate(msg.entries):
                idx = msg.prev_log_index + 1 + k
                self._check_slot(now, msg.leader,
                                 ("raft.append", msg.era, msg.term, idx, msg.leader),
                                 (eterm, encode_command(cmd)),
                                 "conflicting replication at one log position")
        elif isinstance(msg, PhaseVote):
            self._check_slot(now, msg.voter,
                             ("hs.vote", msg.era, msg.view, msg.phase, msg.voter),
                             msg.block_hash, "conflicting votes in one view")
        elif isinstance(msg, Proposal):
            self._check_slot(now, msg.block.proposer,
                             ("hs.prop", msg.era, msg.view, msg.block.proposer),
                             msg.block.hash, "conflicting proposals in one view")
            self._fold_qc(now, msg.justify)
        elif isinstance(msg, PhaseBroadcast):
            self._fold_qc(now, msg.qc)
        elif isinstance(msg, ConditionReport):
            self.reports[msg.sender] = PeerReport(msg.tick, msg.latency_ewma,
                                                  msg.bandwidth_avail, msg.view_success_rate)

    def _fold_qc(self, now: int, qc: QuorumCertificate) -> None:
        if not qc.votes:
            return
        payload = vote_payload(qc.era, qc.phase, qc.view, qc.block_hash)
        for tag in qc.votes:
            if tag.verify(payload):
                self._check_slot(now, tag.signer,
                                 ("hs.vote", qc.era, qc.view, qc.phase, tag.signer),
                                 qc.block_hash, "QC vote contradicts a seen vote")

    # ---- aggregates for the controller

    def recent_suspect_ratio(self, now: int, horizon: int) -> float:
        recent = sum(1 for t in self.last_evidence.values() if t >= now - horizon)
        return recent / self.n

    def evidence_free_for(self, now: int) -> int:
        """Ticks since the newest evidence (a large number when none)."""
        if not self.last_evidence:
            return now + 1
        return now - max(self.last_evidence.values())

    def report_values(self, now: int, staleness: int, field_name: str) -> dict[int, float]:
        """Latest per-reporter values for one signal, self included."""
        vals: dict[int, float] = {}
        own = {
            "latency": self.latency_ewma if self.latency_ewma is not None else 0.0,
            "bandwidth": self.bandwidth_avail,
            "success": self.view_success_rate,
        }[field_name]
        vals[self.node_id] = float(own)
        attr = {"latency": "latency_ewma", "bandwidth": "bandwidth_avail",
                "success": "view_success_rate"}[field_name]
        for peer in sorted(self.reports):
            rep = self.reports[peer]
            if rep.tick >= now - staleness:
                vals[peer] = float(getattr(rep, attr))
        return vals

    def make_report(self, era: int, now: int) -> ConditionReport:
        return ConditionReport(
            era, self.node_id, now,
            self.latency_ewma if self.latency_ewma is not None else 0.0,
            self.bandwidth_avail, self.view_success_rate)

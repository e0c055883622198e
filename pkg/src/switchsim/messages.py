"""Wire formats for protocol, switch, and monitoring traffic.

Every signed message exposes ``signing_bytes()`` (canonical little-endian)
and carries the signer's AuthTag; the harness verifies tags once at
delivery.  Message ``kind`` strings drive the per-kind statistics and the
trace, and group as:

    raft.*     Raft protocol traffic
    hs.*       HotStuff protocol traffic (basic and chained)
    switch.*   protocol-switch handover traffic
    mon.*      monitoring plane (pings, condition reports)
    client.*   client command forwarding

The complexity accounting in reports counts raft.* and hs.* only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .ledger import AuthTag, Command, LedgerEntry, encode_command, encode_entry


def _pack_ints(*vals: int) -> bytes:
    return struct.pack(f"<{len(vals)}q", *vals)


# ---------------------------------------------------------------- Raft

@dataclass(frozen=True)
class VoteRequest:
    kind = "raft.vote_req"
    era: int
    term: int
    candidate: int
    last_log_index: int
    last_log_term: int
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"vreq" + _pack_ints(self.era, self.term, self.candidate,
                                    self.last_log_index, self.last_log_term)

    def trace_meta(self) -> dict:
        return {"term": self.term}


@dataclass(frozen=True)
class VoteReply:
    kind = "raft.vote_rep"
    era: int
    term: int
    voter: int
    candidate: int
    granted: bool
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"vrep" + _pack_ints(self.era, self.term, self.voter,
                                    self.candidate, int(self.granted))

    def trace_meta(self) -> dict:
        return {"term": self.term, "granted": self.granted}


@dataclass(frozen=True)
class AppendEntries:
    kind = "raft.append"
    era: int
    term: int
    leader: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple[tuple[int, Command], ...]  # (term, cmd) pairs
    leader_commit: int
    tag: AuthTag = None

    def entries_digest_bytes(self) -> bytes:
        parts = [b"ents"]
        for term, cmd in self.entries:
            parts.append(struct.pack("<q", term) + encode_command(cmd))
        return b"".join(parts)

    def signing_bytes(self) -> bytes:
        return (b"appe" + _pack_ints(self.era, self.term, self.leader,
                                     self.prev_log_index, self.prev_log_term,
                                     self.leader_commit)
                + self.entries_digest_bytes())

    def trace_meta(self) -> dict:
        return {"term": self.term, "n_entries": len(self.entries)}


@dataclass(frozen=True)
class AppendReply:
    kind = "raft.append_rep"
    era: int
    term: int
    follower: int
    success: bool
    match_index: int
    hint_index: int
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"arep" + _pack_ints(self.era, self.term, self.follower,
                                    int(self.success), self.match_index, self.hint_index)

    def trace_meta(self) -> dict:
        return {"term": self.term, "success": self.success}


# ------------------------------------------------------------ HotStuff

PREPARE = "PREPARE"
PRECOMMIT = "PRECOMMIT"
COMMIT = "COMMIT"
DECIDE = "DECIDE"
GENERIC = "GENERIC"

_PHASE_CODE = {PREPARE: 1, PRECOMMIT: 2, COMMIT: 3, DECIDE: 4, GENERIC: 5}


@dataclass(frozen=True)
class Block:
    era: int
    height: int
    parent_hash: int
    cmd: Command
    proposer: int
    view: int
    hash: int = field(default=0)

    def __post_init__(self):
        from .ledger import digest64
        digest = digest64(
            b"blk" + _pack_ints(self.era, self.height, self.proposer, self.view)
            + struct.pack("<Q", self.parent_hash) + encode_command(self.cmd)
        )
        object.__setattr__(self, "hash", digest)


def era_genesis_hash(era: int, cp_height: int, cp_hash: int) -> int:
    from .ledger import digest64
    return digest64(b"era-genesis" + _pack_ints(era, cp_height) + struct.pack("<Q", cp_hash))


def vote_payload(era: int, phase: str, view: int, block_hash: int) -> bytes:
    return b"vote" + _pack_ints(era, _PHASE_CODE[phase], view) + struct.pack("<Q", block_hash)


@dataclass(frozen=True)
class QuorumCertificate:
    era: int
    phase: str
    view: int
    block_hash: int
    votes: tuple[AuthTag, ...]

    def verify(self, n: int, f: int, genesis_hash: int) -> bool:
        if self.view == 0 and self.block_hash == genesis_hash and not self.votes:
            return True  # era genesis certificate, valid by convention
        payload = vote_payload(self.era, self.phase, self.view, self.block_hash)
        voters = set()
        for tag in self.votes:
            if tag.verify(payload):
                voters.add(tag.signer)
        return len(voters) >= n - f


def genesis_qc(era: int, genesis_hash: int) -> QuorumCertificate:
    return QuorumCertificate(era, PREPARE, 0, genesis_hash, ())


@dataclass(frozen=True)
class NewView:
    kind = "hs.new_view"
    era: int
    view: int
    sender: int
    high_qc: QuorumCertificate
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"nvew" + _pack_ints(self.era, self.view, self.sender) + struct.pack("<Q", self.high_qc.block_hash)

    def trace_meta(self) -> dict:
        return {"view": self.view}


@dataclass(frozen=True)
class Proposal:
    """PREPARE broadcast (basic) or the generic per-view proposal (chained)."""

    kind = "hs.proposal"
    era: int
    view: int
    phase: str
    block: Block
    justify: QuorumCertificate
    justify_block: Block | None
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return (b"prop" + _pack_ints(self.era, _PHASE_CODE[self.phase], self.view)
                + struct.pack("<QQ", self.block.hash, self.justify.block_hash))

    def trace_meta(self) -> dict:
        return {"view": self.view, "phase": self.phase}


@dataclass(frozen=True)
class PhaseBroadcast:
    """Basic-mode PRECOMMIT / COMMIT / DECIDE carrying the QC of the
    previous phase; the block rides along so late replicas can execute."""

    kind = "hs.phase"
    era: int
    view: int
    phase: str
    qc: QuorumCertificate
    block: Block
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return (b"phse" + _pack_ints(self.era, _PHASE_CODE[self.phase], self.view)
                + struct.pack("<Q", self.qc.block_hash))

    def trace_meta(self) -> dict:
        return {"view": self.view, "phase": self.phase}


@dataclass(frozen=True)
class PhaseVote:
    kind = "hs.vote"
    era: int
    view: int
    phase: str
    block_hash: int
    voter: int
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return vote_payload(self.era, self.phase, self.view, self.block_hash)

    def trace_meta(self) -> dict:
        return {"view": self.view, "phase": self.phase}


# ------------------------------------------------------------- switch

@dataclass(frozen=True)
class InstanceId:
    initiator: int
    decided_tick: int

    def key(self) -> tuple:
        return (self.decided_tick, self.initiator)


@dataclass(frozen=True)
class PromotedEntry:
    """Ledger entry carried in a handover payload.  HotStuff-origin entries
    ride with the block and a certificate over it so receivers can verify;
    Raft-origin entries are covered by the crash-fault trust model."""

    entry: LedgerEntry
    qc: QuorumCertificate | None = None
    block: Block | None = None


def switch_statement(era: int, instance: InstanceId, attempt: int, cp_height: int,
                     cp_hash: int, target: str) -> bytes:
    return (b"swst" + _pack_ints(era, instance.initiator, instance.decided_tick,
                                 attempt, cp_height)
            + struct.pack("<Q", cp_hash) + target.encode())


@dataclass(frozen=True)
class SwitchPrepare:
    kind = "switch.prepare"
    era: int
    instance: InstanceId
    attempt: int
    target: str          # ProtocolMode value
    trigger: str
    cp_height: int
    cp_hash: int
    payload: tuple[PromotedEntry, ...]  # catch-up entries above the matched base
    payload_base: int                   # height the payload starts after
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return switch_statement(self.era, self.instance, self.attempt,
                                self.cp_height, self.cp_hash, self.target)

    def trace_meta(self) -> dict:
        return {"target": self.target, "attempt": self.attempt, "cp_height": self.cp_height}


@dataclass(frozen=True)
class RaftTailInfo:
    """Replier's log tail above the proposed base: (index, term, cmd) rows
    plus its last (term, index) for the up-to-date comparison."""

    rows: tuple[tuple[int, int, Command], ...]
    last_term: int
    last_index: int


@dataclass(frozen=True)
class HsTailInfo:
    committed: tuple[PromotedEntry, ...]       # entries above base, with commit QCs
    locked_chain: tuple[Block, ...]            # blocks from base+1 up to the locked block
    locked_qc: QuorumCertificate | None        # PRECOMMIT QC over the last chain block


def reply_statement(era: int, instance: InstanceId, attempt: int, replier: int,
                    cp_height: int, cp_hash: int, target: str) -> bytes:
    """The statement a switch reply signs.  Covering the target protocol
    stops an initiator from reusing one attempt's reply quorum to commit a
    different protocol (whose quorum size may be smaller)."""
    return (b"swrp" + _pack_ints(era, instance.initiator, instance.decided_tick,
                                 attempt, replier, cp_height)
            + struct.pack("<Q", cp_hash) + target.encode())


@dataclass(frozen=True)
class SwitchReply:
    kind = "switch.reply"
    era: int
    instance: InstanceId
    attempt: int
    replier: int
    target: str               # echoed from the prepare, part of the statement
    cp_height: int            # height this reply certifies (== prepare's if able)
    cp_hash: int
    committed_height: int
    raft_tail: RaftTailInfo | None
    hs_tail: HsTailInfo | None
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        # the signed statement is the certified (height, hash) for this
        # instance/attempt/target; reconciliation data rides unsigned alongside
        return reply_statement(self.era, self.instance, self.attempt,
                               self.replier, self.cp_height, self.cp_hash,
                               self.target)

    def trace_meta(self) -> dict:
        return {"cp_height": self.cp_height, "attempt": self.attempt}


@dataclass(frozen=True)
class SwitchCommit:
    kind = "switch.commit"
    era: int
    instance: InstanceId
    attempt: int
    target: str
    trigger: str
    cp_height: int
    cp_hash: int
    quorum: tuple[AuthTag, ...]   # tags over switch_statement(...)
    payload: tuple[PromotedEntry, ...]
    payload_base: int
    new_leader: int               # HotStuff rotation anchor; -1 for Raft
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"swcm" + switch_statement(self.era, self.instance, self.attempt,
                                          self.cp_height, self.cp_hash, self.target)

    def trace_meta(self) -> dict:
        return {"target": self.target, "cp_height": self.cp_height}


@dataclass(frozen=True)
class SwitchAbort:
    kind = "switch.abort"
    era: int
    instance: InstanceId
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"swab" + _pack_ints(self.era, self.instance.initiator, self.instance.decided_tick)

    def trace_meta(self) -> dict:
        return {}


@dataclass(frozen=True)
class SwitchSyncRequest:
    kind = "switch.sync_req"
    era: int          # requester's era; peer answers with the commit that ended it
    requester: int
    height: int       # requester's committed height, so the answer can backfill
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"swsy" + _pack_ints(self.era, self.requester, self.height)

    def trace_meta(self) -> dict:
        return {}


@dataclass(frozen=True)
class SyncSnapshot:
    """Catch-up answer for a node that missed a switch (crashed through it
    or partitioned).  Trust comes from the inner commit's reply quorum plus
    the hash chain: the receiver appends ``entries`` virtually and accepts
    only if the rolling hash lands on the commit's certified cp_hash, so
    even a Byzantine sender cannot feed a forged suffix."""

    kind = "switch.sync"
    sender: int
    commit: SwitchCommit
    entries: tuple[LedgerEntry, ...]   # requester's height + 1 .. commit.cp_height
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return b"swsn" + _pack_ints(self.sender) + self.commit.signing_bytes()

    def trace_meta(self) -> dict:
        return {"era": self.commit.era, "cp_height": self.commit.cp_height}


# ---------------------------------------------------------- monitoring

@dataclass(frozen=True)
class Ping:
    kind = "mon.ping"
    sender: int
    sent_tick: int

    def trace_meta(self) -> dict:
        return {}


@dataclass(frozen=True)
class Pong:
    kind = "mon.pong"
    sender: int
    echo_tick: int

    def trace_meta(self) -> dict:
        return {}


@dataclass(frozen=True)
class ConditionReport:
    kind = "mon.report"
    era: int
    sender: int
    tick: int
    latency_ewma: float
    bandwidth_avail: float
    view_success_rate: float
    tag: AuthTag = None

    def signing_bytes(self) -> bytes:
        return (b"cond" + _pack_ints(self.era, self.sender, self.tick)
                + struct.pack("<ddd", self.latency_ewma, self.bandwidth_avail,
                              self.view_success_rate))

    def trace_meta(self) -> dict:
        return {}


@dataclass(frozen=True)
class ClientForward:
    kind = "client.fwd"
    cmd: Command

    def trace_meta(self) -> dict:
        return {}


SIGNED_SENDER_FIELD = {
    VoteRequest: "candidate",
    VoteReply: "voter",
    AppendEntries: "leader",
    AppendReply: "follower",
    NewView: "sender",
    Proposal: None,        # signer == block.proposer
    PhaseBroadcast: None,  # signer == envelope src, checked as view leader
    PhaseVote: "voter",
    SwitchPrepare: None,   # signer == instance.initiator
    SwitchReply: "replier",
    SwitchCommit: None,    # signer == instance.initiator
    SwitchAbort: None,
    SwitchSyncRequest: "requester",
    SyncSnapshot: "sender",
    ConditionReport: "sender",
}


def signed_sender(msg, envelope_src: int) -> int:
    fld = SIGNED_SENDER_FIELD.get(type(msg))
    if fld is None:
        if isinstance(msg, Proposal):
            return msg.block.proposer
        if isinstance(msg, (SwitchPrepare, SwitchCommit, SwitchAbort)):
            return msg.instance.initiator
        return envelope_src
    return getattr(msg, fld)


def sign_message(msg, signer: int):
    """Return a copy of ``msg`` with its AuthTag filled in."""
    from dataclasses import replace
    return replace(msg, tag=AuthTag.sign(signer, msg.signing_bytes()))


def verify_message(msg, envelope_src: int) -> bool:
    tag = getattr(msg, "tag", None)
    if tag is None:
        return not hasattr(msg, "signing_bytes")  # unsigned kinds pass
    expected = signed_sender(msg, envelope_src)
    return tag.signer == expected and tag.verify(msg.signing_bytes())

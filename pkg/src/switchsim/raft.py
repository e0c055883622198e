"""Raft consensus over the simulated channel.

Replication is heartbeat-paced: the leader batches pending entries into the
AppendEntries round it sends every ``heartbeat_interval`` ticks (N-1 sends
per round, one per peer).  Commit advances when a strict majority of the
full cluster, leader included, holds an entry of the current term.

Raft tolerates crashes and message loss only; Byzantine behavior can break
its agreement, which is exactly the condition the switch controller reacts
to.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, auto

from .ledger import Command, LedgerEntry, OriginProtocol
from .messages import AppendEntries, AppendReply, VoteRequest, VoteReply, sign_message


class Role(Enum):
    FOLLOWER = auto()
    CANDIDATE = auto()
    LEADER = auto()


@dataclass(frozen=True)
class RaftConfig:
    election_timeout_min: int = 150
    election_timeout_max: int = 300
    heartbeat_interval: int = 50


def majority(n: int) -> int:
    return n // 2 + 1


ELECTION = ("raft.election",)
HEARTBEAT = ("raft.heartbeat",)


class RaftNode:
    def __init__(self, node_id: int, n: int, era: int, base_height: int,
                 cfg: RaftConfig = RaftConfig()) -> None:
        self.node_id = node_id
        self.n = n
        self.era = era
        self.base_height = base_height
        self.cfg = cfg
        self.peers = [p for p in range(n) if p != node_id]
        self.role = Role.FOLLOWER
        self.current_term = 0
        self.voted_for: int | None = None
        self.leader_id: int | None = None
        self.log: list[tuple[int, Command]] = []  # 1-based via helpers
        self.log_cmds: set[tuple[int, int]] = set()
        self.commit_index = 0
        self.votes: set[int] = set()
        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.pending_fwd: list[Command] = []
        self._election_timer: int | None = None
        self._heartbeat_timer: int | None = None

    # ---- log helpers (1-based indices; index i lives at ledger height base+i)

    @property
    def last_index(self) -> int:
        return len(self.log)

    def term_at(self, index: int) -> int:
        return 0 if index == 0 else self.log[index - 1][0]

    # ---- lifecycle

    def start(self, ctx) -> None:
        self._arm_election(ctx)

    def resume(self, ctx) -> None:
        """Re-arm timers after a crash revival or an aborted switch."""
        self._election_timer = None
        self._heartbeat_timer = None
        if self.role is Role.LEADER:
            self._heartbeat_timer = ctx.set_timer(self.cfg.heartbeat_interval, HEARTBEAT)
        else:
            self._arm_election(ctx)

    def _arm_election(self, ctx) -> None:
        if self._election_timer is not None:
            ctx.cancel_timer(self._election_timer)
        delay = ctx.rng.randint(self.cfg.election_timeout_min, self.cfg.election_timeout_max)
        self._election_timer = ctx.set_timer(delay, ELECTION)

    # ---- timers

    def on_timer(self, tag: tuple, ctx) -> None:
        if tag == ELECTION:
            if self.role is Role.LEADER:
                return  # the leader heartbeats itself; stale timer
            self.on_election_timeout(ctx)
        elif tag == HEARTBEAT:
            if self.role is not Role.LEADER:
                return
            self._send_round(ctx)
            self._heartbeat_timer = ctx.set_timer(self.cfg.heartbeat_interval, HEARTBEAT)

    def on_election_timeout(self, ctx) -> None:
        self.current_term += 1
        self.role = Role.CANDIDATE
        self.voted_for = self.node_id
        self.leader_id = None
        self.votes = {self.node_id}
        req = VoteRequest(self.era, self.current_term, self.node_id,
                          self.last_index, self.term_at(self.last_index))
        msg = sign_message(req, self.node_id)
        for p in self.peers:
            ctx.send(p, msg)
        self._arm_election(ctx)
        if len(self.votes) >= majority(self.n):  # single-node cluster
            self._become_leader(ctx)

    # ---- message handling

    def on_message(self, src: int, msg, ctx) -> None:
        if isinstance(msg, VoteRequest):
            self._handle_vote_request(msg, ctx)
        elif isinstance(msg, VoteReply):
            self._handle_vote_reply(msg, ctx)
        elif isinstance(msg, AppendEntries):
            self._handle_append(msg, ctx)
        elif isinstance(msg, AppendReply):
            self._handle_append_reply(msg, ctx)

    def _become_follower(self, term: int, leader: int | None, ctx) -> None:
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        was_leader = self.role is Role.LEADER
        self.role = Role.FOLLOWER
        self.votes = set()
        if leader is not None:
            self.leader_id = leader
        if was_leader and self._heartbeat_timer is not None:
            ctx.cancel_timer(self._heartbeat_timer)
            self._heartbeat_timer = None
        self._arm_election(ctx)
        if leader is not None:
            self._flush_forwards(ctx)

    def _handle_vote_request(self, m: VoteRequest, ctx) -> None:
        if m.term > self.current_term:
            self._become_follower(m.term, None, ctx)
        granted = False
        if m.term == self.current_term and self.role is not Role.LEADER:
            if self.voted_for in (None, m.candidate):
                mine = (self.term_at(self.last_index), self.last_index)
                if (m.last_log_term, m.last_log_index) >= mine:
                    granted = True
                    self.voted_for = m.candidate
                    self._arm_election(ctx)
        rep = VoteReply(self.era, self.current_term, self.node_id, m.candidate, granted)
        ctx.send(m.candidate, sign_message(rep, self.node_id))

    def _handle_vote_reply(self, m: VoteReply, ctx) -> None:
        if m.term > self.current_term:
            self._become_follower(m.term, None, ctx)
            return
        if (self.role is Role.CANDIDATE and m.term == self.current_term
                and m.granted and m.candidate == self.node_id):
            self.votes.add(m.voter)
            if len(self.votes) >= majority(self.n):
                self._become_leader(ctx)

    def _become_leader(self, ctx) -> None:
        self.role = Role.LEADER
        self.leader_id = self.node_id
        self.next_index = {p: self.last_index + 1 for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        if self._election_timer is not None:
            ctx.cancel_timer(self._election_timer)
            self._election_timer = None
        ctx.leader_elected(self.current_term)
        self._flush_forwards(ctx)
        self._send_round(ctx)
        self._heartbeat_timer = ctx.set_timer(self.cfg.heartbeat_interval, HEARTBEAT)

    def _send_round(self, ctx) -> None:
        """One heartbeat round: exactly one AppendEntries per peer."""
        for p in self.peers:
            prev = self.next_index[p] - 1
            ents = tuple(self.log[prev:])
            m = AppendEntries(self.era, self.current_term, self.node_id,
                              prev, self.term_at(prev), ents, self.commit_index)
            ctx.send(p, sign_message(m, self.node_id))

    def _handle_append(self, m: AppendEntries, ctx) -> None:
        if m.term < self.current_term:
            rep = AppendReply(self.era, self.current_term, self.node_id, False, 0,
                              self.last_index + 1)
            ctx.send(m.leader, sign_message(rep, self.node_id))
            return
        self._become_follower(m.term, m.leader, ctx)
        if m.prev_log_index > self.last_index or (
                m.prev_log_index >= 1 and self.term_at(m.prev_log_index) != m.prev_log_term):
            hint = min(self.last_index + 1, m.prev_log_index)
            rep = AppendReply(self.era, self.current_term, self.node_id, False, 0, max(1, hint))
            ctx.send(m.leader, sign_message(rep, self.node_id))
            return
        for k, (t, cmd) in enumerate(m.entries):
            idx = m.prev_log_index + 1 + k
            if idx <= self.last_index:
                if self.term_at(idx) != t:
                    # conflicting suffix: truncate, then take the leader's row
                    for (_, old) in self.log[idx - 1:]:
                        self.log_cmds.discard((old.client, old.seq))
                    del self.log[idx - 1:]
                    self.log.append((t, cmd))
                    self.log_cmds.add((cmd.client, cmd.seq))
            else:
                self.log.append((t, cmd))
                self.log_cmds.add((cmd.client, cmd.seq))
        last_new = m.prev_log_index + len(m.entries)
        if m.leader_commit > self.commit_index:
            self._commit_through(min(m.leader_commit, max(last_new, self.commit_index)), ctx)
        rep = AppendReply(self.era, self.current_term, self.node_id, True, last_new, 0)
        ctx.send(m.leader, sign_message(rep, self.node_id))

    def _handle_append_reply(self, m: AppendReply, ctx) -> None:
        if m.term > self.current_term:
            self._become_follower(m.term, None, ctx)
            return
        if self.role is not Role.LEADER or m.term != self.current_term:
            return
        p = m.follower
        if m.success:
            if m.match_index > self.match_index.get(p, 0):
                self.match_index[p] = m.match_index
                self.next_index[p] = m.match_index + 1
            self._advance_commit(ctx)
        else:
            self.next_index[p] = max(1, min(self.next_index[p] - 1, m.hint_index))

    def _advance_commit(self, ctx) -> None:
        """Largest h replicated on a strict majority (leader included) with
        log[h].term == current term."""
        for h in range(self.last_index, self.commit_index, -1):
            if self.term_at(h) != self.current_term:
                break  # only current-term entries advance commit directly
            acks = 1 + sum(1 for p in self.peers if self.match_index.get(p, 0) >= h)
            if acks >= majority(self.n):
                self._commit_through(h, ctx)
                return

    def _commit_through(self, h: int, ctx) -> None:
        for idx in range(self.commit_index + 1, h + 1):
            term, cmd = self.log[idx - 1]
            ctx.commit(LedgerEntry(self.base_height + idx, cmd, OriginProtocol.RAFT, term))
        self.commit_index = max(self.commit_index, h)

    # ---- client commands

    def submit(self, cmd: Command, ctx) -> None:
        key = (cmd.client, cmd.seq)
        if ctx.is_committed(key) or key in self.log_cmds:
            return
        if self.role is Role.LEADER:
            self.log.append((self.current_term, cmd))
            self.log_cmds.add(key)
        elif self.leader_id is not None and self.leader_id != self.node_id:
            ctx.forward_command(self.leader_id, cmd)
        else:
            self.pending_fwd.append(cmd)

    def _flush_forwards(self, ctx) -> None:
        if not self.pending_fwd:
            return
        cmds, self.pending_fwd = self.pending_fwd, []
        for cmd in cmds:
            self.submit(cmd, ctx)

    # ---- handover support

    def tail_info(self, base: int):
        """Log rows above ledger height ``base`` plus the up-to-date key."""
        from .messages import RaftTailInfo
        start = max(0, base - self.base_height)
        rows = tuple((self.base_height + i + 1, self.log[i][0], self.log[i][1])
                     for i in range(start, self.last_index))
        return RaftTailInfo(rows, self.term_at(self.last_index),
                            self.base_height + self.last_index)

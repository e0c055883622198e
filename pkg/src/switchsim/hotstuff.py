"""HotStuff consensus, basic (3 voting phases) and chained (pipelined).

Quorum certificates need N-f distinct verifying voters and the leader's own
vote counts.  Leadership rotates round-robin anchored at the era checkpoint
height: leader(v) = (checkpoint_height + v - 1) mod N.

Basic mode walks PREPARE / PRECOMMIT / COMMIT / DECIDE inside one view: a
block commits after 8 message delays (new-view, proposal, vote, x3).
Chained mode runs one generic phase per view; each proposal embeds the QC
of the previous view, votes flow to the next leader, and a block commits
once three consecutive-view blocks chain on top of it.

Safety rule for voting: the block extends the locked branch, or the
proposal's justify QC is from a higher view than the lock.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ledger import Command, LedgerEntry, OriginProtocol
from .messages import (
    COMMIT, DECIDE, GENERIC, PRECOMMIT, PREPARE,
    Block, NewView, PhaseBroadcast, PhaseVote, Proposal, QuorumCertificate,
    era_genesis_hash, genesis_qc, sign_message,
)


@dataclass(frozen=True)
class HotstuffConfig:
    view_timeout: int = 400
    backoff_cap: int = 8           # multiplier ceiling on the view timeout
    decide_retransmit_delay: int = 20


NOOP_CLIENT = -1


def noop_command(era: int, view: int) -> Command:
    return Command(NOOP_CLIENT, (era << 32) | view, b"")


class HotstuffNode:
    def __init__(self, node_id: int, n: int, f: int, era: int, base_height: int,
                 base_hash: int, chained: bool, cfg: HotstuffConfig = HotstuffConfig()) -> None:
        if n < 3 * f + 1:
            raise ValueError(f"n={n} cannot tolerate f={f} Byzantine nodes (need n >= 3f+1)")
        self.node_id = node_id
        self.n = n
        self.f = f
        self.era = era
        self.base_height = base_height
        self.chained = chained
        self.cfg = cfg
        self.peers = [p for p in range(n) if p != node_id]
        self.genesis_hash = era_genesis_hash(era, base_height, base_hash)
        self.cur_view = 1
        self.consecutive_timeouts = 0
        self.high_qc = genesis_qc(era, self.genesis_hash)
        self.locked_qc = genesis_qc(era, self.genesis_hash)
        self.committed_height = base_height
        self.blocks: dict[int, Block] = {}
        self.block_justify: dict[int, QuorumCertificate] = {}
        self.chain_hashes: dict[int, int] = {base_height: self.genesis_hash}
        self.cert_qcs: dict[int, QuorumCertificate] = {}
        self.votes: dict[tuple, dict[int, dict[int, object]]] = {}
        self.new_views: dict[int, dict[int, QuorumCertificate]] = {}
        self.voted: set[tuple[str, int]] = set()
        self.proposed: set[int] = set()
        self.advanced: set[tuple[str, int]] = set()
        self.pending: list[Command] = []
        self.last_decide: PhaseBroadcast | None = None
        self._pace_timer: int | None = None

    # ---- rotation / quorum

    def leader(self, view: int) -> int:
        return (self.base_height + view - 1) % self.n

    @property
    def quorum(self) -> int:
        return self.n - self.f

    def _block_height(self, qc: QuorumCertificate) -> int | None:
        if qc.block_hash == self.genesis_hash:
            return self.base_height
        b = self.blocks.get(qc.block_hash)
        return None if b is None else b.height

    # ---- lifecycle

    def start(self, ctx) -> None:
        self._send_new_view(ctx)
        self._arm_pacemaker(ctx)

    def resume(self, ctx) -> None:
        self._pace_timer = None
        self._arm_pacemaker(ctx)

    def _arm_pacemaker(self, ctx) -> None:
        if self._pace_timer is not None:
            ctx.cancel_timer(self._pace_timer)
        mult = min(2 ** self.consecutive_timeouts, self.cfg.backoff_cap)
        self._pace_timer = ctx.set_timer(self.cfg.view_timeout * mult,
                                         ("hs.pacemaker", self.cur_view))

    def _send_new_view(self, ctx) -> None:
        ldr = self.leader(self.cur_view)
        msg = sign_message(NewView(self.era, self.cur_view, self.node_id, self.high_qc),
                           self.node_id)
        if ldr == self.node_id:
            self._note_new_view(msg)
        else:
            ctx.send(ldr, msg)

    def on_timer(self, tag: tuple, ctx) -> None:
        if tag and tag[0] == "hs.pacemaker":
            if tag[1] != self.cur_view:
                return  # progressed since this timer was set
            self.consecutive_timeouts += 1
            ctx.view_outcome(self.cur_view, False)
            self.cur_view += 1
            self._send_new_view(ctx)
            self._arm_pacemaker(ctx)
        elif tag and tag[0] == "hs.decide_retx":
            if self.last_decide is not None and self.last_decide.view == tag[1]:
                for p in self.peers:
                    ctx.send(p, self.last_decide)

    # ---- message handling

    def on_message(self, src: int, msg, ctx) -> None:
        if isinstance(msg, NewView):
            self._handle_new_view(msg, ctx)
        elif isinstance(msg, Proposal):
            self._handle_proposal(msg, ctx)
        elif isinstance(msg, PhaseBroadcast):
            self._handle_phase(msg, ctx)
        elif isinstance(msg, PhaseVote):
            self._handle_vote(msg, ctx)

    def _note_new_view(self, msg: NewView) -> None:
        self.new_views.setdefault(msg.view, {})[msg.sender] = msg.high_qc

    def _handle_new_view(self, msg: NewView, ctx) -> None:
        if msg.view < self.cur_view or self.leader(msg.view) != self.node_id:
            return
        if not msg.high_qc.verify(self.n, self.f, self.genesis_hash):
            return
        self._note_new_view(msg)
        self._maybe_propose_from_new_views(msg.view, ctx)

    def _maybe_propose_from_new_views(self, view: int, ctx) -> None:
        if self.leader(view) != self.node_id or view in self.proposed:
            return
        got = self.new_views.setdefault(view, {})
        got.setdefault(self.node_id, self.high_qc)  # the leader is a replica too
        if len(got) < self.quorum:
            return
        high = self.high_qc
        for qc in got.values():
            if qc.view > high.view:
                high = qc
        if view > self.cur_view:
            self.cur_view = view
            self._arm_pacemaker(ctx)
        self._propose(view, high, ctx)

    def _next_command(self, parent_hash: int, ctx) -> Command:
        while self.pending:
            cmd = self.pending[0]
            key = (cmd.client, cmd.seq)
            if self._cmd_seen(parent_hash, key, ctx):
                self.pending.pop(0)
                continue
            return self.pending.pop(0)
        return noop_command(self.era, self.cur_view)

    def _cmd_seen(self, parent_hash: int, key: tuple[int, int], ctx) -> bool:
        if ctx.is_committed(key):
            return True
        # walk the uncommitted branch the proposal extends
        h = parent_hash
        while h != self.genesis_hash:
            b = self.blocks.get(h)
            if b is None or b.height <= self.committed_height:
                break
            if (b.cmd.client, b.cmd.seq) == key:
                return True
            h = b.parent_hash
        return False

    def _propose(self, view: int, justify: QuorumCertificate, ctx) -> None:
        parent_height = self._block_height(justify)
        if parent_height is None:
            return  # parent block unknown; let the view time out
        self.proposed.add(view)
        cmd = self._next_command(justify.block_hash, ctx)
        block = Block(self.era, parent_height + 1, justify.block_hash, cmd,
                      self.node_id, view)
        self.blocks[block.hash] = block
        self.block_justify[block.hash] = justify
        phase = GENERIC if self.chained else PREPARE
        prop = sign_message(
            Proposal(self.era, view, phase, block, justify, self.blocks.get(justify.block_hash)),
            self.node_id)
        for p in self.peers:
            ctx.send(p, prop)
        self._cast_vote(view, phase, block.hash, ctx)

    def _cast_vote(self, view: int, phase: str, block_hash: int, ctx) -> None:
        if (phase, view) in self.voted:
            return
        self.voted.add((phase, view))
        vote = sign_message(PhaseVote(self.era, view, phase, block_hash, self.node_id),
                            self.node_id)
        target = self.leader(view + 1) if self.chained else self.leader(view)
        if target == self.node_id:
            self._handle_vote(vote, ctx)
        else:
            ctx.send(target, vote)

    def _extends_locked(self, block: Block) -> bool:
        target = self.locked_qc.block_hash
        if target == self.genesis_hash:
            return True
        h = block.parent_hash
        while True:
            if h == target:
                return True
            if h == self.genesis_hash:
                return False
            b = self.blocks.get(h)
            if b is None:
                return False
            h = b.parent_hash

    def _handle_proposal(self, msg: Proposal, ctx) -> None:
        if msg.view < self.cur_view:
            return
        if msg.block.proposer != self.leader(msg.view):
            return
        if not msg.justify.verify(self.n, self.f, self.genesis_hash):
            return
        if msg.justify_block is not None:
            self.blocks.setdefault(msg.justify_block.hash, msg.justify_block)
        if msg.block.parent_hash != msg.justify.block_hash:
            return  # proposals must extend their justify
        self.blocks.setdefault(msg.block.hash, msg.block)
        self.block_justify.setdefault(msg.block.hash, msg.justify)
        self._absorb_qc(msg.justify, ctx)
        safe = self._extends_locked(msg.block) or msg.justify.view > self.locked_qc.view
        if not safe:
            return
        if msg.view > self.cur_view:
            self.cur_view = msg.view
            self._arm_pacemaker(ctx)
        self._cast_vote(msg.view, msg.phase, msg.block.hash, ctx)
        if self.chained:
            # accepted proposal == view progress
            self.consecutive_timeouts = 0
            ctx.view_outcome(msg.view, True)
            self.cur_view = msg.view + 1
            self._arm_pacemaker(ctx)

    def _absorb_qc(self, qc: QuorumCertificate, ctx) -> None:
        """Track the highest QC and, in chained mode, run the lock/commit
        chain walk it unlocks."""
        if qc.view > self.high_qc.view:
            self.high_qc = qc
        if not self.chained:
            return
        b2 = self.blocks.get(qc.block_hash)
        if b2 is None:
            return
        j2 = self.block_justify.get(b2.hash)
        if j2 is None:
            return
        if j2.view > self.locked_qc.view and j2.block_hash != self.genesis_hash:
            self.locked_qc = j2  # lock on the 2-chain block
        b1 = self.blocks.get(j2.block_hash)
        if b1 is None:
            return
        j1 = self.block_justify.get(b1.hash)
        if j1 is None or j1.block_hash == self.genesis_hash:
            return
        b0 = self.blocks.get(j1.block_hash)
        if b0 is None:
            return
        if b2.view == b1.view + 1 and b1.view == b0.view + 1:
            self._execute(b0, j1, ctx)

    def _handle_phase(self, msg: PhaseBroadcast, ctx) -> None:
        if self.chained or msg.view < self.cur_view:
            return
        if not msg.qc.verify(self.n, self.f, self.genesis_hash):
            return
        if msg.qc.block_hash != msg.block.hash or msg.qc.view != msg.view:
            return
        self.blocks.setdefault(msg.block.hash, msg.block)
        if msg.qc.view > self.high_qc.view:
            self.high_qc = msg.qc
        if msg.view > self.cur_view:
            self.cur_view = msg.view
            self._arm_pacemaker(ctx)
        if msg.phase == PRECOMMIT:
            self._cast_vote(msg.view, PRECOMMIT, msg.block.hash, ctx)
        elif msg.phase == COMMIT:
            if msg.qc.view > self.locked_qc.view:
                self.locked_qc = msg.qc  # highest PRECOMMIT QC seen
            self._cast_vote(msg.view, COMMIT, msg.block.hash, ctx)
        elif msg.phase == DECIDE:
            self._on_decide(msg, ctx)

    def _on_decide(self, msg: PhaseBroadcast, ctx) -> None:
        if self._execute(msg.block, msg.qc, ctx):
            self.consecutive_timeouts = 0
            ctx.view_outcome(msg.view, True)
        if msg.view + 1 > self.cur_view:
            self.cur_view = msg.view + 1
            self._send_new_view(ctx)
            self._arm_pacemaker(ctx)

    def _handle_vote(self, msg: PhaseVote, ctx) -> None:
        expected_leader = self.leader(msg.view + 1) if self.chained else self.leader(msg.view)
        if expected_leader != self.node_id:
            return
        slot = self.votes.setdefault((msg.phase, msg.view), {})
        by_hash = slot.setdefault(msg.block_hash, {})
        by_hash[msg.voter] = msg.tag
        if len(by_hash) < self.quorum:
            return
        key = (msg.phase, msg.view, msg.block_hash)
        if key in self.advanced:
            return
        self.advanced.add(key)
        tags = tuple(by_hash[v] for v in sorted(by_hash))
        qc = QuorumCertificate(self.era, msg.phase, msg.view, msg.block_hash, tags)
        block = self.blocks.get(msg.block_hash)
        if block is None:
            return
        if self.chained:
            self._chained_qc_formed(qc, ctx)
        else:
            self._basic_qc_formed(qc, block, ctx)

    def _basic_qc_formed(self, qc: QuorumCertificate, block: Block, ctx) -> None:
        nxt = {PREPARE: PRECOMMIT, PRECOMMIT: COMMIT, COMMIT: DECIDE}[qc.phase]
        out = sign_message(PhaseBroadcast(self.era, qc.view, nxt, qc, block), self.node_id)
        for p in self.peers:
            ctx.send(p, out)
        if qc.view > self.high_qc.view:
            self.high_qc = qc
        if nxt == PRECOMMIT:
            self._cast_vote(qc.view, PRECOMMIT, block.hash, ctx)
        elif nxt == COMMIT:
            if qc.view > self.locked_qc.view:
                self.locked_qc = qc
            self._cast_vote(qc.view, COMMIT, block.hash, ctx)
        else:
            self.last_decide = out
            ctx.set_timer(self.cfg.decide_retransmit_delay, ("hs.decide_retx", qc.view))
            self._on_decide(out, ctx)

    def _chained_qc_formed(self, qc: QuorumCertificate, ctx) -> None:
        self._absorb_qc(qc, ctx)
        view = qc.view + 1
        if view < self.cur_view or view in self.proposed:
            return
        if view > self.cur_view:
            self.cur_view = view
            self._arm_pacemaker(ctx)
        self._propose(view, qc, ctx)

    # ---- execution

    def _execute(self, block: Block, tip_qc: QuorumCertificate, ctx) -> bool:
        """Commit ``block`` and its uncommitted ancestors; certificates are
        retained per height for handover verification.  Returns False when a
        parent is missing (node lags; the switch reconciliation catches it
        up)."""
        if block.height <= self.committed_height:
            return False
        chain: list[Block] = []
        cur = block
        while cur.height > self.committed_height:
            chain.append(cur)
            if cur.parent_hash == self.genesis_hash:
                break
            parent = self.blocks.get(cur.parent_hash)
            if parent is None:
                return False
            cur = parent
        chain.reverse()
        if chain[0].parent_hash != self.chain_hashes.get(self.committed_height):
            return False  # fork below our committed prefix; impossible for honest traffic
        for i, b in enumerate(chain):
            cert = tip_qc if i == len(chain) - 1 else self.block_justify.get(chain[i + 1].hash)
            ctx.commit(LedgerEntry(b.height, b.cmd, OriginProtocol.HOTSTUFF, b.view))
            self.chain_hashes[b.height] = b.hash
            if cert is not None:
                self.cert_qcs[b.height] = cert
            self.committed_height = b.height
        return True

    # ---- client commands

    def submit(self, cmd: Command, ctx) -> None:
        key = (cmd.client, cmd.seq)
        if ctx.is_committed(key):
            return
        ldr = self.leader(self.cur_view)
        if ldr == self.node_id:
            if all((c.client, c.seq) != key for c in self.pending):
                self.pending.append(cmd)
        else:
            ctx.forward_command(ldr, cmd)

    # ---- handover support

    def tail_info(self, base: int, ledger) -> "HsTailInfo":
        from .messages import HsTailInfo, PromotedEntry
        committed = []
        for h in range(base + 1, self.committed_height + 1):
            entry = ledger.entry_at(h)
            blk = self.blocks.get(self.chain_hashes.get(h, -1))
            committed.append(PromotedEntry(entry, self.cert_qcs.get(h), blk))
        locked_chain: tuple[Block, ...] = ()
        locked_qc = None
        lb = self.blocks.get(self.locked_qc.block_hash)
        if lb is not None and lb.height > self.committed_height:
            chain = []
            cur = lb
            ok = True
            while cur.height > self.committed_height:
                chain.append(cur)
                if cur.parent_hash == self.genesis_hash:
                    break
                parent = self.blocks.get(cur.parent_hash)
                if parent is None:
                    ok = False
                    break
                cur = parent
            if ok and chain and chain[-1].parent_hash == self.chain_hashes.get(self.committed_height):
                chain.reverse()
                locked_chain = tuple(chain)
                locked_qc = self.locked_qc
        return HsTailInfo(tuple(committed), locked_chain, locked_qc)

"""HotStuff protocol behavior: basic three-phase mode and chained mode."""

import pytest

from switchsim.hotstuff import HotstuffConfig, HotstuffNode, noop_command
from switchsim.ledger import GENESIS_HASH, Command
from switchsim.messages import (AuthTag, Block, NewView, PhaseBroadcast,
                                PhaseVote, Proposal, QuorumCertificate,
                                COMMIT, DECIDE, GENERIC, PRECOMMIT, PREPARE,
                                genesis_qc, vote_payload)
from support import StubCtx, quick_run, scenario_text


def cmd(seq, client=1):
    return Command(client, seq, b"x")


def make_node(node_id, n=4, f=1, era=1, base=0, chained=False):
    return HotstuffNode(node_id, n, f, era, base, GENESIS_HASH, chained)


def make_qc(era, phase, view, block_hash, voters):
    payload = vote_payload(era, phase, view, block_hash)
    tags = tuple(AuthTag.sign(v, payload) for v in voters)
    return QuorumCertificate(era, phase, view, block_hash, tags)


def make_cluster(n=4, f=1, chained=False):
    nodes = [make_node(i, n, f, chained=chained) for i in range(n)]
    ctxs = [StubCtx() for _ in range(n)]
    return nodes, ctxs


def pump(nodes, ctxs, budget=6000):
    """Deliver queued sends and forwards round-robin until quiet or the
    budget runs out (quiet never happens in chained mode, which proposes
    noop filler forever; the budget bounds the run instead)."""
    steps = 0
    while steps < budget:
        moved = False
        for i in range(len(nodes)):
            for dst, c in ctxs[i].forwarded:
                nodes[dst].submit(c, ctxs[dst])
                moved = True
                steps += 1
            ctxs[i].forwarded = []
            for dst, msg in ctxs[i].drain():
                nodes[dst].on_message(i, msg, ctxs[dst])
                moved = True
                steps += 1
        if not moved:
            return


def test_cluster_size_must_tolerate_f():
    with pytest.raises(ValueError):
        make_node(0, n=3, f=1)
    with pytest.raises(ValueError):
        make_node(0, n=6, f=2)
    make_node(0, n=4, f=1)
    make_node(0, n=7, f=2)


def test_leader_rotates_with_view_and_base_height():
    node = HotstuffNode(0, 4, 1, 2, 7, GENESIS_HASH, False)
    assert [node.leader(v) for v in (1, 2, 3, 4, 5)] == [3, 0, 1, 2, 3]
    assert node.quorum == 3


def test_noop_command_identity():
    assert noop_command(3, 7) == Command(-1, (3 << 32) | 7, b"")
    # era and view both separate the noop namespace
    assert noop_command(3, 7) != noop_command(3, 8)
    assert noop_command(3, 7) != noop_command(4, 7)


def test_basic_round_commits_on_every_node():
    nodes, ctxs = make_cluster()
    nodes[0].submit(cmd(1), ctxs[0])  # node 0 leads view 1
    for i, node in enumerate(nodes):
        node.start(ctxs[i])
    pump(nodes, ctxs)
    for i, ctx in enumerate(ctxs):
        assert ctx.committed, f"node {i} committed nothing"
        assert ctx.committed[0].cmd == cmd(1)
        assert ctx.committed[0].height == 1
    # successful views are reported to the monitor side
    assert (1, True) in ctxs[0].view_results


def test_basic_leader_needs_quorum_votes():
    node = make_node(0)
    ctx = StubCtx()
    node.start(ctx)
    for sender in (1, 2):
        node.on_message(sender, NewView(1, 1, sender, node.high_qc), ctx)
    props = [m for _, m in ctx.drain() if isinstance(m, Proposal)]
    assert len(props) == 3  # one per peer
    blk = props[0].block
    # the leader voted for itself inside _propose; one extra vote is still
    # short of quorum 3, the second closes it
    node.on_message(1, PhaseVote(1, 1, PREPARE, blk.hash, 1), ctx)
    assert ctx.drain() == []
    node.on_message(1, PhaseVote(1, 1, PREPARE, blk.hash, 1), ctx)
    assert ctx.drain() == []  # duplicate voter does not count twice
    node.on_message(2, PhaseVote(1, 1, PREPARE, blk.hash, 2), ctx)
    out = [m for _, m in ctx.drain() if isinstance(m, PhaseBroadcast)]
    assert len(out) == 3 and out[0].phase == PRECOMMIT


def test_votes_for_another_leader_are_dropped():
    node = make_node(2)  # leads neither view 1 nor (chained) view 2
    ctx = StubCtx()
    node.start(ctx)
    node.on_message(1, PhaseVote(1, 1, PREPARE, 12345, 1), ctx)
    assert node.votes == {}


def test_proposal_must_extend_its_justify():
    node = make_node(1)
    ctx = StubCtx()
    node.start(ctx)
    ctx.drain()
    good = Block(1, 1, node.genesis_hash, cmd(1), 0, 1)
    bad = Block(1, 1, 999, cmd(1), 0, 1)  # parent is not the justify block
    node.on_message(0, Proposal(1, 1, PREPARE, bad, node.high_qc, None), ctx)
    assert ctx.drain() == []
    node.on_message(0, Proposal(1, 1, PREPARE, good, node.high_qc, None), ctx)
    votes = [m for _, m in ctx.drain() if isinstance(m, PhaseVote)]
    assert len(votes) == 1 and votes[0].block_hash == good.hash


def test_proposal_from_wrong_leader_rejected():
    node = make_node(1)
    ctx = StubCtx()
    node.start(ctx)
    ctx.drain()
    blk = Block(1, 1, node.genesis_hash, cmd(1), 3, 1)  # view 1 leader is 0
    node.on_message(3, Proposal(1, 1, PREPARE, blk, node.high_qc, None), ctx)
    assert ctx.drain() == []


def test_locked_node_needs_fresher_justify():
    node = make_node(1)
    ctx = StubCtx()
    node.start(ctx)
    ctx.drain()
    # lock the node on an unknown block certified at view 3
    node.locked_qc = make_qc(1, PRECOMMIT, 3, 424242, (0, 1, 2))
    node.cur_view = 4
    blk = Block(1, 1, node.genesis_hash, cmd(1), 3, 4)  # leader(4) == 3
    stale = make_qc(1, PREPARE, 2, node.genesis_hash, (0, 2, 3))
    node.on_message(3, Proposal(1, 4, PREPARE, blk, stale, None), ctx)
    assert ctx.drain() == []  # justify view 2 does not beat lock view 3
    fresh = make_qc(1, PREPARE, 4, node.genesis_hash, (0, 2, 3))
    blk2 = Block(1, 1, node.genesis_hash, cmd(1), 0, 5)  # leader(5) == 0
    node.cur_view = 5
    node.on_message(0, Proposal(1, 5, PREPARE, blk2, fresh, None), ctx)
    votes = [m for _, m in ctx.drain() if isinstance(m, PhaseVote)]
    assert len(votes) == 1  # view 4 justify unlocks the vote


def test_forged_justify_is_rejected():
    node = make_node(1)
    ctx = StubCtx()
    node.start(ctx)
    ctx.drain()
    blk = Block(1, 1, node.genesis_hash, cmd(1), 0, 1)
    # two signatures is below quorum, and one of them is for a different payload
    short = make_qc(1, PREPARE, 1, node.genesis_hash, (0, 2))
    node.on_message(0, Proposal(1, 1, PREPARE, blk, short, None), ctx)
    assert ctx.drain() == []
    forged = QuorumCertificate(1, PREPARE, 1, node.genesis_hash,
                               tuple(AuthTag.sign(v, b"junk") for v in (0, 2, 3)))
    node.on_message(0, Proposal(1, 1, PREPARE, blk, forged, None), ctx)
    assert ctx.drain() == []


def test_pacemaker_backoff_doubles_then_caps():
    node = make_node(0, n=4, f=1)
    node.cfg = HotstuffConfig(view_timeout=400, backoff_cap=8)
    ctx = StubCtx()
    node.start(ctx)
    for k in range(5):
        view = node.cur_view
        node.on_timer(("hs.pacemaker", view), ctx)
        assert node.cur_view == view + 1
    delays = [due for due, tag in ctx.timers if tag[0] == "hs.pacemaker"]
    assert delays == [400, 800, 1600, 3200, 3200, 3200]
    # every expiry counts the view as failed
    assert ctx.view_results == [(v, False) for v in (1, 2, 3, 4, 5)]


def test_stale_pacemaker_timer_is_ignored():
    node = make_node(0)
    ctx = StubCtx()
    node.start(ctx)
    node.cur_view = 3
    node.on_timer(("hs.pacemaker", 1), ctx)
    assert node.cur_view == 3
    assert ctx.view_results == []


def test_decide_is_retransmitted_on_timer():
    node = make_node(0)
    ctx = StubCtx()
    node.start(ctx)
    for sender in (1, 2):
        node.on_message(sender, NewView(1, 1, sender, node.high_qc), ctx)
    blk = [m for _, m in ctx.sent if isinstance(m, Proposal)][0].block
    ctx.drain()
    # walk the leader through all three vote rounds
    for phase in (PREPARE, PRECOMMIT, COMMIT):
        for voter in (1, 2):
            node.on_message(voter, PhaseVote(1, 1, phase, blk.hash, voter), ctx)
    decides = [m for _, m in ctx.drain() if isinstance(m, PhaseBroadcast)
               and m.phase == DECIDE]
    assert len(decides) == 3
    assert ctx.committed and ctx.committed[0].cmd.client == -1  # noop block
    retx = [tag for _, tag in ctx.timers if tag[0] == "hs.decide_retx"]
    assert retx == [("hs.decide_retx", 1)]
    node.on_timer(("hs.decide_retx", 1), ctx)
    again = [m for _, m in ctx.drain() if isinstance(m, PhaseBroadcast)
             and m.phase == DECIDE]
    assert len(again) == 3  # same broadcast goes out once more


def test_chained_vote_targets_next_leader():
    node = make_node(2, chained=True)
    ctx = StubCtx()
    node.start(ctx)
    ctx.drain()
    blk = Block(1, 1, node.genesis_hash, cmd(1), 0, 1)
    node.on_message(0, Proposal(1, 1, GENERIC, blk, node.high_qc, None), ctx)
    votes = [(dst, m) for dst, m in ctx.drain() if isinstance(m, PhaseVote)]
    assert len(votes) == 1
    dst, vote = votes[0]
    assert dst == 1  # leader of view 2, not of view 1
    assert vote.phase == GENERIC
    # accepting the proposal advanced the view
    assert node.cur_view == 2
    assert (1, True) in ctx.view_results


def test_chained_cluster_commits_with_two_view_lag():
    nodes, ctxs = make_cluster(chained=True)
    for s in (1, 2, 3):
        nodes[0].submit(cmd(s), ctxs[0])
    for i, node in enumerate(nodes):
        node.start(ctxs[i])
    pump(nodes, ctxs, budget=900)
    for i, ctx in enumerate(ctxs):
        got = [e.cmd for e in ctx.committed if e.cmd.client != -1]
        assert got[:3] == [cmd(1), cmd(2), cmd(3)], f"node {i}: {got}"
    # the decision pipeline runs two views behind the proposal tip (three
    # while the newest proposal is still waiting on its certificate)
    tip = max(b.height for b in nodes[0].blocks.values())
    assert tip - nodes[0].committed_height in (2, 3)
    # committed prefixes agree block for block
    h = min(n.committed_height for n in nodes)
    assert len({n.chain_hashes[h] for n in nodes}) == 1


def test_submissions_forward_to_the_view_leader():
    node = make_node(2)
    ctx = StubCtx()
    node.start(ctx)
    node.submit(cmd(1), ctx)
    assert ctx.forwarded == [(0, cmd(1))]  # view 1 leader
    node.cur_view = 2
    node.submit(cmd(2), ctx)
    assert ctx.forwarded[-1] == (1, cmd(2))


def test_duplicate_and_committed_commands_are_skipped():
    node = make_node(0)
    ctx = StubCtx()
    node.start(ctx)
    node.submit(cmd(1), ctx)
    node.submit(cmd(1), ctx)
    assert node.pending == [cmd(1)]
    ctx.committed_keys.add((1, 2))
    node.submit(cmd(2), ctx)
    assert node.pending == [cmd(1)]


def test_quiet_basic_scenario_is_safe():
    res = quick_run(scenario_text(n=4, protocol="HOTSTUFF_BASIC", duration=4000,
                                  policy_lines=("switching = off",)))
    assert res.violations == []
    assert min(h.ledger.height for h in res.harnesses) > 0
    # commands submitted close to the end may still be in flight at cutoff
    late = {k for k, t in res.submit_ticks.items() if t > res.final_tick - 500}
    assert set(res.submit_ticks) - set(res.commit_ticks) <= late


def test_quiet_chained_scenario_is_safe():
    res = quick_run(scenario_text(n=4, protocol="HOTSTUFF_CHAINED", duration=4000,
                                  policy_lines=("switching = off",)))
    assert res.violations == []
    assert min(h.ledger.height for h in res.harnesses) > 0
    late = {k for k, t in res.submit_ticks.items() if t > res.final_tick - 500}
    assert set(res.submit_ticks) - set(res.commit_ticks) <= late

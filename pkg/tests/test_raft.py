"""Raft protocol behavior, driven directly through a stub context."""

import itertools

from switchsim.ledger import Command
from switchsim.messages import AppendEntries, AppendReply, VoteRequest, VoteReply
from switchsim.raft import RaftConfig, RaftNode, Role, majority
from support import StubCtx, quick_run, scenario_text


def cmd(seq, client=1):
    return Command(client, seq, b"x")


def make_leader(n, era=1, base=0):
    """Elect node 0 leader at term 1 and drain the election traffic."""
    node = RaftNode(0, n, era, base)
    ctx = StubCtx()
    node.start(ctx)
    node.on_election_timeout(ctx)
    for voter in range(1, majority(n)):
        node.on_message(voter, VoteReply(era, 1, voter, 0, True), ctx)
    assert node.role is Role.LEADER
    ctx.drain()
    return node, ctx


def ack(node, ctx, follower, match):
    node.on_message(follower,
                    AppendReply(node.era, node.current_term, follower, True, match, 0),
                    ctx)


def test_majority_formula():
    assert [majority(n) for n in (1, 2, 3, 4, 5, 6, 7)] == [1, 2, 2, 3, 3, 4, 4]


def test_election_needs_majority_votes():
    node = RaftNode(0, 5, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    node.on_election_timeout(ctx)
    assert node.role is Role.CANDIDATE
    assert node.current_term == 1
    # one VoteRequest per peer
    reqs = [m for _, m in ctx.drain() if isinstance(m, VoteRequest)]
    assert len(reqs) == 4
    # own vote plus one grant is still short of majority(5) == 3
    node.on_message(1, VoteReply(1, 1, 1, 0, True), ctx)
    assert node.role is Role.CANDIDATE
    node.on_message(2, VoteReply(1, 1, 2, 0, True), ctx)
    assert node.role is Role.LEADER
    assert ctx.leader_wins == [1]
    # winning triggers an immediate AppendEntries round to every peer
    apps = [m for _, m in ctx.drain() if isinstance(m, AppendEntries)]
    assert len(apps) == 4


def test_heartbeat_round_sends_one_append_per_peer():
    node, ctx = make_leader(7)
    node.submit(cmd(1), ctx)
    node.on_timer(("raft.heartbeat",), ctx)
    sent = ctx.drain()
    assert len(sent) == 6
    assert sorted(dst for dst, _ in sent) == [1, 2, 3, 4, 5, 6]
    assert all(isinstance(m, AppendEntries) for _, m in sent)


def test_commit_requires_strict_majority():
    # brute force every follower ack subset for n=5: the entry commits on
    # the leader exactly when leader + acks reaches majority(5) == 3
    for r in range(5):
        for subset in itertools.combinations((1, 2, 3, 4), r):
            node, ctx = make_leader(5)
            node.submit(cmd(1), ctx)
            for p in subset:
                ack(node, ctx, p, 1)
            committed = len(ctx.committed) > 0
            assert committed == (1 + len(subset) >= 3), (subset, committed)


def test_duplicate_acks_do_not_inflate_quorum():
    node, ctx = make_leader(5)
    node.submit(cmd(1), ctx)
    ack(node, ctx, 1, 1)
    ack(node, ctx, 1, 1)
    ack(node, ctx, 1, 1)
    assert ctx.committed == []
    ack(node, ctx, 2, 1)
    assert [e.cmd.seq for e in ctx.committed] == [1]


def test_prior_term_entries_commit_only_indirectly():
    node, ctx = make_leader(5)
    node.submit(cmd(1), ctx)
    # a term-2 candidate with a matching log takes over, then node 0 wins
    # term 3 back while still holding the term-1 entry
    node.on_message(1, VoteRequest(1, 2, 1, 1, 1), ctx)
    assert node.role is Role.FOLLOWER
    node.on_election_timeout(ctx)
    assert node.current_term == 3
    for voter in (1, 2):
        node.on_message(voter, VoteReply(1, 3, voter, 0, True), ctx)
    assert node.role is Role.LEADER
    ctx.drain()
    # majority holds index 1, but its term (1) is not the current term,
    # so the leader must not advance the commit index yet
    ack(node, ctx, 1, 1)
    ack(node, ctx, 2, 1)
    assert ctx.committed == []
    # replicating a current-term entry on top commits both at once
    node.submit(cmd(2), ctx)
    ack(node, ctx, 1, 2)
    ack(node, ctx, 2, 2)
    assert [e.cmd.seq for e in ctx.committed] == [1, 2]
    assert [e.origin_round for e in ctx.committed] == [1, 3]  # origin terms


def test_follower_appends_and_commits_from_leader():
    node = RaftNode(2, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    ents = ((1, cmd(1)), (1, cmd(2)))
    node.on_message(0, AppendEntries(1, 1, 0, 0, 0, ents, 1), ctx)
    assert node.last_index == 2
    assert node.leader_id == 0
    # leader_commit == 1 commits only the first entry
    assert [e.cmd.seq for e in ctx.committed] == [1]
    rep = [m for _, m in ctx.drain() if isinstance(m, AppendReply)][0]
    assert rep.success and rep.match_index == 2


def test_follower_rejects_gapped_append():
    node = RaftNode(1, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    # prev_log_index 2 but the follower log is empty
    node.on_message(0, AppendEntries(1, 1, 0, 2, 1, ((1, cmd(3)),), 0), ctx)
    assert node.last_index == 0
    rep = [m for _, m in ctx.drain() if isinstance(m, AppendReply)][0]
    assert not rep.success
    assert rep.hint_index == 1  # next useful prev is the log head


def test_follower_truncates_conflicting_suffix():
    node = RaftNode(1, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    node.on_message(0, AppendEntries(1, 1, 0, 0, 0, ((1, cmd(1)), (1, cmd(2))), 0), ctx)
    assert node.last_index == 2
    # a term-2 leader overwrites index 2 with a different command
    node.on_message(2, AppendEntries(1, 2, 2, 1, 1, ((2, cmd(9)),), 0), ctx)
    assert node.last_index == 2
    assert node.log[1] == (2, cmd(9))
    # the discarded command's dedupe key is released, the kept one is not
    assert (1, 2) not in node.log_cmds
    assert (1, 1) in node.log_cmds


def test_leader_backtracks_next_index_on_rejection():
    node, ctx = make_leader(3)
    for i in (1, 2, 3):
        node.submit(cmd(i), ctx)
    node.on_timer(("raft.heartbeat",), ctx)
    ctx.drain()
    assert node.next_index[1] == 1  # fresh leader starts peers at log head
    node.next_index[1] = 4          # pretend peer 1 was thought up to date
    node.on_message(1, AppendReply(1, 1, 1, False, 0, 2), ctx)
    assert node.next_index[1] == 2  # follower hint wins over decrement
    node.on_timer(("raft.heartbeat",), ctx)
    to_1 = [m for dst, m in ctx.drain() if dst == 1][0]
    assert to_1.prev_log_index == 1
    assert len(to_1.entries) == 2   # resends the suffix from the hint


def test_duplicate_submit_is_ignored():
    node, ctx = make_leader(3)
    node.submit(cmd(1), ctx)
    node.submit(cmd(1), ctx)
    assert node.last_index == 1
    # a command already in the committed ledger is dropped too
    ctx.committed_keys.add((1, 5))
    node.submit(cmd(5), ctx)
    assert node.last_index == 1


def test_follower_forwards_submissions_to_leader():
    node = RaftNode(1, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    # no leader known yet: the command parks until one appears
    node.submit(cmd(1), ctx)
    assert ctx.forwarded == []
    node.on_message(0, AppendEntries(1, 1, 0, 0, 0, (), 0), ctx)
    assert ctx.forwarded == [(0, cmd(1))]
    # with a live leader the forward is immediate
    node.submit(cmd(2), ctx)
    assert ctx.forwarded[-1] == (0, cmd(2))


def test_vote_denied_for_stale_log_or_double_vote():
    node = RaftNode(1, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    node.on_message(0, AppendEntries(1, 2, 0, 0, 0, ((2, cmd(1)),), 0), ctx)
    ctx.drain()
    # candidate 2's log (empty) is behind ours: denied even at a newer term
    node.on_message(2, VoteRequest(1, 3, 2, 0, 0), ctx)
    rep = [m for _, m in ctx.drain() if isinstance(m, VoteReply)][0]
    assert not rep.granted
    assert node.current_term == 3  # the term still advances
    # an up-to-date candidate gets the vote
    node.on_message(2, VoteRequest(1, 3, 2, 1, 2), ctx)
    rep = [m for _, m in ctx.drain() if isinstance(m, VoteReply)][0]
    assert rep.granted
    # but only once per term
    node.on_message(0, VoteRequest(1, 3, 0, 1, 2), ctx)
    rep = [m for _, m in ctx.drain() if isinstance(m, VoteReply)][0]
    assert not rep.granted


def test_stale_term_append_is_rejected():
    node = RaftNode(1, 3, 1, 0)
    ctx = StubCtx()
    node.start(ctx)
    node.on_message(0, AppendEntries(1, 5, 0, 0, 0, (), 0), ctx)
    ctx.drain()
    node.on_message(2, AppendEntries(1, 3, 2, 0, 0, ((3, cmd(1)),), 0), ctx)
    assert node.last_index == 0
    rep = [m for _, m in ctx.drain() if isinstance(m, AppendReply)][0]
    assert not rep.success
    assert rep.term == 5  # tells the stale leader the real term


def test_quiet_cluster_replicates_identically():
    res = quick_run(scenario_text(n=5, protocol="RAFT", duration=4000,
                                  policy_lines=("switching = off",)))
    assert res.violations == []
    # followers trail the leader's commit index by one heartbeat, so only
    # the common prefix must agree, not the final heights
    low = min(h.ledger.height for h in res.harnesses)
    assert low > 0
    assert max(h.ledger.height for h in res.harnesses) - low <= 4
    prefix = {h.ledger.hash_at(low) for h in res.harnesses}
    assert len(prefix) == 1
    # every scheduled command landed on at least one honest node
    assert set(res.commit_ticks) == set(res.submit_ticks)

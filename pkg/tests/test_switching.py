"""Switch policy, fraud gating, promotion, and end-to-end handovers."""

import statistics

from switchsim.ledger import (Command, CommittedLedger, GENESIS_HASH,
                              LedgerEntry, OriginProtocol, ProtocolMode,
                              chain_hash)
from switchsim.messages import (AuthTag, Block, ConditionReport, InstanceId,
                                PromotedEntry, QuorumCertificate, RaftTailInfo,
                                SwitchReply, PRECOMMIT, era_genesis_hash,
                                vote_payload)
from switchsim.monitor import ConditionMonitor
from switchsim.switching import (ALLOW, BANDWIDTH, BYZ_RATIO, LATENCY, LOCK_BFT,
                                 MANUAL, SUPPRESS, SwitchPolicy, decide,
                                 detect_fraud, payload_hash, promote_hotstuff,
                                 promote_raft)
from support import quick_run, scenario_text


def cmd(seq, client=1):
    return Command(client, seq, b"x")


def raft_reply(replier, rows, last_term, last_index, base=0):
    tail = RaftTailInfo(tuple(rows), last_term, last_index)
    return SwitchReply(1, InstanceId(0, 100), 1, replier, "RAFT",
                       base, 0, base, tail, None)


# ---- policy


def test_policy_resolves_cluster_relative_defaults():
    p = SwitchPolicy().resolved(4)
    assert abs(p.byz_ratio_up - 1.0 / 12.0) < 1e-12
    assert p.evidence_horizon == p.byz_clear_window == 1500
    # explicit settings survive resolution
    q = SwitchPolicy(byz_ratio_up=0.25, evidence_horizon=99).resolved(4)
    assert q.byz_ratio_up == 0.25
    assert q.evidence_horizon == 99


def test_policy_validation_rejects_nonsense():
    assert SwitchPolicy().validate() == []
    assert SwitchPolicy(byz_ratio_up=0.5).validate() != []
    assert SwitchPolicy(cooldown=0).validate() != []
    assert SwitchPolicy(max_switch_rate=0).validate() != []
    assert SwitchPolicy(switch_timeout=0).validate() != []
    assert SwitchPolicy(chained_up=0.3, chained_down=0.6).validate() != []


# ---- decision rule


def quiet_bft_monitor(now=5000):
    """Monitor with healthy BFT-side signals: no evidence, good bandwidth,
    low latency, successful views."""
    m = ConditionMonitor(0, 4)
    m.observe_bandwidth(8.0)
    m.observe_latency(10.0)
    return m


def test_cft_escalates_on_suspect_ratio():
    pol = SwitchPolicy().resolved(4)
    m = ConditionMonitor(0, 4)
    assert decide(pol, m, ProtocolMode.RAFT, 1000) is None
    m.note_invalid_tag(900, claimed=2)
    # one suspect out of four clears the 1/12 default threshold
    assert decide(pol, m, ProtocolMode.RAFT, 1000) == (ProtocolMode.HOTSTUFF_BASIC, BYZ_RATIO)
    # the same evidence outside the horizon no longer counts
    assert decide(pol, m, ProtocolMode.RAFT, 900 + pol.evidence_horizon + 1) is None


def test_bft_deescalates_only_after_clear_window():
    pol = SwitchPolicy().resolved(4)
    m = quiet_bft_monitor()
    m.observe_bandwidth(1.0)  # degraded, below bandwidth_min
    # fresh evidence pins the cluster to BFT no matter the conditions
    m.note_invalid_tag(4900, claimed=2)
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, 5000) is None
    # once the evidence-free window passes, the de-escalation fires
    later = 4900 + pol.byz_clear_window
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, later) == (ProtocolMode.RAFT, BANDWIDTH)


def test_bandwidth_outranks_latency_for_deescalation():
    pol = SwitchPolicy().resolved(4)
    m = ConditionMonitor(0, 4)
    m.observe_bandwidth(1.0)
    m.observe_latency(500.0)  # both triggers hold
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, 5000) == (ProtocolMode.RAFT, BANDWIDTH)
    m.observe_bandwidth(8.0)
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, 5000) == (ProtocolMode.RAFT, LATENCY)


def test_view_success_moves_between_bft_variants():
    pol = SwitchPolicy().resolved(4)
    m = quiet_bft_monitor()
    # below min_view_samples nothing happens
    for _ in range(pol.min_view_samples - 1):
        m.observe_view(True)
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, 5000) is None
    m.observe_view(True)
    assert decide(pol, m, ProtocolMode.HOTSTUFF_BASIC, 5000) == (
        ProtocolMode.HOTSTUFF_CHAINED, LATENCY)
    # a rough patch sends chained mode back to basic
    m2 = quiet_bft_monitor()
    for ok in [True] * 3 + [False] * 5:
        m2.observe_view(ok)
    assert decide(pol, m2, ProtocolMode.HOTSTUFF_CHAINED, 5000) == (
        ProtocolMode.HOTSTUFF_BASIC, LATENCY)
    # a rate exactly at the downgrade bound stays put (the rule is strict)
    m3 = quiet_bft_monitor()
    for ok in [True] * 4 + [False] * 4:
        m3.observe_view(ok)
    assert decide(pol, m3, ProtocolMode.HOTSTUFF_CHAINED, 5000) is None
    assert decide(pol, m3, ProtocolMode.HOTSTUFF_BASIC, 5000) is None


# ---- fraud gating


def test_rate_lock_on_completed_and_attempted_switches():
    pol = SwitchPolicy().resolved(4)  # max 3 per 3000-tick window
    m = ConditionMonitor(0, 4)
    assert detect_fraud(pol, m, 4, [], [], MANUAL, 5000) == (ALLOW, [])
    completed = [4000, 4400, 4800]
    assert detect_fraud(pol, m, 4, [], completed, MANUAL, 5000)[0] == LOCK_BFT
    # the same history outside the window is forgiven
    assert detect_fraud(pol, m, 4, [], completed, MANUAL, 8100)[0] == ALLOW
    # failed attempts count against the budget too (this one would be #4)
    attempts = [4000, 4400, 4800]
    assert detect_fraud(pol, m, 4, attempts, [], MANUAL, 5000)[0] == LOCK_BFT
    assert detect_fraud(pol, m, 4, attempts[:2], [], MANUAL, 5000)[0] == ALLOW


def test_lying_minority_reports_are_suppressed():
    pol = SwitchPolicy().resolved(5)
    m = ConditionMonitor(0, 5)
    m.observe_latency(20.0)
    honest = {1: 21.0, 2: 19.0}
    liars = {3: 9000.0, 4: 9500.0}
    for node, v in {**honest, **liars}.items():
        m.observe_message(5000, node, ConditionReport(1, node, 5000, v, 8.0, 1.0))
    verdict, outliers = detect_fraud(pol, m, 5, [], [], LATENCY, 5000)
    assert verdict == SUPPRESS
    assert outliers == [3, 4]
    # cross-check against the modified z-score rule computed inline
    vals = m.report_values(5000, pol.report_staleness, "latency")
    med = statistics.median(vals.values())
    mad = statistics.median(abs(v - med) for v in vals.values())
    limit = pol.z_thresh * max(mad, 1.0) / 0.6745
    assert outliers == sorted(k for k, v in vals.items() if abs(v - med) > limit)


def test_fraud_check_needs_three_reporters_and_a_minority():
    pol = SwitchPolicy().resolved(4)
    m = ConditionMonitor(0, 4)
    m.observe_latency(20.0)
    m.observe_message(5000, 3, ConditionReport(1, 3, 5000, 9000.0, 8.0, 1.0))
    # two values cannot establish an outlier
    assert detect_fraud(pol, m, 4, [], [], LATENCY, 5000) == (ALLOW, [])
    # non-condition triggers skip the statistics entirely
    m.observe_message(5000, 2, ConditionReport(1, 2, 5000, 21.0, 8.0, 1.0))
    assert detect_fraud(pol, m, 4, [], [], BYZ_RATIO, 5000) == (ALLOW, [])
    assert detect_fraud(pol, m, 4, [], [], MANUAL, 5000) == (ALLOW, [])
    # with three reporters the liar is a strict minority and gets caught
    verdict, outliers = detect_fraud(pol, m, 4, [], [], LATENCY, 5000)
    assert (verdict, outliers) == (SUPPRESS, [3])


# ---- promotion and payloads


def test_payload_hash_equals_ledger_fold():
    led = CommittedLedger()
    entries = [LedgerEntry(i, cmd(i), OriginProtocol.RAFT, 1) for i in (1, 2, 3)]
    for e in entries:
        led.append(e)
    payload = tuple(PromotedEntry(e) for e in entries)
    assert payload_hash(GENESIS_HASH, payload) == led.head_hash
    # the fold is order-sensitive by construction
    swapped = (payload[1], payload[0], payload[2])
    assert payload_hash(GENESIS_HASH, swapped) != led.head_hash
    h = GENESIS_HASH
    for e in entries:
        h = chain_hash(h, e)
    assert payload_hash(GENESIS_HASH, payload) == h


def test_promote_raft_takes_freshest_dense_tail():
    r1 = raft_reply(1, [(1, 1, cmd(1)), (2, 1, cmd(2)), (3, 1, cmd(3))], 1, 3)
    r2 = raft_reply(2, [(1, 1, cmd(1)), (2, 2, cmd(9))], 2, 2)
    out = promote_raft(0, [r1, r2])
    # r2 wins on last term despite the shorter log, as in a Raft election
    assert [(e.entry.height, e.entry.cmd) for e in out] == [(1, cmd(1)), (2, cmd(9))]
    assert all(e.entry.origin_protocol is OriginProtocol.RAFT for e in out)


def test_promote_raft_stops_at_gaps_and_skips_stale_rows():
    rows = [(3, 1, cmd(3)), (4, 1, cmd(4)), (6, 1, cmd(6))]
    out = promote_raft(3, [raft_reply(1, rows, 1, 6, base=3)])
    # height 3 is at or below the base, height 6 leaves a gap after 4
    assert [e.entry.height for e in out] == [4]
    assert promote_raft(0, [SwitchReply(1, InstanceId(0, 1), 1, 1, "RAFT",
                                        0, 0, 0, None, None)]) == []


def hs_chain(base_hash, heights, era=1, view0=3):
    """Parent-linked blocks with a PRECOMMIT certificate on the tip."""
    blocks = []
    parent = base_hash
    for i, h in enumerate(heights):
        b = Block(era, h, parent, cmd(h), 0, view0 + i)
        blocks.append(b)
        parent = b.hash
    tip = blocks[-1]
    payload = vote_payload(era, PRECOMMIT, tip.view, tip.hash)
    qc = QuorumCertificate(era, PRECOMMIT, tip.view,
                           tip.hash, tuple(AuthTag.sign(v, payload) for v in (0, 1, 2)))
    return blocks, qc


def hs_reply(replier, entries, base=0):
    from switchsim.messages import HsTailInfo
    tail = HsTailInfo(tuple(entries), (), None)
    return SwitchReply(1, InstanceId(0, 100), 1, replier, "HOTSTUFF_BASIC",
                       base, 0, base, None, tail)


def test_promote_hotstuff_requires_certified_chain():
    genesis = era_genesis_hash(1, 0, GENESIS_HASH)
    blocks, qc = hs_chain(genesis, [1, 2])
    good = [PromotedEntry(LedgerEntry(b.height, b.cmd, OriginProtocol.HOTSTUFF, b.view),
                          qc if b is blocks[-1] else None, b)
            for b in blocks]
    out = promote_hotstuff(0, genesis, [hs_reply(1, good)], 4, 1, genesis)
    assert [e.entry.height for e in out] == [1, 2]
    # without any certificate the same chain is worthless
    bare = [PromotedEntry(e.entry, None, e.block) for e in good]
    assert promote_hotstuff(0, genesis, [hs_reply(1, bare)], 4, 1, genesis) == []
    # a broken parent link is rejected even with a certificate attached
    alien = Block(1, 2, 12345, blocks[1].cmd, 0, blocks[1].view)
    forged = [good[0], PromotedEntry(good[1].entry, qc, alien)]
    assert promote_hotstuff(0, genesis, [hs_reply(1, forged)], 4, 1, genesis) == []


def test_promote_hotstuff_falls_back_past_invalid_high_tips():
    genesis = era_genesis_hash(1, 0, GENESIS_HASH)
    blocks, qc = hs_chain(genesis, [1, 2], view0=3)
    good = [PromotedEntry(LedgerEntry(b.height, b.cmd, OriginProtocol.HOTSTUFF, b.view),
                          qc if b is blocks[-1] else None, b)
            for b in blocks]
    # a rival claims a higher tip view but its certificate does not verify
    fake_qc = QuorumCertificate(1, PRECOMMIT, 99, blocks[-1].hash,
                                tuple(AuthTag.sign(v, b"junk") for v in (0, 1, 2)))
    bad = [good[0], PromotedEntry(good[1].entry, fake_qc, good[1].block)]
    out = promote_hotstuff(0, genesis, [hs_reply(1, bad), hs_reply(2, good)],
                           4, 1, genesis)
    assert [e.qc for e in out][-1] == qc  # the honest chain wins


def test_instance_arbitration_prefers_earlier_decision():
    a = InstanceId(initiator=3, decided_tick=100)
    b = InstanceId(initiator=2, decided_tick=200)
    c = InstanceId(initiator=2, decided_tick=100)
    assert a.key() < b.key()     # earlier decision beats lower initiator id
    assert c.key() < a.key()     # ties break on initiator


# ---- end-to-end handovers


def test_manual_switch_completes_and_preserves_prefix():
    res = quick_run(scenario_text(
        n=4, protocol="RAFT", duration=6000, seed=11,
        switch_lines=("manual.1 = 1500:HOTSTUFF_BASIC",)))
    assert res.violations == []
    # the manual handover lands first; a later autonomous chained upgrade
    # may follow once the healthy view statistics accumulate
    sw = res.switches[0]
    assert sw["target"] == "HOTSTUFF_BASIC"
    assert sw["trigger"] == "MANUAL"
    assert sw["era"] == 1
    assert sw["cp_height"] > 0
    # the cluster kept committing after the handover
    assert max(h.ledger.height for h in res.harnesses) > sw["cp_height"]
    # every post-switch entry on every honest node carries the new origin
    for h in res.harnesses:
        for e in h.ledger.entries:
            if e.height > sw["cp_height"]:
                assert e.origin_protocol is OriginProtocol.HOTSTUFF


def test_round_trip_switch_raft_bft_raft():
    res = quick_run(scenario_text(
        n=4, protocol="RAFT", duration=9000, seed=7,
        policy_lines=("cooldown = 300",),
        switch_lines=("manual.1 = 1500:HOTSTUFF_CHAINED",
                      "manual.2 = 4500:RAFT")))
    assert res.violations == []
    assert [s["target"] for s in res.switches] == ["HOTSTUFF_CHAINED", "RAFT"]
    assert [s["era"] for s in res.switches] == [1, 2]
    # ledger origins flip at each checkpoint
    led = max((h.ledger for h in res.harnesses), key=lambda l: l.height)
    cp1, cp2 = res.switches[0]["cp_height"], res.switches[1]["cp_height"]
    origins = {e.height: e.origin_protocol for e in led.entries}
    assert origins[cp1 + 1] is OriginProtocol.HOTSTUFF
    assert origins[cp2 + 1] is OriginProtocol.RAFT


def test_switch_completes_despite_message_loss():
    # regression guard for the second-attempt payload reconciliation: with
    # loss in play repliers trail the initiator and the first attempt can
    # time out; the retry must still land
    res = quick_run(scenario_text(
        n=5, protocol="RAFT", duration=8000, seed=23, loss=0.12,
        policy_lines=("cooldown = 300",),
        switch_lines=("manual.1 = 2000:HOTSTUFF_BASIC",)))
    assert res.violations == []
    assert any(s["target"] == "HOTSTUFF_BASIC" for s in res.switches)


def test_manual_request_for_current_protocol_is_dropped():
    res = quick_run(scenario_text(
        n=4, protocol="RAFT", duration=4000,
        switch_lines=("manual.1 = 1500:RAFT",)))
    assert res.violations == []
    assert res.switches == []

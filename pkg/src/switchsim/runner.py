"""Drive a scenario end to end: build the cluster, pre-arm workload and
manual-switch timers, pump the event loop, then check cross-node invariants
and collect the raw material for reports.

Invariants checked over honest nodes (everything except declared Byzantine
nodes; crashed nodes are honest, just behind):

* each ledger's hash chain verifies,
* every pair of ledgers agrees on their common prefix,
* at most one leader per (era, term),
* every activation snapshot is a prefix of the final ledger.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .faults import CRASH
from .ledger import Command
from .node import NodeHarness
from .scenario import Scenario, ScenarioError, apply_overrides, parse_scenario
from .simcore import Delivery, MessageStats, Simulator, TraceRecorder

CLIENT_BASE = 100
_N_CLIENTS = 3

# run comparisons hold these fixed so the variants stay comparable
FORBIDDEN_VARY = ("cluster.n", "cluster.f", "cluster.seed", "cluster.duration")


@dataclass
class RunResult:
    scenario: Scenario
    harnesses: list[NodeHarness]
    stats: MessageStats
    submit_ticks: dict[tuple[int, int], int]
    commit_ticks: dict[tuple[int, int], int]   # earliest honest commit
    switches: list[dict]
    violations: list[str]
    honest: list[int]
    trace_events: list[dict] | None = None
    final_tick: int = 0


def workload_schedule(sc: Scenario) -> list[tuple[int, Command, int]]:
    """Deterministic client schedule: (tick, command, target node)."""
    if sc.workload_rate <= 0:
        return []
    stop = sc.workload_stop or sc.duration
    interval = 1000.0 / sc.workload_rate
    out = []
    i = 0
    while True:
        tick = sc.workload_start + int(round(i * interval))
        if tick >= stop:
            break
        cmd = Command(CLIENT_BASE + i % _N_CLIENTS, i)
        out.append((max(tick, 1), cmd, _inject_node(sc, i, tick)))
        i += 1
    return out


def _inject_node(sc: Scenario, i: int, tick: int) -> int:
    """Rotate commands across nodes, stepping over nodes that are down at
    injection time (a real client would retry elsewhere)."""
    for off in range(sc.n):
        node = (i + off) % sc.n
        spec = sc.faults.for_node(node)
        if spec is None or spec.kind != CRASH:
            return node
        if not (spec.start <= tick and (spec.end is None or tick < spec.end)):
            return node
    return i % sc.n


def build_cluster(sc: Scenario, *, collect_trace: bool = False
                  ) -> tuple[Simulator, list[NodeHarness]]:
    trace = TraceRecorder() if collect_trace else None
    sim = Simulator(sc.n, sc.channel, sc.seed, trace=trace, stats=MessageStats())
    policy = sc.resolved_policy()
    harnesses = [
        NodeHarness(i, sc.n, sc.f, sim, sc.protocol, policy,
                    fault=sc.faults.for_node(i),
                    raft_cfg=sc.raft_cfg, hs_cfg=sc.hs_cfg,
                    probe_interval=sc.probe_interval,
                    report_interval=sc.report_interval,
                    alpha=sc.alpha)
        for i in range(sc.n)
    ]
    return sim, harnesses


def run_scenario(sc: Scenario, *, collect_trace: bool = False) -> RunResult:
    errs = sc.validate()
    if errs:
        raise ScenarioError(errs)
    sim, harnesses = build_cluster(sc, collect_trace=collect_trace)
    for h in harnesses:
        h.start()

    submit_ticks: dict[tuple[int, int], int] = {}
    for tick, cmd, node in workload_schedule(sc):
        sim.set_timer(node, tick, ("client.inject", cmd.client, cmd.seq, cmd.payload))
        submit_ticks[(cmd.client, cmd.seq)] = tick
    for tick, target, initiator in sc.manual_switches:
        sim.set_timer(initiator, max(tick, 1), ("switch.manual", target.value))

    while True:
        nxt = sim.peek_next_tick()
        if nxt is None or nxt > sc.duration:
            break
        for ev in sim.step():
            h = harnesses[ev.node]
            if isinstance(ev, Delivery):
                h.on_delivery(ev)
            else:
                h.on_timer(ev)
    final_tick = sim.now
    sim.finalize()

    byz = set(sc.faults.byz_nodes())
    honest = [i for i in range(sc.n) if i not in byz]
    commit_ticks: dict[tuple[int, int], int] = {}
    for i in honest:
        for tick, entry, _adopted in harnesses[i].commits:
            if entry.cmd.client < 0:
                continue  # protocol no-op
            key = (entry.cmd.client, entry.cmd.seq)
            if key not in commit_ticks or tick < commit_ticks[key]:
                commit_ticks[key] = tick

    return RunResult(
        scenario=sc,
        harnesses=harnesses,
        stats=sim.stats,
        submit_ticks=submit_ticks,
        commit_ticks=commit_ticks,
        switches=collect_switches(harnesses, honest),
        violations=check_invariants(harnesses, honest),
        honest=honest,
        trace_events=sim.trace.events if sim.trace is not None else None,
        final_tick=final_tick,
    )


def collect_switches(harnesses: list[NodeHarness], honest: list[int]) -> list[dict]:
    """One record per completed era change, stamped with the earliest honest
    activation tick."""
    by_era: dict[int, dict] = {}
    for i in honest:
        for rec in harnesses[i].switch_history:
            cur = by_era.get(rec["era"])
            if cur is None or rec["tick"] < cur["tick"]:
                by_era[rec["era"]] = dict(rec)
    return [by_era[e] for e in sorted(by_era)]


def check_invariants(harnesses: list[NodeHarness], honest: list[int]) -> list[str]:
    v: list[str] = []
    hs = [harnesses[i] for i in honest]
    for h in hs:
        if not h.ledger.verify_chain():
            v.append(f"node {h.node_id}: ledger hash chain broken")
    for a, b in itertools.combinations(hs, 2):
        m = min(a.ledger.height, b.ledger.height)
        if a.ledger.hash_at(m) != b.ledger.hash_at(m):
            v.append(f"nodes {a.node_id},{b.node_id}: divergent prefix at height {m}")
    leaders: dict[tuple[int, int], int] = {}
    for h in hs:
        for era, term in h.leader_terms:
            prev = leaders.setdefault((era, term), h.node_id)
            if prev != h.node_id:
                v.append(f"election safety: era {era} term {term} won by both "
                         f"{prev} and {h.node_id}")
    for h in hs:
        for era, (height, head) in sorted(h.activation_snapshots.items()):
            if h.ledger.height < height or h.ledger.hash_at(height) != head:
                v.append(f"node {h.node_id}: era {era} activation snapshot is "
                         "not a prefix of its final ledger")
    return v


def parse_vary(spec: str) -> dict[str, str]:
    """One comparison variant: comma-separated section.key=value pairs."""
    overrides: dict[str, str] = {}
    for pair in spec.split(","):
        dotted, _, val = pair.partition("=")
        dotted, val = dotted.strip(), val.strip()
        if not dotted or not val:
            raise ScenarioError([f"vary {pair!r}: expected section.key=value"])
        if dotted in FORBIDDEN_VARY:
            raise ScenarioError([f"vary {dotted}: held fixed across compared runs"])
        overrides[dotted] = val
    return overrides


def compare_runs(sc_text: str, variants: list[str],
                 *, collect_trace: bool = False) -> dict[str, RunResult]:
    """Run the scenario as written ("base") plus one run per variant."""
    results = {"base": run_scenario(parse_scenario(sc_text),
                                    collect_trace=collect_trace)}
    for spec in variants:
        text = apply_overrides(sc_text, parse_vary(spec))
        results[spec] = run_scenario(parse_scenario(text),
                                     collect_trace=collect_trace)
    return results


__all__ = [
    "RunResult", "run_scenario", "build_cluster", "compare_runs",
    "workload_schedule", "check_invariants", "collect_switches", "parse_vary",
    "FORBIDDEN_VARY", "CLIENT_BASE",
]

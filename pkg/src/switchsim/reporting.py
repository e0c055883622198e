"""Turn a finished run into numbers: a flat report dataclass plus JSON,
CSV, and trace JSONL serializers.

JSON is the canonical round-trippable form (sorted keys, so identical runs
serialize byte-identically).  The CSV is a flat metric,value export for
spreadsheets: scalar fields become one row each, dicts of scalars become
dotted rows, and structured fields are embedded as JSON strings.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .runner import RunResult
from .switching import ABORTED, SUPPRESSED


@dataclass
class RunReport:
    scenario_name: str
    seed: int
    n: int
    f: int
    duration: int
    final_tick: int
    initial_protocol: str
    submitted: int
    committed: int
    noop_commits: int
    latency_p50: float | None
    latency_p95: float | None
    latency_max: float | None
    throughput: float                    # committed commands per 1000 ticks
    mode_shares: dict[str, float] = field(default_factory=dict)
    switches: list[dict] = field(default_factory=list)
    switch_counts: dict[str, int] = field(default_factory=dict)
    node_states: list[dict] = field(default_factory=list)
    suspected: dict[str, list[int]] = field(default_factory=dict)
    refused_nodes: list[int] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    message_stats: dict = field(default_factory=dict)


def percentile(values: list[float], q: float) -> float | None:
    """Nearest-rank percentile; None on empty input."""
    if not values:
        return None
    ordered = sorted(values)
    idx = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
    return float(ordered[idx])


def mode_timeline(initial: str, switches: list[dict], end: int
                  ) -> list[tuple[int, str]]:
    timeline = [(0, initial)]
    for s in switches:
        timeline.append((s["tick"], s["target"]))
    timeline.append((end, timeline[-1][1]))
    return timeline


def _mode_shares(initial: str, switches: list[dict], end: int) -> dict[str, float]:
    shares: dict[str, float] = {}
    tl = mode_timeline(initial, switches, end)
    span = max(end, 1)
    for (t0, mode), (t1, _) in zip(tl, tl[1:]):
        shares[mode] = shares.get(mode, 0.0) + max(t1 - t0, 0) / span
    return {m: round(v, 6) for m, v in sorted(shares.items())}


def build_report(result: RunResult) -> RunReport:
    sc = result.scenario
    latencies = [float(result.commit_ticks[k] - result.submit_ticks[k])
                 for k in result.commit_ticks if k in result.submit_ticks]
    noop_keys = set()
    aborted = suppressed = 0
    suspected: dict[str, list[int]] = {}
    refused = []
    for i in result.honest:
        h = result.harnesses[i]
        for _tick, entry, _adopted in h.commits:
            if entry.cmd.client < 0:
                noop_keys.add((entry.cmd.client, entry.cmd.seq))
        for rec in h.engine.log:
            if rec.outcome == ABORTED:
                aborted += 1
            elif rec.outcome == SUPPRESSED:
                suppressed += 1
        if h.monitor.suspected:
            suspected[str(i)] = sorted(h.monitor.suspected)
        if h.engine.refused:
            refused.append(i)
    end = max(result.final_tick, 1)
    return RunReport(
        scenario_name=sc.name,
        seed=sc.seed,
        n=sc.n,
        f=sc.f,
        duration=sc.duration,
        final_tick=result.final_tick,
        initial_protocol=sc.protocol.value,
        submitted=len(result.submit_ticks),
        committed=len(result.commit_ticks),
        noop_commits=len(noop_keys),
        latency_p50=percentile(latencies, 0.50),
        latency_p95=percentile(latencies, 0.95),
        latency_max=max(latencies) if latencies else None,
        throughput=round(len(result.commit_ticks) * 1000.0 / end, 3),
        mode_shares=_mode_shares(sc.protocol.value, result.switches, end),
        switches=[dict(s) for s in result.switches],
        switch_counts={"completed": len(result.switches),
                       "aborted": aborted, "suppressed": suppressed},
        node_states=[result.harnesses[i].node_state() for i in range(sc.n)],
        suspected=suspected,
        refused_nodes=refused,
        violations=list(result.violations),
        message_stats=result.stats.as_dict(),
    )


# ---- JSON

def report_to_json(report: RunReport) -> str:
    return json.dumps(asdict(report), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> RunReport:
    return RunReport(**json.loads(text))


# ---- CSV

_FLAT_DICT_FIELDS = ("mode_shares", "switch_counts")
_JSON_FIELDS = ("switches", "node_states", "suspected", "refused_nodes",
                "violations", "message_stats")


def report_to_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    data = asdict(report)
    for key in sorted(data):
        val = data[key]
        if key in _FLAT_DICT_FIELDS:
            for sub in sorted(val):
                w.writerow((f"{key}.{sub}", val[sub]))
        elif key in _JSON_FIELDS:
            w.writerow((key, json.dumps(val, sort_keys=True)))
        else:
            w.writerow((key, "" if val is None else val))
    return buf.getvalue()


def parse_csv(text: str) -> dict:
    """Read a metric,value CSV back into a flat dict (dotted keys kept flat,
    JSON-embedded fields decoded)."""
    out: dict = {}
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header != ["metric", "value"]:
        raise ValueError("expected metric,value header")
    for metric, value in rows:
        if metric in _JSON_FIELDS:
            out[metric] = json.loads(value)
        elif value == "":
            out[metric] = None
        else:
            try:
                out[metric] = int(value)
            except ValueError:
                try:
                    out[metric] = float(value)
                except ValueError:
                    out[metric] = value
    return out


def report_from_csv(text: str) -> RunReport:
    flat = parse_csv(text)
    data: dict = {}
    for key, val in flat.items():
        section, _, sub = key.partition(".")
        if sub and section in _FLAT_DICT_FIELDS:
            data.setdefault(section, {})[sub] = val
        else:
            data[key] = val
    for fld in _FLAT_DICT_FIELDS:
        data.setdefault(fld, {})
    return RunReport(**data)


# ---- trace

def trace_to_jsonl(events: list[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)


def write_trace(events: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace_to_jsonl(events))

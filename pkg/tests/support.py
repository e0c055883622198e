"""Shared helpers for the test suite."""

import random

from switchsim.scenario import parse_scenario
from switchsim.runner import run_scenario


class StubCtx:
    """Minimal protocol context: records sends, timers, and commits so a
    protocol node can be driven directly without a simulator."""

    def __init__(self, seed: int = 1, now: int = 0):
        self.now = now
        self.rng = random.Random(seed)
        self.sent: list[tuple[int, object]] = []
        self.timers: list[tuple[int, tuple]] = []
        self.cancelled: list[int] = []
        self.committed: list = []
        self.committed_keys: set = set()
        self.forwarded: list[tuple[int, object]] = []
        self.leader_wins: list[int] = []
        self.view_results: list[tuple[int, bool]] = []
        self.traces: list[tuple[str, dict]] = []
        self._next_timer = 0

    def set_timer(self, delay: int, tag: tuple) -> int:
        self._next_timer += 1
        self.timers.append((self.now + delay, tag))
        return self._next_timer

    def cancel_timer(self, timer_id: int) -> None:
        self.cancelled.append(timer_id)

    def send(self, dst: int, msg) -> None:
        self.sent.append((dst, msg))

    def commit(self, entry) -> None:
        self.committed.append(entry)
        self.committed_keys.add((entry.cmd.client, entry.cmd.seq))

    def is_committed(self, key) -> bool:
        return key in self.committed_keys

    def forward_command(self, leader: int, cmd) -> None:
        self.forwarded.append((leader, cmd))

    def leader_elected(self, term: int) -> None:
        self.leader_wins.append(term)

    def view_outcome(self, view: int, success: bool) -> None:
        self.view_results.append((view, success))

    def trace(self, kind: str, data: dict) -> None:
        self.traces.append((kind, data))

    def drain(self) -> list[tuple[int, object]]:
        out = self.sent
        self.sent = []
        return out


def scenario_text(n=4, f=1, protocol="RAFT", duration=3000, seed=1,
                  loss=0.0, latency="fixed:2", rate=20.0, channel_lines=(),
                  workload_lines=(), policy_lines=(), fault_lines=(),
                  switch_lines=(), extra=""):
    parts = [
        "[cluster]",
        f"n = {n}",
        f"f = {f}",
        f"protocol = {protocol}",
        f"duration = {duration}",
        f"seed = {seed}",
        "",
        "[channel]",
        f"loss_prob = {loss}",
        f"latency = {latency}",
        *channel_lines,
        "",
        "[workload]",
        f"rate = {rate}",
        *workload_lines,
    ]
    if policy_lines:
        parts += ["", "[policy]", *policy_lines]
    if fault_lines:
        parts += ["", "[faults]", *fault_lines]
    if switch_lines:
        parts += ["", "[switches]", *switch_lines]
    if extra:
        parts += ["", extra]
    return "\n".join(parts) + "\n"


def quick_run(text, collect_trace=False):
    return run_scenario(parse_scenario(text), collect_trace=collect_trace)

"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class ScenarioIn(BaseModel):
    scenario_text: str


class ValidateOut(BaseModel):
    valid: bool
    errors: list[str] = Field(default_factory=list)


class RunIn(BaseModel):
    scenario_text: str
    seed: int | None = None
    include_trace: bool = False


class SwitchOut(BaseModel):
    era: int
    tick: int
    target: str
    trigger: str
    cp_height: int
    attempt: int
    initiator: int
    decided_tick: int


class ReportOut(BaseModel):
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
    throughput: float
    mode_shares: dict[str, float]
    switches: list[SwitchOut]
    switch_counts: dict[str, int]
    node_states: list[dict]
    suspected: dict[str, list[int]]
    refused_nodes: list[int]
    violations: list[str]
    message_stats: dict


class RunOut(BaseModel):
    report: ReportOut
    safety_ok: bool
    trace: list[dict] | None = None


class CompareIn(BaseModel):
    scenario_text: str
    vary: list[str]
    seed: int | None = None


class CompareOut(BaseModel):
    runs: dict[str, ReportOut]
    safety_ok: bool


class HealthOut(BaseModel):
    status: str
    version: str

"""HTTP front end over the simulator: validate scenarios, execute runs,
and compare variants.  Runs execute synchronously inside the request (the
simulator is single-threaded and desk-scale by design)."""

from __future__ import annotations

from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from ..reporting import build_report
from ..runner import compare_runs, run_scenario
from ..scenario import ScenarioError, apply_overrides, parse_scenario
from .schemas import (
    CompareIn, CompareOut, HealthOut, ReportOut, RunIn, RunOut, ScenarioIn,
    ValidateOut,
)

_VERSION = "0.1.0"


def _with_seed(text: str, seed: int | None) -> str:
    if seed is None:
        return text
    return apply_overrides(text, {"cluster.seed": str(seed)})


def create_app() -> FastAPI:
    app = FastAPI(title="switchsim", version=_VERSION)

    @app.get("/healthz", response_model=HealthOut)
    def healthz() -> HealthOut:
        return HealthOut(status="ok", version=_VERSION)

    @app.post("/scenarios/validate", response_model=ValidateOut)
    def validate(req: ScenarioIn) -> ValidateOut:
        try:
            parse_scenario(req.scenario_text)
        except ScenarioError as e:
            return ValidateOut(valid=False, errors=e.errors)
        return ValidateOut(valid=True)

    @app.post("/runs", response_model=RunOut, response_model_exclude_none=False)
    def run(req: RunIn) -> RunOut:
        try:
            sc = parse_scenario(_with_seed(req.scenario_text, req.seed))
        except ScenarioError as e:
            raise HTTPException(status_code=400, detail=e.errors) from None
        result = run_scenario(sc, collect_trace=req.include_trace)
        report = build_report(result)
        return RunOut(report=ReportOut(**asdict(report)),
                      safety_ok=not report.violations,
                      trace=result.trace_events)

    @app.post("/compare", response_model=CompareOut)
    def compare(req: CompareIn) -> CompareOut:
        try:
            text = _with_seed(req.scenario_text, req.seed)
            results = compare_runs(text, req.vary)
        except ScenarioError as e:
            raise HTTPException(status_code=400, detail=e.errors) from None
        reports = {label: ReportOut(**asdict(build_report(res)))
                   for label, res in results.items()}
        ok = all(not r.violations for r in reports.values())
        return CompareOut(runs=reports, safety_ok=ok)

    return app


app = create_app()

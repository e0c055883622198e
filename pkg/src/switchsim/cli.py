"""Command line front end.

Every command talks to the HTTP API: by default the app is driven
in-process (no socket involved), while --server points the same calls at a
remote instance.  ``serve`` starts that instance.

Exit codes: 0 run complete and safety checks passed, 2 safety violation,
3 invalid scenario, 1 transport or server failure.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys

import httpx

from .reporting import RunReport, report_to_csv, report_to_json, trace_to_jsonl

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SAFETY = 2
EXIT_INVALID = 3

OUT_DIR_ENV = "SWITCHSIM_OUT_DIR"


def call_api(method: str, path: str, payload: dict | None,
             server: str | None) -> tuple[int, dict]:
    async def go() -> tuple[int, dict]:
        if server:
            client = httpx.AsyncClient(base_url=server.rstrip("/"), timeout=None)
        else:
            from .service import app
            client = httpx.AsyncClient(transport=httpx.ASGITransport(app=app),
                                       base_url="http://sim", timeout=None)
        async with client:
            resp = await client.request(method, path, json=payload)
            return resp.status_code, resp.json()

    return asyncio.run(go())


def _read_scenario(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _out_path(path: str) -> str:
    base = os.environ.get(OUT_DIR_ENV, "")
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _write_report(path: str, report: dict) -> None:
    rep = RunReport(**report)
    text = report_to_csv(rep) if path.endswith(".csv") else report_to_json(rep)
    with open(_out_path(path), "w", encoding="utf-8") as fh:
        fh.write(text)


def _summary_line(report: dict) -> str:
    lat = report["latency_p50"]
    lat_str = "n/a" if lat is None else f"{lat:.0f}"
    return (f"{report['scenario_name']} seed={report['seed']}: "
            f"{report['committed']}/{report['submitted']} committed, "
            f"{report['switch_counts']['completed']} switches, "
            f"p50 {lat_str} ticks, "
            f"{'safety OK' if not report['violations'] else 'SAFETY VIOLATED'}")


def cmd_check(args: argparse.Namespace) -> int:
    text = _read_scenario(args.scenario)
    status, body = call_api("POST", "/scenarios/validate",
                            {"scenario_text": text}, args.server)
    if status != 200:
        print(f"server error: {body}", file=sys.stderr)
        return EXIT_ERROR
    if not body["valid"]:
        for err in body["errors"]:
            print(err, file=sys.stderr)
        return EXIT_INVALID
    print("scenario OK")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    text = _read_scenario(args.scenario)
    payload = {"scenario_text": text, "seed": args.seed,
               "include_trace": bool(args.trace)}
    status, body = call_api("POST", "/runs", payload, args.server)
    if status == 400:
        for err in body.get("detail", []):
            print(err, file=sys.stderr)
        return EXIT_INVALID
    if status != 200:
        print(f"server error: {body}", file=sys.stderr)
        return EXIT_ERROR
    report = body["report"]
    if args.trace:
        with open(_out_path(args.trace), "w", encoding="utf-8") as fh:
            fh.write(trace_to_jsonl(body["trace"] or []))
    if args.report:
        _write_report(args.report, report)
    print(_summary_line(report))
    if report["violations"]:
        for v in report["violations"]:
            print(v, file=sys.stderr)
        return EXIT_SAFETY
    return EXIT_OK


_TABLE_COLS = ("committed", "throughput", "latency_p50", "latency_p95",
               "switches", "msgs_sent", "violations")


def _compare_table(runs: dict[str, dict]) -> str:
    rows = [("variant",) + _TABLE_COLS]
    for label, rep in runs.items():
        rows.append((
            label,
            str(rep["committed"]),
            str(rep["throughput"]),
            str(rep["latency_p50"]),
            str(rep["latency_p95"]),
            str(rep["switch_counts"]["completed"]),
            str(rep["message_stats"]["sent"]),
            str(len(rep["violations"])),
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
        for row in rows)


def cmd_compare(args: argparse.Namespace) -> int:
    text = _read_scenario(args.scenario)
    payload = {"scenario_text": text, "vary": args.vary, "seed": args.seed}
    status, body = call_api("POST", "/compare", payload, args.server)
    if status == 400:
        for err in body.get("detail", []):
            print(err, file=sys.stderr)
        return EXIT_INVALID
    if status != 200:
        print(f"server error: {body}", file=sys.stderr)
        return EXIT_ERROR
    runs = body["runs"]
    print(_compare_table(runs))
    if args.report:
        with open(_out_path(args.report), "w", encoding="utf-8") as fh:
            json.dump(runs, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if not body["safety_ok"]:
        for label, rep in runs.items():
            for v in rep["violations"]:
                print(f"{label}: {v}", file=sys.stderr)
        return EXIT_SAFETY
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("switchsim.service:app", host=args.host, port=args.port,
                log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="switchsim",
        description="deterministic consensus-switching cluster simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario file")
    run_p.add_argument("scenario", help="scenario file path")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--trace", metavar="PATH",
                       help="write the event trace as JSONL")
    run_p.add_argument("--report", metavar="PATH",
                       help="write the run report (.json or .csv)")
    run_p.add_argument("--server", metavar="URL",
                       help="send the run to a remote service")
    run_p.set_defaults(fn=cmd_run)

    cmp_p = sub.add_parser("compare", help="run policy/protocol variants side by side")
    cmp_p.add_argument("scenario", help="scenario file path")
    cmp_p.add_argument("--vary", action="append", required=True,
                       metavar="FIELD=VALUE[,...]",
                       help="one variant per flag, comma-separated overrides")
    cmp_p.add_argument("--seed", type=int, default=None)
    cmp_p.add_argument("--report", metavar="PATH",
                       help="write all variant reports as one JSON file")
    cmp_p.add_argument("--server", metavar="URL")
    cmp_p.set_defaults(fn=cmd_compare)

    chk_p = sub.add_parser("check", help="validate a scenario file")
    chk_p.add_argument("scenario", help="scenario file path")
    chk_p.add_argument("--server", metavar="URL")
    chk_p.set_defaults(fn=cmd_check)

    srv_p = sub.add_parser("serve", help="start the HTTP service")
    srv_p.add_argument("--host", default="127.0.0.1")
    srv_p.add_argument("--port", type=int, default=8000)
    srv_p.set_defaults(fn=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"cannot read scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    except httpx.HTTPError as e:
        print(f"request failed: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

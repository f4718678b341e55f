"""Command line for running scenarios, verifying exports and driving a gateway.

Local commands (run, verify, scenarios) need no server.  Remote commands talk
to a gateway over HTTP; the base URL comes from --url or FLOWLEDGER_URL.

Exit codes: 0 success, 1 operation failed, 2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

from flowledger.simnet.scenario import (
    ScenarioSpec,
    load_scenario,
    run_scenario,
    scenario_names,
)

DEFAULT_URL = "http://127.0.0.1:8080"


def _emit(doc) -> None:
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# -- local commands ---------------------------------------------------------------------


def cmd_scenarios(_args) -> int:
    _emit({"scenarios": scenario_names()})
    return 0


def _spec_from_args(args) -> ScenarioSpec:
    spec = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.defense is not None:
        overrides["defense"] = args.defense
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    return dataclasses.replace(spec, **overrides) if overrides else spec


def cmd_run(args) -> int:
    try:
        spec = _spec_from_args(args)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    runtime = run_scenario(spec)
    summary = runtime.summary()
    if args.out:
        summary["outputs"] = runtime.write_outputs(args.out)
    _emit(summary)
    return 0


def cmd_verify(args) -> int:
    try:
        with open(args.chain) as fh:
            from flowledger.chain.ledger import verify_export
            ok, errors = verify_export(fh)
    except OSError as exc:
        return _fail(str(exc))
    _emit({"ok": ok, "errors": errors})
    return 0 if ok else 1


def cmd_serve(args) -> int:
    import uvicorn

    from flowledger.gateway.service import Gateway, create_app

    try:
        spec = load_scenario(args.scenario)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))
    gateway = Gateway(spec, rate=args.rate)
    app = create_app(gateway, frontend_dir=args.frontend)
    gateway.start()
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    finally:
        gateway.stop()
    return 0


# -- remote commands ----------------------------------------------------------------------


def _request(args, method: str, path: str, body: Optional[dict] = None) -> int:
    import httpx

    url = args.url.rstrip("/") + path
    try:
        resp = httpx.request(method, url, json=body, timeout=30.0)
    except httpx.HTTPError as exc:
        return _fail(f"{url}: {exc}")
    try:
        doc = resp.json()
    except ValueError:
        doc = {"body": resp.text}
    if resp.status_code >= 400:
        print(f"error: HTTP {resp.status_code}", file=sys.stderr)
        json.dump(doc, sys.stderr, indent=2, sort_keys=True)
        sys.stderr.write("\n")
        return 1
    _emit(doc)
    return 0


def cmd_head(args) -> int:
    return _request(args, "GET", "/chain/head")


def cmd_block(args) -> int:
    return _request(args, "GET", f"/chain/blocks/{args.height}")


def cmd_tx(args) -> int:
    return _request(args, "GET", f"/chain/tx/{args.tx_hash}")


def cmd_registry(args) -> int:
    return _request(args, "GET", "/registry")


def cmd_topology(args) -> int:
    return _request(args, "GET", "/topology")


def cmd_mapping(args) -> int:
    return _request(args, "GET", "/mapping")


def cmd_events(args) -> int:
    return _request(args, "GET",
                    f"/events?from_seq={args.from_seq}&limit={args.limit}")


def cmd_intents(args) -> int:
    return _request(args, "GET", "/intents")


def cmd_intent_submit(args) -> int:
    return _request(args, "POST", "/intents", {
        "verb": args.verb, "target": args.target,
        "preference": args.preference})


def cmd_intent_report(args) -> int:
    return _request(args, "GET", f"/intents/{args.intent_id}/report")


def cmd_remap(args) -> int:
    return _request(args, "POST", "/mapping/remap", {
        "switch_id": args.switch_id, "controller_id": args.controller_id})


def cmd_evict(args) -> int:
    return _request(args, "POST", f"/elements/{args.element_id}/evict",
                    {"reason": args.reason})


def cmd_capture(args) -> int:
    return _request(args, "POST", "/capture", {"policy": args.policy})


def cmd_remote_run(args) -> int:
    body: dict = {"scenario": args.scenario}
    if args.seed is not None:
        body["seed"] = args.seed
    if args.defense is not None:
        body["defense"] = args.defense
    if args.duration is not None:
        body["duration_s"] = args.duration
    return _request(args, "POST", "/scenarios/run", body)


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowledger",
        description="Blockchain-backed SDN middleware: scenarios, exports, gateway")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(fn=cmd_scenarios)

    p = sub.add_parser("run", help="run a scenario to completion locally")
    p.add_argument("--scenario", required=True,
                   help="bundled name or path to a scenario file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--defense", choices=["none", "auto_block", "intent_ladder"],
                   default=None)
    p.add_argument("--duration", type=float, default=None,
                   help="override duration_s")
    p.add_argument("--out", default=None,
                   help="directory for trace.csv, events.ndjson, chain.ndjson, summary.json")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("verify", help="re-verify an exported chain file")
    p.add_argument("chain", help="path to a chain.ndjson export")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("serve", help="serve the HTTP gateway over a live runtime")
    p.add_argument("--scenario", default="quiet")
    p.add_argument("--host", default=os.environ.get("FLOWLEDGER_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int,
                   default=int(os.environ.get("FLOWLEDGER_PORT", "8080")))
    p.add_argument("--rate", type=float, default=1.0,
                   help="virtual seconds per wall second")
    p.add_argument("--frontend", default=None,
                   help="directory with the operator console to mount at /ui")
    p.set_defaults(fn=cmd_serve)

    def remote(name: str, help_text: str):
        rp = sub.add_parser(name, help=help_text)
        rp.add_argument("--url", default=os.environ.get("FLOWLEDGER_URL",
                                                        DEFAULT_URL))
        return rp

    remote("head", "chain head").set_defaults(fn=cmd_head)
    p = remote("block", "fetch one block")
    p.add_argument("height", type=int)
    p.set_defaults(fn=cmd_block)
    p = remote("tx", "fetch one transaction")
    p.add_argument("tx_hash")
    p.set_defaults(fn=cmd_tx)
    remote("registry", "registered elements").set_defaults(fn=cmd_registry)
    remote("topology", "network topology").set_defaults(fn=cmd_topology)
    remote("mapping", "switch-to-controller mapping").set_defaults(fn=cmd_mapping)
    p = remote("events", "poll the event feed")
    p.add_argument("--from-seq", dest="from_seq", type=int, default=0)
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(fn=cmd_events)
    remote("intents", "list intents").set_defaults(fn=cmd_intents)
    p = remote("intent-submit", "submit an intent")
    p.add_argument("verb")
    p.add_argument("target")
    p.add_argument("--preference", default="none")
    p.set_defaults(fn=cmd_intent_submit)
    p = remote("intent-report", "full intent report")
    p.add_argument("intent_id")
    p.set_defaults(fn=cmd_intent_report)
    p = remote("remap", "move a switch to another controller")
    p.add_argument("switch_id")
    p.add_argument("controller_id")
    p.set_defaults(fn=cmd_remap)
    p = remote("evict", "evict an element from the deployment")
    p.add_argument("element_id")
    p.add_argument("--reason", default="operator request")
    p.set_defaults(fn=cmd_evict)
    p = remote("capture", "set the control-plane capture policy")
    p.add_argument("policy")
    p.set_defaults(fn=cmd_capture)
    p = remote("remote-run", "run a scenario on the gateway")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--defense", default=None)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(fn=cmd_remote_run)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

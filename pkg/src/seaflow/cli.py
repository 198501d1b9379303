"""Command line: run scenarios, query a journal, issue tokens, serve."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import math
import sys
import time
from pathlib import Path

from seaflow.access import AccessError, Action, Grant, IdentityProvider, PrincipalStore
from seaflow.broker.core import NotAuthorized
from seaflow.dataspace import DataSpace
from seaflow.scenario import ReportFormat, bundled_scenarios, execute, load_scenario, report
from seaflow.sim.model import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SLO = 2
EXIT_ACCESS = 3


def _speedup(text: str) -> float:
    if text.lower() in ("inf", "∞", "infinity"):
        return math.inf
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("speedup must be > 0")
    return value


def parse_grant(text: str) -> Grant:
    """``action:topic/filter`` or ``action:@cat1,cat2``."""
    action, sep, scope = text.partition(":")
    if not sep or not scope:
        raise argparse.ArgumentTypeError(f"grant {text!r} is not action:scope")
    try:
        if scope.startswith("@"):
            return Grant.for_categories(action, scope[1:].split(","))
        return Grant.topics(action, scope)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seaflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run a scenario on the virtual clock")
    run.add_argument("--config", required=True,
                     help="scenario JSON file or bundled name (e.g. combined)")
    run.add_argument("--seed", type=int)
    run.add_argument("--duration", type=float, help="virtual seconds")
    run.add_argument("--speedup", type=_speedup, default=math.inf,
                     help="virtual seconds per wall second (default: inf)")
    run.add_argument("--metrics-out", type=Path)
    run.add_argument("--report-json", type=Path)
    run.add_argument("--journal", type=Path, help="JSON-lines data space journal")
    run.add_argument("--event-log", type=Path, help="JSON-lines simulator event log")
    run.add_argument("--format", choices=[f.value for f in ReportFormat], default="Text")
    run.add_argument("--fail-on-slo", action="store_true")

    sub.add_parser("scenarios", help="list bundled scenarios")

    query = sub.add_parser("query", help="query a data space journal")
    query.add_argument("--journal", type=Path, required=True)
    query.add_argument("--principals", type=Path, required=True)
    query.add_argument("--token", required=True)
    query.add_argument("--org")
    query.add_argument("--platform")
    query.add_argument("--parameter")
    query.add_argument("--category", action="append")
    query.add_argument("--from", dest="time_from", help="ISO-8601 or epoch ms")
    query.add_argument("--to", dest="time_to", help="ISO-8601 or epoch ms")
    query.add_argument("--include-quarantined", action="store_true")

    token = sub.add_parser("token", help="issue a signed token (secret from the environment)")
    token.add_argument("--principals", type=Path, required=True)
    token.add_argument("--principal", required=True)
    token.add_argument("--grant", type=parse_grant, action="append", required=True,
                       help="action:topic/filter or action:@category[,category]")
    token.add_argument("--ttl", type=float, default=86_400.0)

    serve = sub.add_parser("serve", help="run the broker, push, metrics and query endpoints")
    serve.add_argument("--principals", type=Path, required=True)
    serve.add_argument("--journal", type=Path)
    serve.add_argument("--config", help="scenario whose orgs, QC and triage settings to use")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--mqtt-port", type=int, default=1883,
                       help="ingestion broker port; the core broker listens on the next one")
    serve.add_argument("--http-port", type=int, default=8080)
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.config)
    overrides = {"seed": args.seed, "duration_s": args.duration}
    started = time.monotonic()
    run = execute(cfg, overrides, event_log=args.event_log, journal=args.journal,
                  speedup=args.speedup)
    result = run.report
    sys.stdout.buffer.write(report(result, args.format))
    if args.report_json:
        args.report_json.write_bytes(report(result, ReportFormat.JSON))
    if args.metrics_out:
        args.metrics_out.write_text(result.metrics)
    logging.getLogger(__name__).info("run took %.2f s wall", time.monotonic() - started)
    if args.fail_on_slo and result.slo_breaches:
        for breach in result.slo_breaches:
            print(breach, file=sys.stderr)
        return EXIT_SLO
    return EXIT_OK


def _idp(principals: Path) -> IdentityProvider:
    store = PrincipalStore.load(principals)
    return IdentityProvider.from_env(store, lambda: int(time.time() * 1000))


def cmd_query(args: argparse.Namespace) -> int:
    from seaflow.service import selector_from_params

    idp = _idp(args.principals)
    identity = idp.authenticate(args.token)
    params = {k: v for k, v in (("org", args.org), ("platform", args.platform),
                                ("parameter", args.parameter), ("from", args.time_from),
                                ("to", args.time_to)) if v is not None}
    if args.category:
        params["category"] = ",".join(args.category)
    if args.include_quarantined:
        params["include_quarantined"] = "true"
    store = DataSpace(args.journal)
    for obs in store.query(selector_from_params(params), identity):
        print(obs.to_json())
    return EXIT_OK


def cmd_token(args: argparse.Namespace) -> int:
    idp = _idp(args.principals)
    print(idp.issue(args.principal, args.grant, args.ttl).encode())
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from seaflow.service import Service, ServiceConfig

    cfg = ServiceConfig(host=args.host, mqtt_port=args.mqtt_port, http_port=args.http_port)
    if args.config:
        scenario = load_scenario(args.config)
        cfg.broker = scenario.broker
        cfg.qc = scenario.qc
        cfg.triage = scenario.triage
        cfg.org_formats = {o.org_id: o.wire_format for o in scenario.organizations}
    service = Service(_idp(args.principals), DataSpace(args.journal), cfg)
    try:
        asyncio.run(service.serve_forever())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


COMMANDS = {"run": cmd_run, "query": cmd_query, "token": cmd_token, "serve": cmd_serve}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "scenarios":
        for name in bundled_scenarios():
            print(name)
        return EXIT_OK
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AccessError, NotAuthorized) as exc:
        print(f"access denied: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ACCESS
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

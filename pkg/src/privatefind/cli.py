"""Operator entry point.

    privatefind manufacture --count 3 --seed 1 --registry-out registry.jsonl
    privatefind run lost-and-found --out runs/demo
    privatefind audit runs/demo/transcript.jsonl runs/demo/scenario.txt
    privatefind serve --registry registry.jsonl --port 8470
    privatefind client search --url http://localhost:8470 --id <hex>

Exit codes: 0 success, 2 scenario failure, 3 audit failure, 4 parse error.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from importlib import resources
from pathlib import Path

from . import audit as audit_mod
from . import scenario as scenario_mod
from .finder import manufacture
from .server import ManufacturerRegistry, PrivateFindServer
from .transport import Transcript

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_AUDIT = 3
EXIT_PARSE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privatefind")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manufacture", help="provision finders and emit a server registry")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--registry-out", required=True)
    p.add_argument("--devices-out", help="also write full provisioning records (incl. addresses)")

    p = sub.add_parser("run", help="run a scenario script (bundled name or path)")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--epoch-ms", type=int)
    p.add_argument("--token-policy", choices=["off", "ingest", "search", "both"])
    p.add_argument("--mac-randomization", choices=["on", "off"])
    p.add_argument(
        "--drop-prob",
        action="append",
        default=[],
        metavar="P | radio=P | network=P",
        help="message drop probability (repeatable)",
    )
    p.add_argument("--out", help="output directory (default runs/<scenario>)")

    p = sub.add_parser("audit", help="privacy-audit a transcript against its scenario")
    p.add_argument("transcript")
    p.add_argument("scenario")

    p = sub.add_parser("serve", help="run the HTTP server service")
    p.add_argument("--registry", required=True)
    p.add_argument("--store", help="append-only persistence log")
    p.add_argument("--token-policy", choices=["off", "ingest", "search", "both"], default="off")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8470)

    p = sub.add_parser("client", help="thin HTTP client for a running service")
    csub = p.add_subparsers(dest="verb", required=True)

    c = csub.add_parser("register-init")
    c.add_argument("--url", required=True)
    c.add_argument("--id-init", required=True)

    c = csub.add_parser("submit")
    c.add_argument("--url", required=True)
    c.add_argument("--id-rand", required=True)
    c.add_argument("--e2e", required=True)
    c.add_argument("--token")

    c = csub.add_parser("search")
    c.add_argument("--url", required=True)
    c.add_argument("--id", action="append", required=True, dest="ids")
    c.add_argument("--token")

    for verb in ("mark-lost", "clear-lost"):
        c = csub.add_parser(verb)
        c.add_argument("--url", required=True)
        c.add_argument("--id", action="append", required=True, dest="ids")

    c = csub.add_parser("lost-ids")
    c.add_argument("--url", required=True)

    return parser


def cmd_manufacture(args) -> int:
    rng = random.Random(args.seed)
    registry = ManufacturerRegistry()
    devices = []
    for i in range(args.count):
        finder = manufacture(f"finder-{i:04d}", rng)
        registry.add(finder.state.id_init, finder.state.mf_key)
        devices.append(
            {
                "device_id": finder.device_id,
                "id_init": finder.state.id_init.hex(),
                "mf_key": finder.state.mf_key.hex(),
                "address": finder.link_address.hex,
            }
        )
    registry.save(args.registry_out)
    if args.devices_out:
        with open(args.devices_out, "w") as fh:
            for record in devices:
                fh.write(json.dumps(record) + "\n")
    print(f"provisioned {args.count} finders -> {args.registry_out}")
    return EXIT_OK


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("privatefind").joinpath("scenarios", f"{name}.txt")
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name!r}")


def _run_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epoch_ms is not None:
        overrides["epoch_ms"] = args.epoch_ms
    if args.token_policy is not None:
        overrides["token_policy"] = args.token_policy
    if args.mac_randomization is not None:
        overrides["mac_randomization"] = args.mac_randomization == "on"
    for spec in args.drop_prob:
        if "=" in spec:
            channel, prob = spec.split("=", 1)
            if channel not in ("radio", "network"):
                raise ValueError(f"unknown channel {channel!r}")
            overrides[f"drop_{channel}"] = float(prob)
        else:
            overrides["drop_radio"] = overrides["drop_network"] = float(spec)
    return overrides


def cmd_run(args) -> int:
    try:
        path = _resolve_scenario(args.scenario)
        scenario = scenario_mod.load_scenario(path)
        overrides = _run_overrides(args)
    except (FileNotFoundError, scenario_mod.ScenarioParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    result = scenario_mod.run_scenario(scenario, overrides)
    audit_result = audit_mod.audit_envelopes(list(result.world.loop.transcript), scenario)
    summary = dict(result.summary)
    summary["audit"] = audit_result.to_dict()

    out_dir = Path(args.out) if args.out else Path("runs") / scenario.config.name
    out_dir.mkdir(parents=True, exist_ok=True)
    result.world.loop.transcript.write_jsonl(out_dir / "transcript.jsonl")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "scenario.txt").write_text(path.read_text())

    for oid, info in summary["owners"].items():
        for report in info["verified_reports"]:
            print(
                f"{oid}: report lat_e7={report['lat_e7']} lon_e7={report['lon_e7']} "
                f"counter={report['counter']} anonymous={report['anonymous']}"
            )
        print(f"{oid}: {len(info['verified_reports'])} verified report(s)")
    print(f"audit: {audit_result.verdict}")
    if summary["error"]:
        err = summary["error"]
        print(f"scenario failed at line {err['line']}: {err['kind']}: {err['message']}", file=sys.stderr)
        return EXIT_SCENARIO
    if not audit_result.passed:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_audit(args) -> int:
    try:
        envelopes = Transcript.read_jsonl(args.transcript)
        scenario = scenario_mod.load_scenario(_resolve_scenario(args.scenario))
    except (FileNotFoundError, scenario_mod.ScenarioParseError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    result = audit_mod.audit_envelopes(envelopes, scenario)
    print(f"audit: {result.verdict}")
    for violation in result.violations:
        print(f"  {json.dumps(violation, sort_keys=True)}")
    return EXIT_OK if result.passed else EXIT_AUDIT


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    registry = ManufacturerRegistry.load(args.registry)
    server = PrivateFindServer(
        registry,
        random.Random(),
        token_policy=args.token_policy,
        store_path=args.store,
    )
    app = create_app(server)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def cmd_client(args) -> int:
    import httpx

    url = args.url.rstrip("/")
    if args.verb == "register-init":
        resp = httpx.post(f"{url}/register-init", json={"id_init": args.id_init})
    elif args.verb == "submit":
        body = {"id_rand": args.id_rand, "e2e_message": args.e2e}
        if args.token:
            body["token"] = args.token
        resp = httpx.post(f"{url}/reports", json=body)
    elif args.verb == "search":
        body = {"ids": args.ids}
        if args.token:
            body["token"] = args.token
        resp = httpx.post(f"{url}/search", json=body)
    elif args.verb == "mark-lost":
        resp = httpx.post(f"{url}/lost/mark", json={"ids": args.ids})
    elif args.verb == "clear-lost":
        resp = httpx.post(f"{url}/lost/clear", json={"ids": args.ids})
    elif args.verb == "lost-ids":
        resp = httpx.get(f"{url}/lost")
    else:  # pragma: no cover
        raise RuntimeError(args.verb)
    print(json.dumps(resp.json(), indent=2, sort_keys=True))
    return EXIT_OK if resp.is_success else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "manufacture":
        return cmd_manufacture(args)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "audit":
        return cmd_audit(args)
    if args.command == "serve":
        return cmd_serve(args)
    if args.command == "client":
        return cmd_client(args)
    return EXIT_OK  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())

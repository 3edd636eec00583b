"""Line-oriented scenario scripts and the world that executes them.

A scenario declares its actors, then drives them step by step: arm buttons,
run setups, move phones in and out of radio range, advance the clock, patrol,
submit, fetch. Everything is replayable: the same script and seed produce
byte-identical transcripts.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import wire
from .finder import Finder, manufacture
from .owner import Owner
from .reporter import Reporter
from .server import ManufacturerRegistry, PrivateFindServer
from .transport import SimNetwork


class ScenarioParseError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class StepAssertion(Exception):
    """A scenario self-check failed."""


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 1
    epoch_ms: int = 900_000
    token_policy: str = "off"
    mac_randomization: bool = False
    drop_radio: float = 0.0
    drop_network: float = 0.0


@dataclass(frozen=True)
class Step:
    lineno: int
    text: str
    op: str
    args: tuple[str, ...]


@dataclass
class Scenario:
    config: ScenarioConfig
    finders: dict[str, dict] = field(default_factory=dict)
    owners: dict[str, dict] = field(default_factory=dict)
    reporters: dict[str, dict] = field(default_factory=dict)
    servers: dict[str, dict] = field(default_factory=dict)
    steps: list[Step] = field(default_factory=list)

    @property
    def patrol_locations(self) -> list[wire.GeoLocation]:
        out = []
        for step in self.steps:
            if step.op == "patrol":
                out.append(wire.GeoLocation(int(step.args[1]), int(step.args[2])))
        return out


STEP_OPS = {
    "range",
    "press-button",
    "advance",
    "setup-local",
    "setup-verified",
    "request-token",
    "grant-token",
    "patrol",
    "submit",
    "fetch",
    "mark-lost",
    "clear-lost",
    "set-opt-out",
    "export",
    "import",
    "assert-reports",
    "assert-last-fetch",
    "assert-patrol",
    "assert-token",
    "assert-lost-ids",
}


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    scenario = Scenario(config=ScenarioConfig(name=name))
    cfg = scenario.config
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0], parts[1:]
        try:
            if op == "seed":
                cfg.seed = int(args[0])
            elif op == "epoch-ms":
                cfg.epoch_ms = int(args[0])
            elif op == "token-policy":
                if args[0] not in ("off", "ingest", "search", "both"):
                    raise ScenarioParseError(lineno, f"bad token policy {args[0]}")
                cfg.token_policy = args[0]
            elif op == "mac-randomization":
                cfg.mac_randomization = _onoff(lineno, args[0])
            elif op == "drop-prob":
                prob = float(args[1])
                if args[0] == "radio":
                    cfg.drop_radio = prob
                elif args[0] == "network":
                    cfg.drop_network = prob
                else:
                    raise ScenarioParseError(lineno, f"unknown channel {args[0]}")
            elif op == "finder":
                opts = {"mf_key": "no-mf-key" not in args[1:], "counterfeit": "counterfeit" in args[1:]}
                scenario.finders[args[0]] = opts
            elif op == "owner":
                opts = {"skew_ms": 0}
                rest = args[1:]
                while rest:
                    if rest[0] == "skew-ms":
                        opts["skew_ms"] = int(rest[1])
                        rest = rest[2:]
                    else:
                        raise ScenarioParseError(lineno, f"unknown owner option {rest[0]}")
                scenario.owners[args[0]] = opts
            elif op == "reporter":
                opts = {"prefilter": False, "owns": []}
                rest = args[1:]
                while rest:
                    if rest[0] == "prefilter":
                        opts["prefilter"] = True
                        rest = rest[1:]
                    elif rest[0] == "owns":
                        opts["owns"] = rest[1:]
                        rest = []
                    else:
                        raise ScenarioParseError(lineno, f"unknown reporter option {rest[0]}")
                scenario.reporters[args[0]] = opts
            elif op == "server":
                registry = args[2:] if len(args) > 1 and args[1] == "registry" else []
                scenario.servers[args[0]] = {"registry": registry}
            elif op in STEP_OPS:
                _validate_step(scenario, lineno, op, args)
                scenario.steps.append(Step(lineno, line, op, tuple(args)))
            else:
                raise ScenarioParseError(lineno, f"unknown directive {op!r}")
        except ScenarioParseError:
            raise
        except (IndexError, ValueError) as exc:
            raise ScenarioParseError(lineno, f"bad arguments for {op!r}: {exc}") from None
    return scenario


def _onoff(lineno: int, value: str) -> bool:
    if value == "on":
        return True
    if value == "off":
        return False
    raise ScenarioParseError(lineno, f"expected on|off, got {value!r}")


def _validate_step(scenario: Scenario, lineno: int, op: str, args: list[str]) -> None:
    phones = set(scenario.owners) | set(scenario.reporters)

    def need(kind: str, name: str):
        pools = {
            "finder": scenario.finders,
            "owner": scenario.owners,
            "reporter": scenario.reporters,
            "server": scenario.servers,
            "phone": phones,
        }
        if name not in pools[kind]:
            raise ScenarioParseError(lineno, f"unknown {kind} {name!r}")

    if op == "range":
        need("phone", args[0])
        for f in args[1:]:
            need("finder", f)
    elif op == "press-button":
        need("finder", args[0])
    elif op == "advance":
        int(args[0])
    elif op == "setup-local":
        need("owner", args[0])
        need("finder", args[1])
        if len(args) > 2 and args[2] != "reset-id":
            raise ScenarioParseError(lineno, f"unknown setup option {args[2]!r}")
    elif op in ("setup-verified", "request-token"):
        need("owner", args[0])
        need("finder", args[1] if op == "setup-verified" else args[2])
        need("server", args[2] if op == "setup-verified" else args[1])
    elif op == "grant-token":
        need("owner", args[0])
        need("reporter", args[1])
    elif op == "patrol":
        need("reporter", args[0])
        wire.GeoLocation(int(args[1]), int(args[2]))
        if len(args) > 3:
            need("server", args[3])
    elif op == "submit":
        need("reporter", args[0])
        need("server", args[1])
    elif op in ("fetch", "mark-lost", "clear-lost"):
        need("owner", args[0])
        need("server", args[1])
    elif op == "set-opt-out":
        need("owner", args[0])
        need("finder", args[1])
        _onoff(lineno, args[2])
    elif op in ("export", "import"):
        need("owner", args[0])
        if len(args) < 2:
            raise ScenarioParseError(lineno, "blob name required")
    elif op in ("assert-reports", "assert-last-fetch"):
        need("owner", args[0])
        int(args[1])
    elif op == "assert-patrol":
        need("reporter", args[0])
        int(args[1])
    elif op == "assert-token":
        need("owner", args[0])
    elif op == "assert-lost-ids":
        need("server", args[0])
        int(args[1])


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), name=path.stem)


class World:
    """All actors of one scenario wired onto a shared loop."""

    def __init__(self, scenario: Scenario):
        cfg = scenario.config
        self.scenario = scenario
        self.rng = random.Random(cfg.seed)
        self.loop = SimNetwork(self.rng, epoch_ms=cfg.epoch_ms)
        self.loop.drop_prob = {"radio": cfg.drop_radio, "network": cfg.drop_network}
        self.finders: dict[str, Finder] = {}
        self.owners: dict[str, Owner] = {}
        self.reporters: dict[str, Reporter] = {}
        self.servers: dict[str, PrivateFindServer] = {}
        self.bindings: dict[str, str] = {}
        self.blobs: dict[str, str] = {}
        self.last_fetch: dict[str, int] = {}
        self.last_patrol: dict[str, int] = {}

        for fid, opts in scenario.finders.items():
            finder = manufacture(
                fid,
                self.rng,
                with_mf_key=opts["mf_key"],
                mac_randomization=cfg.mac_randomization,
            )
            self.finders[fid] = finder
            self.loop.attach_device(finder)
        for oid, opts in scenario.owners.items():
            self.owners[oid] = Owner(oid, self.loop, self.rng, skew_ms=opts["skew_ms"])
            self.owners[oid].attach_token = cfg.token_policy in ("search", "both")
        for rid, opts in scenario.reporters.items():
            reporter = Reporter(rid, self.loop, prefilter_lost=opts["prefilter"])
            reporter.own_finder_ids = set(opts["owns"])
            self.reporters[rid] = reporter
        for sid, opts in scenario.servers.items():
            registry = ManufacturerRegistry()
            for fid in opts["registry"]:
                finder = self.finders[fid]
                if scenario.finders[fid]["counterfeit"]:
                    registry.add(finder.state.id_init, self.rng.randbytes(32))
                elif finder.state.mf_key is None:
                    raise ScenarioParseError(0, f"finder {fid} has no mf-key to register")
                else:
                    registry.add(finder.state.id_init, finder.state.mf_key)
            server = PrivateFindServer(
                registry,
                self.rng,
                epoch_ms=cfg.epoch_ms,
                token_policy=cfg.token_policy,
            )
            server.attach(self.loop, sid)
            self.servers[sid] = server

    # --- connections -----------------------------------------------------------

    def _update_connections(self) -> None:
        for finder_id in sorted(self.bindings):
            owner_id = self.bindings[finder_id]
            should = self.loop.in_range(owner_id, finder_id)
            current = self.loop.connection_owner(finder_id)
            if should and current != owner_id:
                self.loop.set_connection(finder_id, owner_id)
            elif not should and current is not None:
                self.loop.set_connection(finder_id, None)

    def _bind(self, owner_id: str, finder_id: str) -> None:
        for fid, oid in list(self.bindings.items()):
            if fid == finder_id and oid != owner_id:
                if self.loop.connection_owner(fid) is not None:
                    self.loop.set_connection(fid, None)
                del self.bindings[fid]
        self.bindings[finder_id] = owner_id
        self._update_connections()

    # --- step execution -----------------------------------------------------------

    def execute(self, step: Step) -> None:
        op, args = step.op, step.args
        if op == "range":
            self.loop.set_range(args[0], args[1:])
            self._update_connections()
        elif op == "press-button":
            self.finders[args[0]].press_button_hold(self.loop.now)
        elif op == "advance":
            self.loop.advance_time(int(args[0]))
        elif op == "setup-local":
            owner, finder = self.owners[args[0]], self.finders[args[1]]
            owner.setup_local(finder.link_address, reset_id="reset-id" in args[2:])
            self._bind(args[0], args[1])
        elif op == "setup-verified":
            owner, finder = self.owners[args[0]], self.finders[args[1]]
            owner.setup_verified(finder.link_address, args[2])
            self._bind(args[0], args[1])
        elif op == "request-token":
            owner, finder = self.owners[args[0]], self.finders[args[2]]
            owner.request_token(finder.link_address, args[1])
        elif op == "grant-token":
            self.reporters[args[1]].access_token = self.owners[args[0]].access_token
        elif op == "patrol":
            geo = wire.GeoLocation(int(args[1]), int(args[2]))
            server_id = args[3] if len(args) > 3 else None
            reports = self.reporters[args[0]].patrol(geo, server_id)
            self.last_patrol[args[0]] = len(reports)
        elif op == "submit":
            self.reporters[args[0]].submit(args[1])
        elif op == "fetch":
            accepted = self.owners[args[0]].fetch_and_decrypt(args[1])
            self.last_fetch[args[0]] = len(accepted)
        elif op == "mark-lost":
            self.owners[args[0]].mark_lost(args[1])
        elif op == "clear-lost":
            self.owners[args[0]].clear_lost(args[1])
        elif op == "set-opt-out":
            owner, finder = self.owners[args[0]], self.finders[args[1]]
            flag = args[2] == "on"
            if not owner.set_opt_out(finder.link_address, flag):
                raise StepAssertion(f"opt-out command rejected by {args[1]}")
        elif op == "export":
            self.blobs[args[1]] = self.owners[args[0]].export_identity()
        elif op == "import":
            if args[1] not in self.blobs:
                raise StepAssertion(f"no exported blob named {args[1]!r}")
            self.owners[args[0]].import_identity(self.blobs[args[1]])
        elif op == "assert-reports":
            got = len(self.owners[args[0]].verified_reports)
            if got != int(args[1]):
                raise StepAssertion(f"expected {args[1]} verified reports for {args[0]}, got {got}")
        elif op == "assert-last-fetch":
            got = self.last_fetch.get(args[0], 0)
            if got != int(args[1]):
                raise StepAssertion(f"expected last fetch of {args[1]} for {args[0]}, got {got}")
        elif op == "assert-patrol":
            got = self.last_patrol.get(args[0], 0)
            if got != int(args[1]):
                raise StepAssertion(f"expected patrol to collect {args[1]}, got {got}")
        elif op == "assert-token":
            if self.owners[args[0]].access_token is None:
                raise StepAssertion(f"{args[0]} holds no access token")
        elif op == "assert-lost-ids":
            got = len(self.servers[args[0]].get_lost_ids(self.loop.now))
            if got != int(args[1]):
                raise StepAssertion(f"expected {args[1]} lost ids, got {got}")
        else:  # pragma: no cover - parser rejects unknown ops
            raise RuntimeError(f"unhandled op {op}")

    # --- results ----------------------------------------------------------------

    def summary(self, error: Optional[dict] = None) -> dict:
        owners = {}
        for oid, owner in self.owners.items():
            owners[oid] = {
                "has_record": owner.record is not None,
                "has_token": owner.access_token is not None,
                "dropped_reports": owner.dropped_reports,
                "verified_reports": [
                    {
                        "lat_e7": r.geo.lat_e7,
                        "lon_e7": r.geo.lon_e7,
                        "counter": r.counter,
                        "received_at": r.received_at,
                        "anonymous": r.anonymous,
                    }
                    for r in owner.verified_reports
                ],
            }
        return {
            "scenario": self.scenario.config.name,
            "seed": self.scenario.config.seed,
            "epoch_ms": self.scenario.config.epoch_ms,
            "token_policy": self.scenario.config.token_policy,
            "final_sim_time": self.loop.now,
            "owners": owners,
            "patrols": dict(sorted(self.last_patrol.items())),
            "error": error,
        }


@dataclass
class RunResult:
    world: World
    summary: dict
    exit_code: int


def run_scenario(scenario: Scenario, overrides: Optional[dict] = None) -> RunResult:
    """Execute every step; on the first failing step, stop and report it.
    The transcript always covers whatever actually happened."""
    if overrides:
        scenario = Scenario(
            config=replace(scenario.config, **overrides),
            finders=scenario.finders,
            owners=scenario.owners,
            reporters=scenario.reporters,
            servers=scenario.servers,
            steps=scenario.steps,
        )
    world = World(scenario)
    error = None
    for step in scenario.steps:
        try:
            world.execute(step)
        except Exception as exc:
            error = {
                "line": step.lineno,
                "step": step.text,
                "kind": type(exc).__name__,
                "message": str(exc),
            }
            break
    summary = world.summary(error)
    return RunResult(world=world, summary=summary, exit_code=2 if error else 0)

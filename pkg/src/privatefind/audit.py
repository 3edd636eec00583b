"""Privacy audit over finished transcripts.

Two checks, both against the network channel only (the short-range radio leg
never reaches the server): no scenario location may appear as its plaintext
8-byte encoding in any server-bound or server-sent payload, and every
reporter-originated message must match the anonymity schema exactly — a
found-report of fixed shape or a bare lost-list request, nothing that could
carry an identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import wire
from .scenario import Scenario
from .transport import Envelope, NETWORK

PASS = "PASS"
FAIL = "FAIL"


@dataclass
class AuditResult:
    verdict: str
    violations: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "violations": self.violations}


def audit_envelopes(envelopes: list[Envelope], scenario: Scenario) -> AuditResult:
    geo_patterns = [geo.pack() for geo in scenario.patrol_locations]
    reporters = set(scenario.reporters)
    token_ingest = scenario.config.token_policy in ("ingest", "both")
    violations = []

    for env in envelopes:
        if env.channel != NETWORK:
            continue
        for pattern in geo_patterns:
            if pattern in env.payload:
                violations.append(
                    {
                        "type": "plaintext-location",
                        "sim_time": env.sim_time,
                        "src": env.src,
                        "dst": env.dst,
                        "location": pattern.hex(),
                    }
                )
        if env.src in reporters and not _reporter_message_ok(env.payload, token_ingest):
            violations.append(
                {
                    "type": "reporter-schema",
                    "sim_time": env.sim_time,
                    "src": env.src,
                    "dst": env.dst,
                    "payload_len": len(env.payload),
                }
            )
    return AuditResult(verdict=FAIL if violations else PASS, violations=violations)


def _reporter_message_ok(payload: bytes, token_ingest: bool) -> bool:
    try:
        code, body = wire.split_net_frame(payload)
    except wire.WireError:
        return False
    if code == wire.FOUND_RESPONSE:
        plain = wire.ID_LEN + wire.E2E_MESSAGE_LEN
        if token_ingest:
            return len(body) in (plain, plain + wire.TOKEN_LEN)
        return len(body) == plain
    if code == wire.GET_LOST_IDS:
        return len(body) == 0
    return False

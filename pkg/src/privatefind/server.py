"""The cloud service. It ingests anonymous reports, answers pseudonym
searches, keeps the lost-set and the optional token registry — and never
holds a plaintext location. Its only long-lived secret material is the
manufacturer registry, which is written at the factory and read-only from
the network's point of view.

State is an in-memory index optionally backed by an append-only JSON-lines
log; reopening the log replays it, so a restart mid-scenario is harmless.
"""

from __future__ import annotations

import hmac as _hmac
import json
from pathlib import Path
from typing import Optional

from . import wire
from .crypto import ID_LEN, KEY_LEN, seal

REPORT_TTL_MS = 30 * 24 * 3600 * 1000
LOST_TTL_EPOCHS = 2

TOKEN_POLICIES = ("off", "ingest", "search", "both")


class UnknownFinderError(Exception):
    pass


class MalformedRequest(Exception):
    pass


class TokenRequired(Exception):
    pass


class TooManyIds(Exception):
    pass


class ChallengeMismatch(Exception):
    pass


class ManufacturerRegistry:
    """id_init -> mf_key, written by the manufacturing tool only."""

    def __init__(self, entries: Optional[dict[bytes, bytes]] = None):
        self._entries = dict(entries or {})

    def add(self, id_init: bytes, mf_key: bytes) -> None:
        if len(id_init) != ID_LEN or len(mf_key) != KEY_LEN:
            raise ValueError("registry entries are 32-byte id and 32-byte key")
        self._entries[id_init] = mf_key

    def mf_key(self, id_init: bytes) -> Optional[bytes]:
        return self._entries.get(id_init)

    def __contains__(self, id_init: bytes) -> bool:
        return id_init in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def snapshot(self) -> dict[bytes, bytes]:
        return dict(self._entries)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for id_init, mf_key in self._entries.items():
                fh.write(json.dumps({"id_init": id_init.hex(), "mf_key": mf_key.hex()}) + "\n")

    @classmethod
    def load(cls, path) -> "ManufacturerRegistry":
        registry = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                registry.add(bytes.fromhex(obj["id_init"]), bytes.fromhex(obj["mf_key"]))
        return registry


class PrivateFindServer:
    def __init__(
        self,
        registry: ManufacturerRegistry,
        rng,
        epoch_ms: int = 900_000,
        token_policy: str = "off",
        report_ttl_ms: int = REPORT_TTL_MS,
        lost_ttl_epochs: int = LOST_TTL_EPOCHS,
        store_path=None,
    ):
        if token_policy not in TOKEN_POLICIES:
            raise ValueError(f"token_policy must be one of {TOKEN_POLICIES}")
        self.registry = registry
        self.rng = rng
        self.epoch_ms = epoch_ms
        self.token_policy = token_policy
        self.report_ttl_ms = report_ttl_ms
        self.lost_ttl_epochs = lost_ttl_epochs
        # id_rand -> [(e2e_message, received_at, seq)]
        self._reports: dict[bytes, list[tuple[bytes, int, int]]] = {}
        self._seq = 0
        self._lost: dict[bytes, int] = {}
        self._tokens: set[bytes] = set()
        self._pending_challenges: dict[bytes, bytes] = {}
        self._store_path = Path(store_path) if store_path else None
        if self._store_path and self._store_path.exists():
            self._replay_log()

    # --- operations ------------------------------------------------------------

    def register_init(self, id_init: bytes, now: int) -> tuple[bytes, bytes]:
        """Fresh setup-key, returned in the clear for the phone and wrapped
        under the finder's mf-key. Not retained server-side."""
        mf_key = self.registry.mf_key(id_init)
        if mf_key is None:
            raise UnknownFinderError
        setup_key = self.rng.randbytes(KEY_LEN)
        wrapped = seal(mf_key, setup_key, self.rng).to_bytes()
        return setup_key, wrapped

    def ingest(self, id_rand: bytes, e2e_message: bytes, now: int, token: Optional[bytes] = None) -> None:
        """Append a report. Deliberately oblivious: known, unknown, and
        duplicate pseudonyms all land the same way."""
        if len(id_rand) != ID_LEN or len(e2e_message) != wire.E2E_MESSAGE_LEN:
            raise MalformedRequest("report fields have wrong lengths")
        if self.token_policy in ("ingest", "both"):
            if token is None or token not in self._tokens:
                raise TokenRequired
        self._seq += 1
        self._reports.setdefault(id_rand, []).append((e2e_message, now, self._seq))
        self._log({"t": "report", "id": id_rand.hex(), "e2e": e2e_message.hex(), "at": now, "seq": self._seq})

    def search(self, ids: list[bytes], now: int, token: Optional[bytes] = None) -> list[tuple[bytes, bytes, int]]:
        """Exact-match union over the requested pseudonyms, newest first."""
        if self.token_policy in ("search", "both"):
            if token is None or token not in self._tokens:
                raise TokenRequired
        if not ids:
            raise MalformedRequest("empty id list")
        if len(ids) > wire.SEARCH_MAX_IDS:
            raise TooManyIds
        hits = []
        for ident in ids:
            if len(ident) != ID_LEN:
                raise MalformedRequest("identifiers are 32 bytes")
            for e2e, received_at, seq in self._reports.get(ident, []):
                if received_at + self.report_ttl_ms > now:
                    hits.append((ident, e2e, received_at, seq))
        hits.sort(key=lambda h: (-h[2], -h[3]))
        return [(ident, e2e, received_at) for ident, e2e, received_at, _ in hits]

    def mark_lost(self, ids: list[bytes], now: int) -> None:
        expires = now + self.lost_ttl_epochs * self.epoch_ms
        for ident in ids:
            self._lost[ident] = expires
            self._log({"t": "mark", "id": ident.hex(), "exp": expires})

    def clear_lost(self, ids: list[bytes], now: int) -> None:
        for ident in ids:
            if self._lost.pop(ident, None) is not None:
                self._log({"t": "clear", "id": ident.hex()})

    def get_lost_ids(self, now: int) -> list[bytes]:
        return sorted(ident for ident, expires in self._lost.items() if expires > now)

    def token_challenge(self, id_init: bytes, now: int) -> bytes:
        """Wrapped random nonce that only the legitimate finder can open."""
        mf_key = self.registry.mf_key(id_init)
        if mf_key is None:
            raise UnknownFinderError
        nonce = self.rng.randbytes(32)
        self._pending_challenges[id_init] = nonce
        return seal(mf_key, nonce, self.rng).to_bytes()

    def token_response(self, id_init: bytes, nonce: bytes, now: int) -> bytes:
        pending = self._pending_challenges.get(id_init)
        if pending is None or not _hmac.compare_digest(pending, nonce):
            raise ChallengeMismatch
        del self._pending_challenges[id_init]
        token = self.rng.randbytes(wire.TOKEN_LEN)
        self._tokens.add(token)
        self._log({"t": "token", "tok": token.hex()})
        return token

    def report_count(self) -> int:
        return sum(len(v) for v in self._reports.values())

    def has_token(self, token: bytes) -> bool:
        return token in self._tokens

    # --- binary frame front-end ---------------------------------------------------

    def handle_frame(self, raw: bytes, now: int) -> bytes:
        """Network entry point: one request frame in, one response frame out."""
        try:
            code, payload = wire.split_net_frame(raw)
        except wire.WireError:
            return wire.encode_error(wire.ERR_MALFORMED)
        try:
            return self._dispatch(code, payload, now)
        except UnknownFinderError:
            return wire.encode_error(wire.ERR_UNKNOWN_FINDER)
        except MalformedRequest:
            return wire.encode_error(wire.ERR_MALFORMED)
        except TokenRequired:
            return wire.encode_error(wire.ERR_TOKEN_REQUIRED)
        except TooManyIds:
            return wire.encode_error(wire.ERR_TOO_MANY_IDS)
        except ChallengeMismatch:
            return wire.encode_error(wire.ERR_AUTH_FAILURE)

    def _dispatch(self, code: int, payload: bytes, now: int) -> bytes:
        if code == wire.REGISTER_INIT:
            if len(payload) != ID_LEN:
                raise MalformedRequest("bad RegisterInit length")
            setup_key, wrapped = self.register_init(payload, now)
            return wire.net_frame(wire.START_ENCRYPTED_SETUP, setup_key + wrapped)

        if code == wire.FOUND_RESPONSE:
            token = None
            if self.token_policy in ("ingest", "both"):
                if len(payload) == ID_LEN + wire.E2E_MESSAGE_LEN:
                    raise TokenRequired
                if len(payload) != ID_LEN + wire.E2E_MESSAGE_LEN + wire.TOKEN_LEN:
                    raise MalformedRequest("bad FoundResponse length")
                token = payload[-wire.TOKEN_LEN :]
                payload = payload[: -wire.TOKEN_LEN]
            if len(payload) != ID_LEN + wire.E2E_MESSAGE_LEN:
                raise MalformedRequest("bad FoundResponse length")
            self.ingest(payload[:ID_LEN], payload[ID_LEN:], now, token=token)
            return wire.net_frame(wire.GENERIC_ACK)

        if code in (wire.SEARCH, wire.MARK_LOST, wire.CLEAR_LOST):
            token = None
            needs_token = code == wire.SEARCH and self.token_policy in ("search", "both")
            if needs_token:
                if len(payload) < wire.TOKEN_LEN + ID_LEN:
                    raise TokenRequired
                token, payload = payload[: wire.TOKEN_LEN], payload[wire.TOKEN_LEN :]
            ids = wire.decode_id_list(payload)
            if code == wire.SEARCH:
                entries = self.search(ids, now, token=token)
                return wire.encode_found(entries)
            if not ids:
                raise MalformedRequest("empty id list")
            if code == wire.MARK_LOST:
                self.mark_lost(ids, now)
            else:
                self.clear_lost(ids, now)
            return wire.net_frame(wire.GENERIC_ACK)

        if code == wire.GET_LOST_IDS:
            if payload:
                raise MalformedRequest("GetLostIds takes no payload")
            return wire.net_frame(wire.LOST_IDS, b"".join(self.get_lost_ids(now)))

        if code == wire.TOKEN_CHALLENGE:
            if len(payload) != ID_LEN:
                raise MalformedRequest("bad TokenChallenge length")
            return wire.net_frame(wire.TOKEN_CHALLENGE, self.token_challenge(payload, now))

        if code == wire.TOKEN_RESPONSE:
            if len(payload) != ID_LEN + 32:
                raise MalformedRequest("bad TokenResponse length")
            token = self.token_response(payload[:ID_LEN], payload[ID_LEN:], now)
            return wire.net_frame(wire.TOKEN, token)

        raise MalformedRequest(f"unknown message code {code:#x}")

    # --- persistence -------------------------------------------------------------

    def _log(self, event: dict) -> None:
        if self._store_path is None:
            return
        with open(self._store_path, "a") as fh:
            fh.write(json.dumps(event, separators=(",", ":")) + "\n")

    def _replay_log(self) -> None:
        path = self._store_path
        self._store_path = None  # do not re-log while replaying
        try:
            with open(path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    event = json.loads(line)
                    kind = event["t"]
                    if kind == "report":
                        seq = event["seq"]
                        self._seq = max(self._seq, seq)
                        self._reports.setdefault(bytes.fromhex(event["id"]), []).append(
                            (bytes.fromhex(event["e2e"]), event["at"], seq)
                        )
                    elif kind == "mark":
                        self._lost[bytes.fromhex(event["id"])] = event["exp"]
                    elif kind == "clear":
                        self._lost.pop(bytes.fromhex(event["id"]), None)
                    elif kind == "token":
                        self._tokens.add(bytes.fromhex(event["tok"]))
        finally:
            self._store_path = path

    # --- simulation adapter ---------------------------------------------------------

    def attach(self, loop, endpoint_id: str) -> None:
        loop.register_endpoint(endpoint_id, lambda env: self.handle_frame(env.payload, env.sim_time))

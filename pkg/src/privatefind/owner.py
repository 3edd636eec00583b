"""Owner-phone logic.

The owner runs a setup variant against a button-armed finder, keeps the
resulting binding strictly on-device, and talks to the server only in terms
of rotating pseudonyms and opaque ciphertext. Replayed or forged reports die
at the counter watermark; the binding itself travels only through the
explicit export blob.
"""

from __future__ import annotations

import base64
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .crypto import (
    AuthFailure,
    KEY_LEN,
    SealedBox,
    new_secret_key,
    open_box,
    ratchet_first,
    ratchet_next,
    seal,
)
from .transport import LinkAddress, SimNetwork

SLACK_BACK = 4
SLACK_FORWARD = 1

EXPORT_MAGIC = b"PFID"
EXPORT_VERSION = 0x01
EXPORT_LEN = 4 + 1 + 32 + 32 + 8 + 4 + 4


class SetupTimeout(Exception):
    """The finder never answered: out of range or not button-armed."""


class ServerUnknownFinder(Exception):
    """The manufacturer registry has no entry for this identity."""


class IdentityBlobError(ValueError):
    """Export blob rejected: bad magic, version, length, or checksum."""


@dataclass
class OwnerRecord:
    id_init: bytes
    e2e_key: bytes
    setup_time: int
    epoch_len: int
    last_counter_seen: int = 0
    last_known_location: Optional[tuple[wire.GeoLocation, int]] = None
    opt_out_shadow: bool = False


@dataclass(frozen=True)
class VerifiedReport:
    geo: wire.GeoLocation
    counter: int
    received_at: int
    anonymous: bool = True


class Owner:
    """One owner phone bound to (at most) one finder."""

    def __init__(self, phone_id: str, loop: SimNetwork, rng, skew_ms: int = 0):
        self.phone_id = phone_id
        self.loop = loop
        self.rng = rng
        self.skew_ms = skew_ms
        self.record: Optional[OwnerRecord] = None
        self.access_token: Optional[bytes] = None
        # only prepend the token to queries when the deployment enforces it;
        # otherwise it would be parsed as (and leaked like) an identifier
        self.attach_token = False
        self.verified_reports: list[VerifiedReport] = []
        self.dropped_reports = 0
        loop.register_endpoint(phone_id)

    # The phone reads its own (possibly drifted) clock.
    def local_now(self) -> int:
        return self.loop.now + self.skew_ms

    # --- setup variants ----------------------------------------------------

    def setup_local(self, address: LinkAddress | bytes, reset_id: bool = False) -> OwnerRecord:
        e2e_key = new_secret_key(self.rng)
        reply = self.loop.radio_exchange(
            self.phone_id, address, wire.radio_frame(wire.SETUP, wire.encode_setup(e2e_key, reset_id))
        )
        if reply is None:
            raise SetupTimeout("no SetupOK from finder")
        code, payload = wire.split_radio_frame(reply)
        if code != wire.SETUP_OK or len(payload) != 32:
            raise SetupTimeout("unexpected setup reply")
        self.record = OwnerRecord(
            id_init=payload,
            e2e_key=e2e_key,
            setup_time=self.loop.now,
            epoch_len=self.loop.epoch_ms,
        )
        return self.record

    def setup_verified(self, address: LinkAddress | bytes, server_id: str) -> OwnerRecord:
        id_init = self._read_identity(address)
        setup_key, wrapped = self._register_init(server_id, id_init)
        self._begin_encrypted(address, wrapped)
        e2e_key = new_secret_key(self.rng)
        sealed_setup = seal(setup_key, wire.encode_setup(e2e_key, False), self.rng)
        reply = self.loop.radio_exchange(
            self.phone_id, address, wire.radio_frame(wire.SETUP, sealed_setup.to_bytes())
        )
        if reply is None:
            raise SetupTimeout("no sealed SetupOK from finder")
        code, payload = wire.split_radio_frame(reply)
        if code != wire.SETUP_OK:
            raise SetupTimeout("unexpected setup reply")
        confirmed = open_box(setup_key, SealedBox.from_bytes(payload))
        if confirmed != id_init:
            raise AuthFailure("finder confirmed a different identity")
        self.record = OwnerRecord(
            id_init=id_init,
            e2e_key=e2e_key,
            setup_time=self.loop.now,
            epoch_len=self.loop.epoch_ms,
        )
        return self.record

    def request_token(self, address: LinkAddress | bytes, server_id: str) -> bytes:
        """Account-less access token: the server challenges the finder through
        us, bound to its manufacturing key. Needs a button-armed finder."""
        id_init = self._read_identity(address)
        setup_key, wrapped = self._register_init(server_id, id_init)
        self._begin_encrypted(address, wrapped)
        reply = self.loop.net_exchange(
            self.phone_id, server_id, wire.net_frame(wire.TOKEN_CHALLENGE, id_init)
        )
        challenge = self._expect(reply, wire.TOKEN_CHALLENGE)
        relay = self.loop.radio_exchange(
            self.phone_id, address, wire.radio_frame(wire.TOKEN_CHALLENGE_RELAY, challenge)
        )
        if relay is None:
            raise AuthFailure("finder could not answer the token challenge")
        code, payload = wire.split_radio_frame(relay)
        if code != wire.TOKEN_CHALLENGE_ANSWER:
            raise AuthFailure("unexpected challenge answer")
        nonce = open_box(setup_key, SealedBox.from_bytes(payload))
        reply = self.loop.net_exchange(
            self.phone_id, server_id, wire.net_frame(wire.TOKEN_RESPONSE, id_init + nonce)
        )
        token = self._expect(reply, wire.TOKEN)
        self.access_token = token
        return token

    def _read_identity(self, address) -> bytes:
        reply = self.loop.radio_exchange(self.phone_id, address, wire.radio_frame(wire.IDENTITY_READ))
        if reply is None:
            raise SetupTimeout("no identity from finder (not armed or out of range)")
        code, payload = wire.split_radio_frame(reply)
        if code != wire.IDENTITY or len(payload) != 32:
            raise SetupTimeout("unexpected identity reply")
        return payload

    def _register_init(self, server_id: str, id_init: bytes) -> tuple[bytes, bytes]:
        reply = self.loop.net_exchange(
            self.phone_id, server_id, wire.net_frame(wire.REGISTER_INIT, id_init)
        )
        payload = self._expect(reply, wire.START_ENCRYPTED_SETUP)
        if len(payload) != KEY_LEN + wire.WRAPPED_KEY_LEN:
            raise SetupTimeout("malformed StartEncryptedSetup")
        return payload[:KEY_LEN], payload[KEY_LEN:]

    def _begin_encrypted(self, address, wrapped: bytes) -> None:
        # The identity read just proved the finder is armed and reachable,
        # so silence here means it failed to unwrap the setup-key.
        reply = self.loop.radio_exchange(
            self.phone_id, address, wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped)
        )
        if reply is None or wire.split_radio_frame(reply)[0] != wire.ACK:
            raise AuthFailure("finder could not unwrap the setup key")

    def _expect(self, reply: Optional[bytes], want_code: int) -> bytes:
        if reply is None:
            raise SetupTimeout("no reply from server")
        code, payload = wire.split_net_frame(reply)
        if code == wire.ERROR:
            err = payload[0] if payload else 0
            if err == wire.ERR_UNKNOWN_FINDER:
                raise ServerUnknownFinder("identity not in manufacturer registry")
            if err == wire.ERR_AUTH_FAILURE:
                raise AuthFailure("server rejected the challenge answer")
            raise SetupTimeout(f"server error {err}")
        if code != want_code:
            raise SetupTimeout(f"unexpected server reply code {code:#x}")
        return payload

    # --- pseudonym window ----------------------------------------------------

    def current_epoch(self) -> int:
        rec = self._require_record()
        return self.local_now() // rec.epoch_len - rec.setup_time // rec.epoch_len

    def current_id_window(
        self, slack_back: int = SLACK_BACK, slack_forward: int = SLACK_FORWARD
    ) -> list[bytes]:
        rec = self._require_record()
        epoch = self.current_epoch()
        lo = max(0, epoch - slack_back)
        hi = epoch + slack_forward
        ident = ratchet_first(rec.e2e_key, rec.id_init)
        window = [ident] if lo == 0 else []
        for e in range(1, hi + 1):
            ident = ratchet_next(rec.e2e_key, ident)
            if e >= lo:
                window.append(ident)
        return window

    # --- server interactions ---------------------------------------------------

    def fetch_and_decrypt(self, server_id: str) -> list[VerifiedReport]:
        rec = self._require_record()
        frame = wire.encode_id_list(wire.SEARCH, self.current_id_window(), token=self._query_token())
        reply = self.loop.net_exchange(self.phone_id, server_id, frame)
        if reply is None:
            return []
        code, payload = wire.split_net_frame(reply)
        if code != wire.FOUND:
            return []
        accepted = []
        # oldest first, so a batch of honest reports does not trip its own watermark
        for id_rand, e2e, received_at in sorted(wire.decode_found(payload), key=lambda e: e[2]):
            try:
                plaintext = open_box(rec.e2e_key, SealedBox.from_bytes(e2e))
                geo, counter = wire.unpack_report_plaintext(plaintext)
            except (AuthFailure, ValueError, wire.WireError):
                self.dropped_reports += 1
                continue
            if counter <= rec.last_counter_seen:
                self.dropped_reports += 1
                continue
            rec.last_counter_seen = counter
            report = VerifiedReport(geo=geo, counter=counter, received_at=received_at)
            rec.last_known_location = (geo, received_at)
            accepted.append(report)
        self.verified_reports.extend(accepted)
        return accepted

    def mark_lost(self, server_id: str) -> None:
        self._require_record()
        frame = wire.encode_id_list(wire.MARK_LOST, self.current_id_window(), token=self._query_token())
        self.loop.net_exchange(self.phone_id, server_id, frame)

    def clear_lost(self, server_id: str) -> None:
        self._require_record()
        frame = wire.encode_id_list(wire.CLEAR_LOST, self.current_id_window(), token=self._query_token())
        self.loop.net_exchange(self.phone_id, server_id, frame)

    def set_opt_out(self, address: LinkAddress | bytes, flag: bool) -> bool:
        rec = self._require_record()
        epoch = self.current_epoch()
        tag = wire.opt_out_tag(rec.e2e_key, flag, epoch)
        reply = self.loop.radio_exchange(
            self.phone_id, address, wire.encode_set_opt_out(flag, epoch, tag)
        )
        if reply is None or wire.split_radio_frame(reply)[0] != wire.ACK:
            return False
        rec.opt_out_shadow = flag
        return True

    def _query_token(self) -> Optional[bytes]:
        return self.access_token if self.attach_token else None

    def _require_record(self) -> OwnerRecord:
        if self.record is None:
            raise RuntimeError("owner has no finder binding yet")
        return self.record

    # --- identity export -----------------------------------------------------

    def export_identity(self) -> str:
        return export_identity(self._require_record())

    def import_identity(self, blob: str) -> OwnerRecord:
        self.record = import_identity(blob)
        return self.record


def export_identity(record: OwnerRecord) -> str:
    """Versioned binary blob, base32-encoded (QR-friendly text)."""
    body = (
        EXPORT_MAGIC
        + bytes([EXPORT_VERSION])
        + record.id_init
        + record.e2e_key
        + struct.pack(">Q", record.setup_time)
        + struct.pack(">I", record.epoch_len)
    )
    body += struct.pack(">I", zlib.crc32(body))
    return base64.b32encode(body).decode("ascii")


def import_identity(blob: str) -> OwnerRecord:
    try:
        raw = base64.b32decode(blob.encode("ascii"))
    except Exception as exc:
        raise IdentityBlobError(f"not valid base32: {exc}") from None
    if len(raw) != EXPORT_LEN:
        raise IdentityBlobError(f"blob must decode to {EXPORT_LEN} bytes, got {len(raw)}")
    if raw[:4] != EXPORT_MAGIC:
        raise IdentityBlobError("bad magic")
    if raw[4] != EXPORT_VERSION:
        raise IdentityBlobError(f"unsupported version {raw[4]}")
    (crc,) = struct.unpack(">I", raw[-4:])
    if crc != zlib.crc32(raw[:-4]):
        raise IdentityBlobError("checksum mismatch")
    id_init = raw[5:37]
    e2e_key = raw[37:69]
    (setup_time,) = struct.unpack(">Q", raw[69:77])
    (epoch_len,) = struct.unpack(">I", raw[77:81])
    return OwnerRecord(
        id_init=id_init,
        e2e_key=e2e_key,
        setup_time=setup_time,
        epoch_len=epoch_len,
    )

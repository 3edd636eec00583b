"""Wire formats for the radio link and the phone-to-server network path.

Radio frames are a 1-byte message code followed by a fixed-layout payload.
Network frames are length-prefixed: code(1) || length(4, big-endian) ||
payload. All multi-byte integers are big-endian. Field widths are exact;
parsers reject anything with the wrong length so no message can smuggle
extra (identifying) fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .crypto import BOX_OVERHEAD, ID_LEN, KEY_LEN, SealedBox

# Radio message codes
ADVERTISEMENT = 0x00
SETUP = 0x01
SETUP_OK = 0x02
SETUP_ENC_BEGIN = 0x03
ARE_YOU_LOST = 0x04
I_AM_LOST = 0x05
SET_OPT_OUT = 0x06
ACK = 0x07
IDENTITY_READ = 0x08
IDENTITY = 0x09
TOKEN_CHALLENGE_RELAY = 0x0A
TOKEN_CHALLENGE_ANSWER = 0x0B

# Network message codes
REGISTER_INIT = 0x10
START_ENCRYPTED_SETUP = 0x11
FOUND_RESPONSE = 0x12
GENERIC_ACK = 0x13
SEARCH = 0x14
FOUND = 0x15
MARK_LOST = 0x16
CLEAR_LOST = 0x17
GET_LOST_IDS = 0x18
LOST_IDS = 0x19
TOKEN_CHALLENGE = 0x1A
TOKEN_RESPONSE = 0x1B
TOKEN = 0x1C
ERROR = 0x1F

# ERROR payload codes
ERR_UNKNOWN_FINDER = 0x01
ERR_MALFORMED = 0x02
ERR_TOKEN_REQUIRED = 0x03
ERR_TOO_MANY_IDS = 0x04
ERR_AUTH_FAILURE = 0x05

ADDR_LEN = 6
# A sealed 32-byte secret (setup-key wrap, challenge wrap) is 16+32+32 bytes.
WRAPPED_KEY_LEN = BOX_OVERHEAD + KEY_LEN
# Report plaintext is lat(4) || lon(4) || counter(4); sealed it is 60 bytes.
REPORT_PLAINTEXT_LEN = 12
E2E_MESSAGE_LEN = BOX_OVERHEAD + REPORT_PLAINTEXT_LEN
SEARCH_MAX_IDS = 64

TOKEN_LEN = 32

LAT_E7_MAX = 900_000_000
LON_E7_MAX = 1_800_000_000


class WireError(ValueError):
    """Malformed frame or payload."""


@dataclass(frozen=True)
class GeoLocation:
    """Fixed-point WGS84 position in 1e-7 degree units."""

    lat_e7: int
    lon_e7: int

    def __post_init__(self):
        if abs(self.lat_e7) > LAT_E7_MAX:
            raise ValueError(f"latitude out of range: {self.lat_e7}")
        if abs(self.lon_e7) > LON_E7_MAX:
            raise ValueError(f"longitude out of range: {self.lon_e7}")

    def pack(self) -> bytes:
        return struct.pack(">ii", self.lat_e7, self.lon_e7)

    @classmethod
    def unpack(cls, raw: bytes) -> "GeoLocation":
        if len(raw) != 8:
            raise WireError("geo location must be 8 bytes")
        lat, lon = struct.unpack(">ii", raw)
        return cls(lat, lon)


@dataclass(frozen=True)
class LocationReport:
    """What a reporter carries: the finder's current pseudonym and a blob it cannot read."""

    id_rand: bytes
    e2e_message: bytes

    def __post_init__(self):
        if len(self.id_rand) != ID_LEN:
            raise ValueError("id_rand must be 32 bytes")
        if len(self.e2e_message) != E2E_MESSAGE_LEN:
            raise ValueError(f"e2e_message must be {E2E_MESSAGE_LEN} bytes")


def pack_report_plaintext(geo: GeoLocation, counter: int) -> bytes:
    return struct.pack(">iiI", geo.lat_e7, geo.lon_e7, counter)


def unpack_report_plaintext(raw: bytes) -> tuple[GeoLocation, int]:
    if len(raw) != REPORT_PLAINTEXT_LEN:
        raise WireError("report plaintext must be 12 bytes")
    lat, lon, counter = struct.unpack(">iiI", raw)
    return GeoLocation(lat, lon), counter


# --- radio frames ---------------------------------------------------------


def radio_frame(code: int, payload: bytes = b"") -> bytes:
    return bytes([code]) + payload


def split_radio_frame(raw: bytes) -> tuple[int, bytes]:
    if len(raw) < 1:
        raise WireError("empty radio frame")
    return raw[0], raw[1:]


def encode_setup(e2e_key: bytes, reset_id: bool = False) -> bytes:
    """Payload of a plaintext SETUP: flags(1) || e2e_key(32)."""
    if len(e2e_key) != KEY_LEN:
        raise ValueError("e2e_key must be 32 bytes")
    return bytes([0x01 if reset_id else 0x00]) + e2e_key


def decode_setup(payload: bytes) -> tuple[bytes, bool]:
    if len(payload) != 1 + KEY_LEN:
        raise WireError("setup payload must be 33 bytes")
    return payload[1:], bool(payload[0] & 0x01)


def encode_are_you_lost(geo: GeoLocation) -> bytes:
    return radio_frame(ARE_YOU_LOST, geo.pack())


def encode_i_am_lost(id_rand: bytes, e2e_message: bytes) -> bytes:
    if len(e2e_message) != E2E_MESSAGE_LEN:
        raise ValueError(f"e2e_message must be {E2E_MESSAGE_LEN} bytes")
    return radio_frame(I_AM_LOST, id_rand + e2e_message)


def decode_i_am_lost(payload: bytes) -> LocationReport:
    if len(payload) != ID_LEN + E2E_MESSAGE_LEN:
        raise WireError("IAmLost payload has wrong length")
    return LocationReport(payload[:ID_LEN], payload[ID_LEN:])


def encode_set_opt_out(flag: bool, epoch: int, tag: bytes) -> bytes:
    if len(tag) != 32:
        raise ValueError("opt-out tag must be 32 bytes")
    return radio_frame(SET_OPT_OUT, bytes([1 if flag else 0]) + struct.pack(">I", epoch) + tag)


def decode_set_opt_out(payload: bytes) -> tuple[bool, int, bytes]:
    if len(payload) != 1 + 4 + 32:
        raise WireError("opt-out payload has wrong length")
    return bool(payload[0]), struct.unpack(">I", payload[1:5])[0], payload[5:]


def opt_out_tag(e2e_key: bytes, flag: bool, epoch: int) -> bytes:
    """Epoch-bound authenticator so only the key holder can mute or unmute."""
    from .crypto import hmac_sha256

    return hmac_sha256(e2e_key, b"optout" + bytes([1 if flag else 0]) + struct.pack(">I", epoch))


# --- network frames -------------------------------------------------------


def net_frame(code: int, payload: bytes = b"") -> bytes:
    return struct.pack(">BI", code, len(payload)) + payload


def split_net_frame(raw: bytes) -> tuple[int, bytes]:
    if len(raw) < 5:
        raise WireError("network frame too short")
    code, length = struct.unpack(">BI", raw[:5])
    payload = raw[5:]
    if len(payload) != length:
        raise WireError("network frame length mismatch")
    return code, payload


def encode_found_response(report: LocationReport, token: bytes | None = None) -> bytes:
    payload = report.id_rand + report.e2e_message
    if token is not None:
        if len(token) != TOKEN_LEN:
            raise ValueError("token must be 32 bytes")
        payload += token
    return net_frame(FOUND_RESPONSE, payload)


def encode_id_list(code: int, ids: list[bytes], token: bytes | None = None) -> bytes:
    for ident in ids:
        if len(ident) != ID_LEN:
            raise ValueError("identifiers must be 32 bytes")
    prefix = b""
    if token is not None:
        if len(token) != TOKEN_LEN:
            raise ValueError("token must be 32 bytes")
        prefix = token
    return net_frame(code, prefix + b"".join(ids))


def decode_id_list(payload: bytes) -> list[bytes]:
    if len(payload) % ID_LEN != 0:
        raise WireError("identifier list has ragged length")
    return [payload[i : i + ID_LEN] for i in range(0, len(payload), ID_LEN)]


FOUND_ENTRY_LEN = ID_LEN + E2E_MESSAGE_LEN + 8


def encode_found(entries: list[tuple[bytes, bytes, int]]) -> bytes:
    """entries: (id_rand, e2e_message, received_at_ms), newest first."""
    body = struct.pack(">I", len(entries))
    for id_rand, e2e, received_at in entries:
        body += id_rand + e2e + struct.pack(">Q", received_at)
    return net_frame(FOUND, body)


def decode_found(payload: bytes) -> list[tuple[bytes, bytes, int]]:
    if len(payload) < 4:
        raise WireError("found payload too short")
    (count,) = struct.unpack(">I", payload[:4])
    body = payload[4:]
    if len(body) != count * FOUND_ENTRY_LEN:
        raise WireError("found payload length mismatch")
    out = []
    for i in range(count):
        chunk = body[i * FOUND_ENTRY_LEN : (i + 1) * FOUND_ENTRY_LEN]
        id_rand = chunk[:ID_LEN]
        e2e = chunk[ID_LEN : ID_LEN + E2E_MESSAGE_LEN]
        (received_at,) = struct.unpack(">Q", chunk[ID_LEN + E2E_MESSAGE_LEN :])
        out.append((id_rand, e2e, received_at))
    return out


def encode_error(err_code: int) -> bytes:
    return net_frame(ERROR, bytes([err_code]))


def sealed_payload(box: SealedBox) -> bytes:
    return box.to_bytes()

"""Finder device state machine.

A finder is provisioned at the factory with a fixed identity (and, for the
manufacturer-verified flow, an individual manufacturing key). Everything a
finder will do afterwards is gated: reconfiguration requires the physical
button, lost replies require a sustained owner absence, and every refusal is
silent so that probing a finder is indistinguishable from talking to air.
"""

from __future__ import annotations

import hmac as _hmac
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .crypto import (
    AuthFailure,
    KEY_LEN,
    SealedBox,
    new_identifier,
    ratchet_first,
    ratchet_next,
    hmac_sha256,
    seal,
    open_box,
)
from .transport import LinkAddress

LOST_THRESHOLD_MS = 300_000
REPORT_RATE_LIMIT_MS = 60_000
SETUP_TIMEOUT_MS = 60_000


@dataclass
class FinderState:
    id_init: bytes
    mf_key: Optional[bytes]
    e2e_key: Optional[bytes] = None
    id_rand: Optional[bytes] = None
    epoch_counter: int = 0
    setup_mode: bool = False
    setup_armed_at: Optional[int] = None
    connected: bool = False
    last_owner_seen: Optional[int] = None
    opt_out: bool = False
    report_counter: int = 0
    last_report_time: Optional[int] = None


class Finder:
    """One physical finder on the simulated radio."""

    def __init__(
        self,
        device_id: str,
        id_init: bytes,
        mf_key: Optional[bytes],
        static_address: bytes,
        rng,
        mac_randomization: bool = False,
        lost_threshold_ms: int = LOST_THRESHOLD_MS,
        rate_limit_ms: int = REPORT_RATE_LIMIT_MS,
        setup_timeout_ms: int = SETUP_TIMEOUT_MS,
    ):
        self.device_id = device_id
        self.state = FinderState(id_init=id_init, mf_key=mf_key)
        self.rng = rng
        self.mac_randomization = mac_randomization
        self.lost_threshold_ms = lost_threshold_ms
        self.rate_limit_ms = rate_limit_ms
        self.setup_timeout_ms = setup_timeout_ms
        self._static_address = _localize(static_address)
        self._address = self._static_address
        # setup-key of an in-progress manufacturer-verified setup; volatile
        self._session_key: Optional[bytes] = None

    # --- identity / presence -------------------------------------------------

    @property
    def link_address(self) -> LinkAddress:
        return LinkAddress(self._address, randomized=self.mac_randomization)

    @property
    def connected(self) -> bool:
        return self.state.connected

    def on_owner_seen(self, now: int) -> None:
        self.state.connected = True
        self.state.last_owner_seen = now

    def on_owner_lost(self, now: int) -> None:
        self.state.connected = False
        self.state.last_owner_seen = now

    def press_button_hold(self, now: int) -> None:
        """Physical proof of ownership: arms setup mode until a setup
        completes or the arming window runs out. Starts a clean window, so
        any encrypted session left over from the previous one is gone."""
        self.state.setup_mode = True
        self.state.setup_armed_at = now
        self._session_key = None

    def tick_epoch(self, now: int) -> None:
        if self.state.e2e_key is None:
            return
        self.state.epoch_counter += 1
        self.state.id_rand = ratchet_next(self.state.e2e_key, self.state.id_rand)
        if self.mac_randomization:
            self._address = self._derive_address(self.state.epoch_counter)

    def _derive_address(self, epoch: int) -> bytes:
        raw = hmac_sha256(self.state.e2e_key, b"mac" + epoch.to_bytes(4, "big"))[:6]
        return _localize(raw)

    def _setup_mode_active(self, now: int) -> bool:
        st = self.state
        if not st.setup_mode:
            return False
        if st.setup_armed_at is None or now - st.setup_armed_at > self.setup_timeout_ms:
            st.setup_mode = False
            st.setup_armed_at = None
            self._session_key = None
            return False
        return True

    # --- radio ----------------------------------------------------------------

    def handle_radio(self, frame: bytes, now: int) -> Optional[bytes]:
        """Process one radio frame. Returns the reply frame, or None —
        refusals never produce wire bytes."""
        try:
            code, payload = wire.split_radio_frame(frame)
        except wire.WireError:
            return None
        if code == wire.SETUP:
            return self._handle_setup(payload, now)
        if code == wire.SETUP_ENC_BEGIN:
            return self._handle_enc_begin(payload, now)
        if code == wire.IDENTITY_READ:
            return self._handle_identity_read(payload, now)
        if code == wire.ARE_YOU_LOST:
            return self._handle_are_you_lost(payload, now)
        if code == wire.SET_OPT_OUT:
            return self._handle_set_opt_out(payload, now)
        if code == wire.TOKEN_CHALLENGE_RELAY:
            return self._handle_challenge_relay(payload, now)
        return None

    def _handle_setup(self, payload: bytes, now: int) -> Optional[bytes]:
        if not self._setup_mode_active(now):
            return None
        if self._session_key is not None:
            session_key = self._session_key
            try:
                inner = open_box(session_key, SealedBox.from_bytes(payload))
                e2e_key, _ = wire.decode_setup(inner)
            except (AuthFailure, ValueError):
                return None
            # id_init is pinned in the verified flow; the reset flag only
            # applies to the local variant.
            self._complete_setup(e2e_key, reset_id=False, now=now)
            ok = seal(session_key, self.state.id_init, self.rng)
            self._session_key = None
            return wire.radio_frame(wire.SETUP_OK, ok.to_bytes())
        try:
            e2e_key, reset_id = wire.decode_setup(payload)
        except wire.WireError:
            return None
        self._complete_setup(e2e_key, reset_id=reset_id, now=now)
        return wire.radio_frame(wire.SETUP_OK, self.state.id_init)

    def _complete_setup(self, e2e_key: bytes, reset_id: bool, now: int) -> None:
        st = self.state
        if reset_id:
            st.id_init = new_identifier(self.rng)
        st.e2e_key = e2e_key
        st.epoch_counter = 0
        st.id_rand = ratchet_first(e2e_key, st.id_init)
        st.report_counter = 0
        st.last_report_time = None
        st.opt_out = False
        # whoever ran the setup was physically present just now
        st.last_owner_seen = now
        st.setup_mode = False
        st.setup_armed_at = None
        if self.mac_randomization:
            self._address = self._derive_address(0)

    def _handle_enc_begin(self, payload: bytes, now: int) -> Optional[bytes]:
        if not self._setup_mode_active(now):
            return None
        if self.state.mf_key is None or len(payload) != wire.WRAPPED_KEY_LEN:
            return None
        try:
            setup_key = open_box(self.state.mf_key, SealedBox.from_bytes(payload))
        except (AuthFailure, ValueError):
            return None
        if len(setup_key) != KEY_LEN:
            return None
        self._session_key = setup_key
        return wire.radio_frame(wire.ACK)

    def _handle_identity_read(self, payload: bytes, now: int) -> Optional[bytes]:
        if payload or not self._setup_mode_active(now):
            return None
        return wire.radio_frame(wire.IDENTITY, self.state.id_init)

    def _handle_are_you_lost(self, payload: bytes, now: int) -> Optional[bytes]:
        st = self.state
        if st.e2e_key is None:
            return None
        try:
            geo = wire.GeoLocation.unpack(payload)
        except (wire.WireError, ValueError):
            return None
        if st.connected or st.opt_out:
            return None
        if st.last_owner_seen is not None and now - st.last_owner_seen < self.lost_threshold_ms:
            return None
        if st.last_report_time is not None and now - st.last_report_time < self.rate_limit_ms:
            return None
        st.report_counter += 1
        st.last_report_time = now
        plaintext = wire.pack_report_plaintext(geo, st.report_counter)
        box = seal(st.e2e_key, plaintext, self.rng)
        return wire.encode_i_am_lost(st.id_rand, box.to_bytes())

    def _handle_set_opt_out(self, payload: bytes, now: int) -> Optional[bytes]:
        st = self.state
        if st.e2e_key is None:
            return None
        try:
            flag, epoch, tag = wire.decode_set_opt_out(payload)
        except wire.WireError:
            return None
        if epoch != st.epoch_counter:
            return None
        expected = wire.opt_out_tag(st.e2e_key, flag, st.epoch_counter)
        if not _hmac.compare_digest(expected, tag):
            return None
        st.opt_out = flag
        return wire.radio_frame(wire.ACK)

    def _handle_challenge_relay(self, payload: bytes, now: int) -> Optional[bytes]:
        """Open a server challenge with the manufacturing key and hand the
        answer back sealed under the session setup-key. Only meaningful
        inside an armed manufacturer-verified session."""
        if not self._setup_mode_active(now) or self._session_key is None:
            return None
        if self.state.mf_key is None or len(payload) != wire.WRAPPED_KEY_LEN:
            return None
        try:
            nonce = open_box(self.state.mf_key, SealedBox.from_bytes(payload))
        except (AuthFailure, ValueError):
            return None
        answer = seal(self._session_key, nonce, self.rng)
        return wire.radio_frame(wire.TOKEN_CHALLENGE_ANSWER, answer.to_bytes())


def _localize(addr: bytes) -> bytes:
    """Force the locally-administered, unicast bit pattern."""
    first = (addr[0] | 0x02) & 0xFE
    return bytes([first]) + addr[1:6]


def manufacture(
    device_id: str,
    rng,
    with_mf_key: bool = True,
    mac_randomization: bool = False,
    **config,
) -> Finder:
    """Factory provisioning: fixed identity, individual manufacturing key,
    and a stable link address. No end-to-end key yet."""
    id_init = new_identifier(rng)
    mf_key = rng.randbytes(KEY_LEN) if with_mf_key else None
    address = rng.randbytes(6)
    return Finder(
        device_id,
        id_init,
        mf_key,
        address,
        rng,
        mac_randomization=mac_randomization,
        **config,
    )

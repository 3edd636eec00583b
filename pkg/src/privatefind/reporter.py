"""Bystander-phone logic: find disconnected finders, ask them whether they
are lost, and relay whatever they answer to the server without attaching
anything that could identify the reporter.

The reporter never holds a key that opens an e2e message; it carries
ciphertext. Submissions get the same flat ack whether or not the pseudonym
means anything to the server, so a reporter cannot probe for real finders.
"""

from __future__ import annotations

from typing import Optional

from . import wire
from .transport import SimNetwork


class Reporter:
    def __init__(self, phone_id: str, loop: SimNetwork, prefilter_lost: bool = False):
        self.phone_id = phone_id
        self.loop = loop
        self.prefilter_lost = prefilter_lost
        # this phone's own finders; nobody files reports about themselves
        self.own_finder_ids: set[str] = set()
        self.access_token: Optional[bytes] = None
        self.reports: list[wire.LocationReport] = []
        loop.register_endpoint(phone_id)

    def patrol(self, geo: wire.GeoLocation, server_id: Optional[str] = None) -> list[wire.LocationReport]:
        """One background pass: scan, query every foreign finder, and keep
        whatever identified itself as lost. Silent finders contribute nothing."""
        lost_ids = None
        if self.prefilter_lost and server_id is not None:
            lost_ids = self._fetch_lost_ids(server_id)
        own_addresses = {
            self.loop.device(fid).link_address.hex for fid in self.own_finder_ids
        }
        collected = []
        for address in self.loop.scan(self.phone_id):
            if address.hex in own_addresses:
                continue
            reply = self.loop.radio_exchange(self.phone_id, address, wire.encode_are_you_lost(geo))
            if reply is None:
                continue
            code, payload = wire.split_radio_frame(reply)
            if code != wire.I_AM_LOST:
                continue
            try:
                report = wire.decode_i_am_lost(payload)
            except wire.WireError:
                continue
            if lost_ids is not None and report.id_rand not in lost_ids:
                continue
            collected.append(report)
        self.reports = collected
        return collected

    def submit(self, server_id: str, reports: Optional[list[wire.LocationReport]] = None) -> int:
        """Upload reports one by one; the payload is {id_rand, e2e_message}
        and nothing else. Returns how many acks came back."""
        if reports is None:
            reports = self.reports
        acked = 0
        for report in reports:
            frame = wire.encode_found_response(report, token=self.access_token)
            reply = self.loop.net_exchange(self.phone_id, server_id, frame)
            if reply is None:
                continue
            code, _ = wire.split_net_frame(reply)
            if code == wire.GENERIC_ACK:
                acked += 1
        return acked

    def _fetch_lost_ids(self, server_id: str) -> set[bytes]:
        reply = self.loop.net_exchange(self.phone_id, server_id, wire.net_frame(wire.GET_LOST_IDS))
        if reply is None:
            return set()
        code, payload = wire.split_net_frame(reply)
        if code != wire.LOST_IDS:
            return set()
        return set(wire.decode_id_list(payload))

"""Deterministic in-process simulation of the radio link and the network path.

Single-threaded event loop with a millisecond clock. Every message is an
Envelope appended to an append-only transcript before (possibly) being
delivered, so a finished run can be audited byte-for-byte. Identical seeds
and scripts produce identical transcripts.

Radio targets are link addresses ("addr:<hex>"), resolved against the
attached devices' *current* addresses at delivery time; network targets are
plain endpoint ids. Epoch timers fire on a global grid (multiples of the
epoch length) in device-id order.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

RADIO = "radio"
NETWORK = "network"

DEFAULT_EPOCH_MS = 900_000


class UnknownEndpoint(Exception):
    pass


@dataclass(frozen=True)
class LinkAddress:
    bytes: bytes
    randomized: bool = False

    def __post_init__(self):
        if len(self.bytes) != 6:
            raise ValueError("link address must be 6 bytes")

    @property
    def hex(self) -> str:
        return self.bytes.hex()


def addr_endpoint(address: LinkAddress | bytes) -> str:
    raw = address.bytes if isinstance(address, LinkAddress) else address
    return "addr:" + raw.hex()


@dataclass(frozen=True)
class Envelope:
    sim_time: int
    channel: str
    src: str
    dst: str
    payload: bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "sim_time": self.sim_time,
                "channel": self.channel,
                "src": self.src,
                "dst": self.dst,
                "payload": self.payload.hex(),
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Envelope":
        obj = json.loads(line)
        return cls(
            sim_time=obj["sim_time"],
            channel=obj["channel"],
            src=obj["src"],
            dst=obj["dst"],
            payload=bytes.fromhex(obj["payload"]),
        )


class Transcript:
    """Append-only, time-ordered record of every envelope ever sent."""

    def __init__(self):
        self._entries: list[Envelope] = []

    def append(self, env: Envelope) -> None:
        if self._entries and env.sim_time < self._entries[-1].sim_time:
            raise ValueError("transcript must stay time-ordered")
        self._entries.append(env)

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for env in self._entries:
                fh.write(env.to_json() + "\n")

    @staticmethod
    def read_jsonl(path) -> list[Envelope]:
        out = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(Envelope.from_json(line))
        return out


class SimNetwork:
    """The shared loop all actors run on.

    Phones and servers register as endpoints (handler gets an Envelope and
    may return reply bytes). Finder devices attach separately: they are
    reachable by link address, subject to range and connection state, and
    get an epoch tick whenever the clock crosses a grid boundary.
    """

    def __init__(self, rng, epoch_ms: int = DEFAULT_EPOCH_MS):
        self.rng = rng
        self.epoch_ms = epoch_ms
        self.now = 0
        self.transcript = Transcript()
        self.drop_prob = {RADIO: 0.0, NETWORK: 0.0}
        self._endpoints: dict[str, Callable[[Envelope], Optional[bytes]]] = {}
        self._devices: dict[str, object] = {}
        self._range: dict[str, frozenset[str]] = {}
        self._connections: dict[str, str] = {}
        self._queues = {RADIO: deque(), NETWORK: deque()}
        self._inboxes: dict[str, list[Envelope]] = {}

    # --- registration -----------------------------------------------------

    def register_endpoint(self, endpoint_id: str, handler=None) -> None:
        """Register a phone or server. Without an explicit handler, incoming
        envelopes pile up in an inbox (the phone pattern)."""
        self._inboxes[endpoint_id] = []
        if handler is None:
            handler = lambda env: self._inboxes[env.dst].append(env)  # noqa: E731
        self._endpoints[endpoint_id] = handler
        self._range.setdefault(endpoint_id, frozenset())

    def attach_device(self, device) -> None:
        """Attach a finder. Needs: device_id, link_address, connected,
        handle_radio(payload, now) -> bytes | None, tick_epoch(now)."""
        self._devices[device.device_id] = device

    def device(self, device_id: str):
        return self._devices[device_id]

    # --- topology -----------------------------------------------------------

    def set_range(self, phone_id: str, finder_ids) -> None:
        if phone_id not in self._endpoints:
            raise UnknownEndpoint(phone_id)
        unknown = set(finder_ids) - set(self._devices)
        if unknown:
            raise UnknownEndpoint(", ".join(sorted(unknown)))
        self._range[phone_id] = frozenset(finder_ids)

    def in_range(self, phone_id: str, device_id: str) -> bool:
        return device_id in self._range.get(phone_id, frozenset())

    def set_connection(self, device_id: str, owner_id: Optional[str]) -> None:
        device = self._devices[device_id]
        if owner_id is None:
            self._connections.pop(device_id, None)
            device.on_owner_lost(self.now)
        else:
            self._connections[device_id] = owner_id
            device.on_owner_seen(self.now)

    def connection_owner(self, device_id: str) -> Optional[str]:
        return self._connections.get(device_id)

    # --- clock --------------------------------------------------------------

    def advance_time(self, delta_ms: int) -> None:
        if delta_ms < 0:
            raise ValueError("time cannot move backwards")
        target = self.now + delta_ms
        next_boundary = (self.now // self.epoch_ms + 1) * self.epoch_ms
        while next_boundary <= target:
            self.now = next_boundary
            for device_id in sorted(self._devices):
                self._devices[device_id].tick_epoch(self.now)
            next_boundary += self.epoch_ms
        self.now = target

    def epoch_index(self, at_ms: Optional[int] = None) -> int:
        return (self.now if at_ms is None else at_ms) // self.epoch_ms

    # --- scanning -------------------------------------------------------------

    def scan(self, observer: str) -> list[LinkAddress]:
        """Addresses of disconnected finders within the observer's range.
        Connected finders stay invisible. Each sighting is transcribed as an
        advertisement envelope."""
        if observer not in self._endpoints:
            raise UnknownEndpoint(observer)
        hits = []
        for device_id in sorted(self._range.get(observer, frozenset())):
            device = self._devices[device_id]
            if device.connected:
                continue
            hits.append(device.link_address)
        hits.sort(key=lambda a: a.bytes)
        for address in hits:
            self.transcript.append(
                Envelope(
                    sim_time=self.now,
                    channel=RADIO,
                    src=addr_endpoint(address),
                    dst=observer,
                    payload=bytes([0x00]) + address.bytes,
                )
            )
        return hits

    # --- messaging ------------------------------------------------------------

    def send(self, env: Envelope) -> None:
        """Record the envelope and queue it for delivery (unless dropped)."""
        if env.src not in self._endpoints and not env.src.startswith("addr:"):
            raise UnknownEndpoint(env.src)
        if env.dst not in self._endpoints and not env.dst.startswith("addr:"):
            raise UnknownEndpoint(env.dst)
        self.transcript.append(env)
        prob = self.drop_prob.get(env.channel, 0.0)
        if prob > 0.0 and self.rng.random() < prob:
            return
        self._queues[env.channel].append(env)

    def deliver(self) -> None:
        """Dispatch queued messages FIFO per channel until both are drained.
        Replies produced by handlers are sent (and so transcribed) in turn."""
        while self._queues[RADIO] or self._queues[NETWORK]:
            for channel in (RADIO, NETWORK):
                queue = self._queues[channel]
                while queue:
                    env = queue.popleft()
                    self._dispatch(env)

    def _dispatch(self, env: Envelope) -> None:
        if env.dst.startswith("addr:"):
            device = self._resolve_address(env)
            if device is None:
                return
            # replies ride the same session: stamp the address the request
            # used, even if handling it rotated the device's address
            session_addr = env.dst
            reply = device.handle_radio(env.payload, env.sim_time)
            if reply is not None:
                self.send(
                    Envelope(
                        sim_time=self.now,
                        channel=RADIO,
                        src=session_addr,
                        dst=env.src,
                        payload=reply,
                    )
                )
            return
        handler = self._endpoints[env.dst]
        reply = handler(env)
        if reply is not None:
            self.send(
                Envelope(
                    sim_time=self.now,
                    channel=env.channel,
                    src=env.dst,
                    dst=env.src,
                    payload=reply,
                )
            )

    def _resolve_address(self, env: Envelope):
        """A radio frame reaches a finder only if the address matches the
        finder's current one, the sender is in range, and the finder is
        either free or in a session with this very sender."""
        want = env.dst.removeprefix("addr:")
        for device_id in sorted(self._devices):
            device = self._devices[device_id]
            if device.link_address.hex != want:
                continue
            if not self.in_range(env.src, device_id):
                return None
            owner = self._connections.get(device_id)
            if owner is not None and owner != env.src:
                return None
            return device
        return None

    # --- request/response helpers ----------------------------------------------

    def _exchange(self, channel: str, src: str, dst: str, payload: bytes) -> Optional[bytes]:
        inbox = self._inboxes[src]
        mark = len(inbox)
        self.send(Envelope(self.now, channel, src, dst, payload))
        self.deliver()
        for env in inbox[mark:]:
            if env.channel == channel and env.src == dst:
                return env.payload
        return None

    def radio_exchange(self, phone_id: str, address: LinkAddress | bytes, frame: bytes) -> Optional[bytes]:
        return self._exchange(RADIO, phone_id, addr_endpoint(address), frame)

    def net_exchange(self, src: str, dst: str, frame: bytes) -> Optional[bytes]:
        return self._exchange(NETWORK, src, dst, frame)

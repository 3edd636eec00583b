import random

import pytest

from privatefind.finder import manufacture
from privatefind.owner import Owner
from privatefind.reporter import Reporter
from privatefind.server import ManufacturerRegistry, PrivateFindServer
from privatefind.transport import SimNetwork

EPOCH_MS = 900_000


class Rig:
    """One finder, one owner, one reporter, one server on a shared loop."""

    def __init__(
        self,
        seed=1,
        epoch_ms=EPOCH_MS,
        token_policy="off",
        mac_randomization=False,
        register_finder=True,
        owner_skew_ms=0,
    ):
        self.rng = random.Random(seed)
        self.epoch_ms = epoch_ms
        self.loop = SimNetwork(self.rng, epoch_ms=epoch_ms)
        self.finder = manufacture("f1", self.rng, mac_randomization=mac_randomization)
        self.loop.attach_device(self.finder)
        self.owner = Owner("alice", self.loop, self.rng, skew_ms=owner_skew_ms)
        self.reporter = Reporter("bob", self.loop)
        registry = ManufacturerRegistry()
        if register_finder:
            registry.add(self.finder.state.id_init, self.finder.state.mf_key)
        self.server = PrivateFindServer(
            registry, self.rng, epoch_ms=epoch_ms, token_policy=token_policy
        )
        self.server.attach(self.loop, "srv")

    def quick_setup(self, connect=True):
        """Button-armed local setup; by default the owner stays connected."""
        self.loop.set_range("alice", {"f1"})
        self.finder.press_button_hold(self.loop.now)
        record = self.owner.setup_local(self.finder.link_address)
        if connect:
            self.loop.set_connection("f1", "alice")
        return record

    def lose_finder(self, wait_ms=600_000):
        """Owner walks away, then enough time passes for the finder to admit
        being lost; the reporter moves into range."""
        self.loop.set_range("alice", set())
        if self.loop.connection_owner("f1") is not None:
            self.loop.set_connection("f1", None)
        self.loop.advance_time(wait_ms)
        self.loop.set_range("bob", {"f1"})


@pytest.fixture
def rig():
    return Rig()

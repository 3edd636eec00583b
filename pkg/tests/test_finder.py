import random

import pytest

from privatefind import wire
from privatefind.crypto import SealedBox, open_box, ratchet_at, seal
from privatefind.finder import manufacture

from conftest import Rig

GEO = wire.GeoLocation(521390000, 96940000)


def are_you_lost(finder, now):
    return finder.handle_radio(wire.encode_are_you_lost(GEO), now)


class TestManufacture:
    def test_constructor_fields(self):
        rng = random.Random(1)
        finder = manufacture("f1", rng)
        st = finder.state
        assert len(st.id_init) == 32
        assert len(st.mf_key) == 32
        assert st.e2e_key is None
        assert st.setup_mode is False
        assert st.opt_out is False
        assert st.report_counter == 0
        assert st.epoch_counter == 0

    def test_individual_mf_keys(self):
        rng = random.Random(2)
        a, b = manufacture("a", rng), manufacture("b", rng)
        assert a.state.mf_key != b.state.mf_key
        assert a.state.id_init != b.state.id_init

    def test_local_only_device_has_no_mf_key(self):
        finder = manufacture("f1", random.Random(3), with_mf_key=False)
        assert finder.state.mf_key is None

    def test_address_is_locally_administered_unicast(self):
        finder = manufacture("f1", random.Random(4))
        first = finder.link_address.bytes[0]
        assert first & 0x02
        assert not first & 0x01


class TestSetupGate:
    def test_setup_before_button_press_rejected(self):
        finder = manufacture("f1", random.Random(5))
        frame = wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32))
        assert finder.handle_radio(frame, 0) is None
        assert finder.state.e2e_key is None

    def test_button_arms_setup(self):
        finder = manufacture("f1", random.Random(6))
        finder.press_button_hold(0)
        frame = wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32))
        reply = finder.handle_radio(frame, 10)
        code, payload = wire.split_radio_frame(reply)
        assert code == wire.SETUP_OK
        assert payload == finder.state.id_init
        assert finder.state.e2e_key == b"\x01" * 32

    def test_setup_clears_setup_mode(self):
        finder = manufacture("f1", random.Random(7))
        finder.press_button_hold(0)
        finder.handle_radio(wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32)), 1)
        assert finder.state.setup_mode is False
        # a second setup without a fresh press is ignored
        frame = wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x02" * 32))
        assert finder.handle_radio(frame, 2) is None
        assert finder.state.e2e_key == b"\x01" * 32

    def test_setup_mode_times_out(self):
        finder = manufacture("f1", random.Random(8))
        finder.press_button_hold(0)
        frame = wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32))
        assert finder.handle_radio(frame, 61_000) is None
        assert finder.state.e2e_key is None

    def test_reset_id_regenerates_identity(self):
        finder = manufacture("f1", random.Random(9))
        manufactured_id = finder.state.id_init
        finder.press_button_hold(0)
        frame = wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32, reset_id=True))
        reply = finder.handle_radio(frame, 1)
        _, payload = wire.split_radio_frame(reply)
        assert payload == finder.state.id_init
        assert payload != manufactured_id

    def test_setup_resets_counters_and_opt_out(self):
        rig = Rig()
        rig.quick_setup()
        rig.lose_finder()
        assert are_you_lost(rig.finder, rig.loop.now) is not None
        assert rig.finder.state.report_counter == 1
        rig.finder.state.opt_out = True
        rig.finder.press_button_hold(rig.loop.now)
        rig.loop.set_range("alice", {"f1"})
        rig.owner.setup_local(rig.finder.link_address)
        st = rig.finder.state
        assert st.report_counter == 0
        assert st.opt_out is False
        assert st.epoch_counter == 0

    def test_e2e_key_only_changes_in_setup_mode(self):
        """Sweep a mixed message sequence: outside armed windows the key pins."""
        finder = manufacture("f1", random.Random(10))
        finder.press_button_hold(0)
        finder.handle_radio(wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x01" * 32)), 1)
        key_after_setup = finder.state.e2e_key
        probes = [
            wire.radio_frame(wire.SETUP, wire.encode_setup(b"\x99" * 32)),
            wire.radio_frame(wire.SETUP_ENC_BEGIN, b"\x00" * 80),
            wire.radio_frame(wire.IDENTITY_READ),
        ]
        for t, frame in enumerate(probes, start=2):
            finder.handle_radio(frame, t)
            assert finder.state.e2e_key == key_after_setup


class TestEncryptedSetup:
    def wrap(self, mf_key, setup_key, rng):
        return seal(mf_key, setup_key, rng).to_bytes()

    def test_happy_path(self):
        rng = random.Random(11)
        finder = manufacture("f1", rng)
        setup_key = b"\x21" * 32
        finder.press_button_hold(0)
        ack = finder.handle_radio(
            wire.radio_frame(wire.SETUP_ENC_BEGIN, self.wrap(finder.state.mf_key, setup_key, rng)), 1
        )
        assert wire.split_radio_frame(ack)[0] == wire.ACK
        sealed_setup = seal(setup_key, wire.encode_setup(b"\x42" * 32), rng)
        reply = finder.handle_radio(wire.radio_frame(wire.SETUP, sealed_setup.to_bytes()), 2)
        code, payload = wire.split_radio_frame(reply)
        assert code == wire.SETUP_OK
        assert open_box(setup_key, SealedBox.from_bytes(payload)) == finder.state.id_init
        assert finder.state.e2e_key == b"\x42" * 32

    def test_wrong_mf_key_silently_rejected(self):
        rng = random.Random(12)
        finder = manufacture("f1", rng)
        finder.press_button_hold(0)
        wrapped = self.wrap(b"\x13" * 32, b"\x21" * 32, rng)
        assert finder.handle_radio(wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped), 1) is None

    def test_enc_begin_needs_setup_mode(self):
        rng = random.Random(13)
        finder = manufacture("f1", rng)
        wrapped = self.wrap(finder.state.mf_key, b"\x21" * 32, rng)
        assert finder.handle_radio(wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped), 0) is None

    def test_replayed_wrapped_key_needs_fresh_button(self):
        rng = random.Random(14)
        finder = manufacture("f1", rng)
        setup_key = b"\x21" * 32
        wrapped = self.wrap(finder.state.mf_key, setup_key, rng)
        finder.press_button_hold(0)
        finder.handle_radio(wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped), 1)
        sealed_setup = seal(setup_key, wire.encode_setup(b"\x42" * 32), rng)
        finder.handle_radio(wire.radio_frame(wire.SETUP, sealed_setup.to_bytes()), 2)
        # replay the whole dance without a button press
        assert finder.handle_radio(wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped), 3) is None
        sealed_again = seal(setup_key, wire.encode_setup(b"\x66" * 32), rng)
        assert finder.handle_radio(wire.radio_frame(wire.SETUP, sealed_again.to_bytes()), 4) is None
        assert finder.state.e2e_key == b"\x42" * 32

    def test_local_only_device_rejects_enc_begin(self):
        rng = random.Random(15)
        finder = manufacture("f1", rng, with_mf_key=False)
        finder.press_button_hold(0)
        wrapped = self.wrap(b"\x13" * 32, b"\x21" * 32, rng)
        assert finder.handle_radio(wire.radio_frame(wire.SETUP_ENC_BEGIN, wrapped), 1) is None


class TestIdentityRead:
    def test_only_in_setup_mode(self):
        finder = manufacture("f1", random.Random(16))
        assert finder.handle_radio(wire.radio_frame(wire.IDENTITY_READ), 0) is None
        finder.press_button_hold(0)
        reply = finder.handle_radio(wire.radio_frame(wire.IDENTITY_READ), 1)
        code, payload = wire.split_radio_frame(reply)
        assert code == wire.IDENTITY
        assert payload == finder.state.id_init


class TestAreYouLost:
    def test_lost_finder_replies_with_sixty_byte_message(self):
        rig = Rig()
        rig.quick_setup()
        rig.lose_finder(wait_ms=600_000)
        reply = are_you_lost(rig.finder, rig.loop.now)
        code, payload = wire.split_radio_frame(reply)
        assert code == wire.I_AM_LOST
        report = wire.decode_i_am_lost(payload)
        assert len(report.e2e_message) == 60
        assert report.id_rand == rig.finder.state.id_rand

    def test_unset_up_finder_is_silent(self):
        finder = manufacture("f1", random.Random(17))
        assert are_you_lost(finder, 10_000_000) is None

    def test_connected_finder_is_silent(self):
        rig = Rig()
        rig.quick_setup(connect=True)
        rig.loop.advance_time(600_000)
        assert are_you_lost(rig.finder, rig.loop.now) is None

    def test_recently_seen_owner_means_silence(self):
        rig = Rig()
        rig.quick_setup()
        rig.lose_finder(wait_ms=60_000)
        assert are_you_lost(rig.finder, rig.loop.now) is None

    def test_threshold_boundary(self):
        rig = Rig()
        rig.quick_setup()
        rig.lose_finder(wait_ms=299_999)
        assert are_you_lost(rig.finder, rig.loop.now) is None
        rig.loop.advance_time(1)
        assert are_you_lost(rig.finder, rig.loop.now) is not None

    def test_opt_out_means_silence(self):
        rig = Rig()
        rig.quick_setup()
        rig.finder.state.opt_out = True
        rig.lose_finder(wait_ms=600_000)
        assert are_you_lost(rig.finder, rig.loop.now) is None

    def test_rate_limit(self):
        rig = Rig()
        rig.quick_setup()
        rig.lose_finder(wait_ms=600_000)
        assert are_you_lost(rig.finder, rig.loop.now) is not None
        rig.loop.advance_time(30_000)
        assert are_you_lost(rig.finder, rig.loop.now) is None
        rig.loop.advance_time(30_000)
        assert are_you_lost(rig.finder, rig.loop.now) is not None

    def test_counter_strictly_monotonic(self):
        rig = Rig()
        record = rig.quick_setup()
        rig.lose_finder(wait_ms=600_000)
        counters = []
        for _ in range(3):
            reply = are_you_lost(rig.finder, rig.loop.now)
            report = wire.decode_i_am_lost(wire.split_radio_frame(reply)[1])
            plaintext = open_box(record.e2e_key, SealedBox.from_bytes(report.e2e_message))
            counters.append(wire.unpack_report_plaintext(plaintext)[1])
            rig.loop.advance_time(60_000)
        assert counters == sorted(counters)
        assert len(set(counters)) == 3

    def test_reply_carries_request_location(self):
        rig = Rig()
        record = rig.quick_setup()
        rig.lose_finder(wait_ms=600_000)
        reply = are_you_lost(rig.finder, rig.loop.now)
        report = wire.decode_i_am_lost(wire.split_radio_frame(reply)[1])
        plaintext = open_box(record.e2e_key, SealedBox.from_bytes(report.e2e_message))
        geo, _ = wire.unpack_report_plaintext(plaintext)
        assert geo == GEO


class TestOptOutCommand:
    def test_owner_tag_accepted(self):
        rig = Rig()
        record = rig.quick_setup()
        tag = wire.opt_out_tag(record.e2e_key, True, 0)
        reply = rig.finder.handle_radio(wire.encode_set_opt_out(True, 0, tag), rig.loop.now)
        assert wire.split_radio_frame(reply)[0] == wire.ACK
        assert rig.finder.state.opt_out is True

    def test_random_tag_rejected(self):
        rig = Rig()
        rig.quick_setup()
        reply = rig.finder.handle_radio(
            wire.encode_set_opt_out(True, 0, b"\x5c" * 32), rig.loop.now
        )
        assert reply is None
        assert rig.finder.state.opt_out is False

    def test_stale_epoch_tag_rejected(self):
        rig = Rig()
        record = rig.quick_setup()
        stale = wire.encode_set_opt_out(True, 0, wire.opt_out_tag(record.e2e_key, True, 0))
        rig.loop.advance_time(rig.epoch_ms)
        assert rig.finder.handle_radio(stale, rig.loop.now) is None
        assert rig.finder.state.opt_out is False


class TestEpochTick:
    def test_id_chain_matches_ratchet(self):
        rig = Rig()
        record = rig.quick_setup()
        for epoch in range(5):
            expected = ratchet_at(record.e2e_key, record.id_init, epoch)
            assert rig.finder.state.id_rand == expected
            rig.loop.advance_time(rig.epoch_ms)

    def test_tick_before_setup_is_noop(self):
        finder = manufacture("f1", random.Random(18))
        finder.tick_epoch(900_000)
        assert finder.state.epoch_counter == 0
        assert finder.state.id_rand is None

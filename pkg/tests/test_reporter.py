import random

import pytest

from privatefind import wire
from privatefind.finder import manufacture
from privatefind.reporter import Reporter

from conftest import Rig

GEO = wire.GeoLocation(400000000, -740000000)


class TestPatrol:
    def test_lost_finder_produces_one_report(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        reports = rig.reporter.patrol(GEO)
        assert len(reports) == 1
        assert reports[0].id_rand == rig.finder.state.id_rand

    def test_no_finders_in_range(self, rig):
        rig.quick_setup()
        assert rig.reporter.patrol(GEO) == []

    def test_opted_out_finder_produces_nothing(self, rig):
        rig.quick_setup()
        rig.owner.set_opt_out(rig.finder.link_address, True)
        rig.lose_finder()
        assert rig.reporter.patrol(GEO) == []

    def test_own_finders_skipped(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        rig.reporter.own_finder_ids = {"f1"}
        assert rig.reporter.patrol(GEO) == []

    def test_connected_finder_not_even_scanned(self, rig):
        rig.quick_setup(connect=True)
        rig.loop.set_range("bob", {"f1"})
        rig.loop.advance_time(600_000)
        assert rig.reporter.patrol(GEO) == []

    def test_prefilter_keeps_only_marked_lost(self):
        rig = Rig()
        rig.quick_setup()
        rig.reporter.prefilter_lost = True
        rig.lose_finder()
        # not marked lost: the exchange happens but the report is filtered
        assert rig.reporter.patrol(GEO, "srv") == []
        rig.loop.advance_time(60_000)
        rig.owner.mark_lost("srv")
        assert len(rig.reporter.patrol(GEO, "srv")) == 1


class TestSubmit:
    def test_submit_gets_generic_ack(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        reports = rig.reporter.patrol(GEO)
        assert rig.reporter.submit("srv", reports) == 1
        assert rig.server.report_count() == 1

    def test_unknown_id_gets_identical_ack(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        genuine = rig.reporter.patrol(GEO)
        rig.reporter.submit("srv", genuine)
        bogus = wire.LocationReport(random.Random(5).randbytes(32), bytes(60))
        rig.reporter.submit("srv", [bogus])
        acks = [
            env.payload
            for env in rig.loop.transcript
            if env.channel == "network" and env.dst == "bob"
        ]
        assert len(acks) == 2
        assert acks[0] == acks[1]

    def test_empty_submission_sends_nothing(self, rig):
        rig.quick_setup()
        before = len(rig.loop.transcript)
        assert rig.reporter.submit("srv", []) == 0
        assert len(rig.loop.transcript) == before


class TestAnonymitySchema:
    def test_reporter_network_messages_carry_fixed_fields_only(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        reports = rig.reporter.patrol(GEO)
        rig.reporter.submit("srv", reports)
        sent = [
            env
            for env in rig.loop.transcript
            if env.channel == "network" and env.src == "bob"
        ]
        assert sent, "expected at least one reporter upload"
        for env in sent:
            code, payload = wire.split_net_frame(env.payload)
            assert code == wire.FOUND_RESPONSE
            assert len(payload) == 92

    def test_plaintext_location_never_on_network(self, rig):
        rig.quick_setup()
        rig.lose_finder()
        rig.reporter.submit("srv", rig.reporter.patrol(GEO))
        rig.owner.fetch_and_decrypt("srv")
        for env in rig.loop.transcript:
            if env.channel == "network":
                assert GEO.pack() not in env.payload

import unittest

from gossiplab.attacker import (
    Attacker,
    AttackerConfig,
    LearnedFingerprint,
    TupleIndex,
    TupleLevel,
    TxSighting,
    Unrecognized,
    clusters_frame,
    fingerprint_session,
    link_sessions,
    match,
    records_frame,
    score_records,
)
from gossiplab.netsim import WorldConfig, build_world
from gossiplab.protocol_model import NetAddress, Reachability


def fingerprint(fp_id, owner, entries, first_seen=0.0, last_seen=100.0):
    return LearnedFingerprint(fp_id, NetAddress(owner, Reachability.REACHABLE, 0.0), set(entries), first_seen, last_seen)


def sighting(tx, top, t_ms=50_000, pseudonym=None):
    return TxSighting(tx, list(top), [t_ms + i for i in range(len(top))], pseudonym)


class TestMatch(unittest.TestCase):

    def setUp(self):
        self.fps = [
            fingerprint(1, 100, {1, 2, 3, 4}),
            fingerprint(2, 200, {5, 6, 7, 8}),
            fingerprint(3, 300, {1, 2, 9}, last_seen=90.0),
        ]

    def test_three_tuple(self):
        record = match(sighting(10, [1, 2, 3, 11, 12]), self.fps)
        self.assertEqual(record.tuple_level, TupleLevel.THREE)
        self.assertEqual(record.ip.owner, 100)
        self.assertEqual(record.fingerprint_ids, [1])
        self.assertEqual(record.overlap, 3)

    def test_two_tuple_ranks_by_recency(self):
        record = match(sighting(11, [1, 2, 12, 13]), self.fps)
        self.assertEqual(record.tuple_level, TupleLevel.TWO)
        self.assertEqual(record.fingerprint_ids, [1, 3])
        self.assertEqual(record.ip.owner, 100)

    def test_one_tuple(self):
        record = match(sighting(12, [5, 20, 21]), self.fps)
        self.assertEqual(record.tuple_level, TupleLevel.ONE)
        self.assertEqual(record.ip.owner, 200)

    def test_unrecognized(self):
        self.assertIsInstance(match(sighting(13, [20, 21, 22]), self.fps), Unrecognized)

    def test_inactive_fingerprint_skipped(self):
        late = [fingerprint(1, 100, {1, 2, 3}, first_seen=500.0, last_seen=600.0)]
        self.assertIsInstance(match(sighting(14, [1, 2, 3], t_ms=10_000), late, gap_s=30.0), Unrecognized)

    def test_idle_fingerprint_skipped(self):
        old = [fingerprint(1, 100, {1, 2, 3}, first_seen=0.0, last_seen=10.0)]
        self.assertIsInstance(match(sighting(15, [1, 2, 3], t_ms=8_000_000), old, idle_s=7200.0), Unrecognized)

    def test_index_lookup(self):
        index = TupleIndex(self.fps)
        self.assertEqual(sorted(index.lookup((1, 2))), [0, 2])
        self.assertEqual(index.hits({5, 6, 7}, 3), {1})


class TestLinkSessions(unittest.TestCase):

    def test_groups_three_level_records(self):
        fps = [fingerprint(1, 100, {1, 2, 3}), fingerprint(2, 200, {4, 5, 6})]
        records = [
            match(sighting(1, [1, 2, 3], pseudonym=7), fps),
            match(sighting(2, [4, 5, 6]), fps),
            match(sighting(3, [3, 2, 1], pseudonym=8), fps),
            match(sighting(4, [1, 4, 30]), fps),
        ]
        clusters = link_sessions(records)
        self.assertEqual([(c.ip.owner, c.txs) for c in clusters], [(100, [1, 3]), (200, [2])])
        self.assertEqual(clusters[0].pseudonyms, [7, 8])
        self.assertEqual(list(clusters_frame(clusters)["n_transactions"]), [2, 1])


class TestAttackerConfig(unittest.TestCase):

    def test_validate(self):
        self.assertEqual(AttackerConfig().validate(), [])
        problems = AttackerConfig(m=0, near_expiry_age_s=700).validate()
        self.assertEqual(len(problems), 2)

    def test_attacker_rejects_bad_config(self):
        world = build_world(WorldConfig(n_servers=20, seed=1))
        with self.assertRaises(ValueError):
            Attacker(world, AttackerConfig(q=0))


class TestAttackerInWorld(unittest.TestCase):

    def setUp(self):
        self.world = build_world(WorldConfig(n_servers=30, n_clients=3, seed=5, record_events="none"))
        owners = [self.world.nodes[c].public_owner for c in self.world.client_ids]
        candidates = [NetAddress(owner, Reachability.REACHABLE, 0.0) for owner in owners]
        self.attacker = Attacker(
            self.world, AttackerConfig(m=20, stealth_ip_count=20, candidate_addresses=candidates)
        )

    def prepare(self):
        servers = self.attacker.enumerate_servers([0])
        self.attacker.establish_listeners(servers)
        self.attacker.schedule_rebroadcasts(start_ms=self.world.now_ms + 1_000)
        self.world.run_until(self.world.now_ms + 10_000)
        return servers

    def test_enumerates_every_server(self):
        self.assertEqual(self.attacker.enumerate_servers([0]), self.world.server_ids)

    def test_listener_count(self):
        servers = self.prepare()
        self.assertEqual(set(self.attacker.links.achieved), set(servers))
        self.assertEqual(self.attacker.links.total, 20 * len(servers))
        self.assertEqual(self.world.check_invariants(), [])

    def test_learns_entries_and_deanonymizes(self):
        self.prepare()
        fingerprints = {}
        for client in self.world.client_ids:
            fingerprints[client] = self.world.client_connect(client)
            self.world.run_until(self.world.now_ms + 5_000)
        for client in self.world.client_ids:
            for _ in range(2):
                self.world.generate_tx(client)
                self.world.run_until(self.world.now_ms + 20_000)

        learned = self.attacker.learn_entry_nodes()
        self.assertEqual(len(learned), 3)
        for fp in learned:
            session_id = fingerprint_session(self.world, fp)
            truth = self.world.sessions[session_id].entries
            self.assertGreaterEqual(len(fp.observed_entries & truth), 3)

        records, unrecognized = self.attacker.deanonymize()
        self.assertEqual(len(records) + len(unrecognized), 6)
        rows = score_records(records, self.world, self.attacker.fingerprints)
        correct = [r for r in rows if r["tuple_level"] == "three" and r["correct"]]
        self.assertGreaterEqual(len(correct), 2)
        frame = records_frame(rows)
        self.assertEqual(len(frame), len(records))

    def test_rebroadcast_recycles_listeners(self):
        servers = self.prepare()
        sent = self.attacker.rebroadcast_candidates()
        self.assertEqual(sent, len(servers))
        self.assertTrue(all(self.attacker.links.open_count(s) == 1 for s in servers))
        self.world.run_until(self.world.now_ms + 5_000)
        for server in servers:
            self.assertEqual(self.attacker.links.open_count(server), self.attacker.links.achieved[server])

    def test_sightings_ordered_by_arrival(self):
        self.prepare()
        client = self.world.client_ids[0]
        self.world.client_connect(client)
        self.world.run_until(self.world.now_ms + 5_000)
        txs = [self.world.generate_tx(client) for _ in range(3)]
        self.world.run_until(self.world.now_ms + 60_000)
        sightings = self.attacker.sight_transactions()
        self.assertEqual({s.tx for s in sightings}, set(txs))
        for s in sightings:
            self.assertEqual(len(s.top_q), 10)
            self.assertEqual(len(set(s.top_q)), 10)
            self.assertEqual(s.arrival_ms, sorted(s.arrival_ms))
        firsts = [s.first_ms for s in sightings]
        self.assertEqual(firsts, sorted(firsts))

    def test_rebroadcasts_counted(self):
        self.prepare()
        self.assertEqual(self.attacker.rebroadcasts, 1)
        self.world.run_until(self.world.now_ms + 600_000)
        self.assertEqual(self.attacker.rebroadcasts, 2)


if __name__ == '__main__':
    unittest.main()

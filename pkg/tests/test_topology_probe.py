import time
import unittest

import numpy as np
from scipy import stats

from gossiplab.netsim import WorldConfig, build_world
from gossiplab.protocol_model import ADDRDB_CAPACITY, GETADDR_MAX, NetAddress
from gossiplab.topology_probe import (
    DegeneratePairError,
    InsufficientSignalError,
    MarkerSet,
    UnreachablePeerError,
    degree_experiment,
    degree_table,
    discover_connection,
    discovery_experiment,
    discovery_table,
    enumerate_neighbors,
    estimate_degree,
    markov_getaddr_expectation,
    poll_coverage,
    residual_miss_probability,
    simulate_getaddr_rounds,
    _transitions,
)
from utils.settings import settings


class TestMarkerSet(unittest.TestCase):

    def test_fresh_owners(self):
        markers = MarkerSet.fresh(5, start_id=1000)
        self.assertEqual(markers.owners, {1000, 1001, 1002, 1003, 1004})
        self.assertTrue(markers.reachable)

    def test_bad_policy(self):
        with self.assertRaises(ValueError):
            MarkerSet([NetAddress(1)], timestamp_policy="old")

    def test_empty(self):
        with self.assertRaises(ValueError):
            MarkerSet.fresh(0, start_id=1)

    def test_collision_with_world(self):
        world = build_world(WorldConfig(n_servers=12, seed=1))
        with self.assertRaises(ValueError):
            MarkerSet.fresh(3, start_id=0).check_against(world)
        MarkerSet.for_world(world, 3).check_against(world)

    def test_stamped(self):
        markers = MarkerSet.fresh(2, start_id=50)
        self.assertEqual({a.timestamp for a in markers.stamped(5000.0, calibrated=4400.2)}, {4400.2})
        self.assertEqual({a.timestamp for a in markers.stamped(5000.0)}, {4400.0})
        fixed = MarkerSet(MarkerSet.fresh(2, start_id=50).addrs, near_expiry_age_s=599.0)
        self.assertEqual({a.timestamp for a in fixed.stamped(5000.0, calibrated=4400.2)}, {5000.0 - 599.0})
        fresh = MarkerSet.fresh(2, start_id=50, timestamp_policy="fresh")
        self.assertEqual({a.timestamp for a in fresh.stamped(5000.0)}, {5000.0})


class TestDegreeEstimate(unittest.TestCase):

    def test_lone_server_echoes_everything(self):
        # with no other link every marker reaches the single listener
        estimate = degree_experiment(0, 100, 1, seed=3)
        self.assertEqual(estimate.received, 100)
        self.assertAlmostEqual(estimate.echo_fraction, 1.0)
        self.assertAlmostEqual(estimate.k_with_listeners, 1.0)
        self.assertEqual(estimate.k_hat, 0.0)

    def test_average_within_ten_percent(self):
        table = degree_table([(10, 500, 2)], runs=10, seed=4)
        self.assertAlmostEqual(table["average"][0], 10, delta=1.0)
        self.assertEqual(list(table.columns), ["k", "markers", "listeners"] + [f"try_{i}" for i in range(1, 11)] + ["average"])

    def test_unreachable_markers(self):
        estimates = [degree_experiment(10, 500, 2, seed=s, reachable=False).k_hat for s in range(10)]
        self.assertAlmostEqual(float(np.mean(estimates)), 10, delta=1.5)

    def test_expired_markers_give_no_signal(self):
        world = build_world(WorldConfig(n_servers=12, seed=2))
        start = world.allocate_id()
        markers = MarkerSet([NetAddress(start)], near_expiry_age_s=600.0)
        with self.assertRaises(InsufficientSignalError):
            estimate_degree(world, 0, markers)

    def test_client_is_unreachable(self):
        world = build_world(WorldConfig(n_servers=12, n_clients=1, seed=2))
        with self.assertRaises(UnreachablePeerError):
            estimate_degree(world, world.client_ids[0], MarkerSet.for_world(world, 10))

    @unittest.skipUnless(settings.slow_tests, "set GOSSIPLAB_SLOW_TESTS=1")
    def test_published_rows(self):
        table = degree_table(runs=8, seed=1)
        for k, average in zip(table["k"], table["average"]):
            self.assertAlmostEqual(average, k, delta=0.1 * k)


class TestDiscovery(unittest.TestCase):

    def test_small_worlds(self):
        for seed in range(100):
            result = discovery_experiment(connections=12, server_neighbors=5, candidates=30, seed=seed)
            self.assertEqual(result["discovered"], 5, f"seed {seed}")
            self.assertEqual(result["false_positives"], 0, f"seed {seed}")

    def test_table_repeats_rows(self):
        table = discovery_table([(12, 5, 30)], seed=2, n_markers=1000, runs=3)
        self.assertEqual(list(table["runs"]), [3])
        self.assertEqual(list(table["discovered"]), [5.0])
        self.assertEqual(list(table["min_discovered"]), [5])
        self.assertEqual(list(table["false_positives"]), [0])
        with self.assertRaises(ValueError):
            discovery_table([(12, 5, 30)], runs=0)

    def test_discover_connection(self):
        from gossiplab.topology_probe import discovery_world

        world = discovery_world(connections=10, server_neighbors=4, candidates=25, seed=9)
        neighbor = next(c.to_id for c in world.nodes[0].links if world.nodes[c.to_id].is_server)
        self.assertTrue(discover_connection(world, 0, neighbor))

    def test_enumerate_skips_self_and_clients(self):
        from gossiplab.topology_probe import discovery_world

        world = discovery_world(connections=10, server_neighbors=4, candidates=25, seed=9)
        found = enumerate_neighbors(world, 0, [0] + list(world.client_ids) + [1, 2, 3, 4])
        self.assertEqual(found, [1, 2, 3, 4])

    def test_degenerate_pair(self):
        world = build_world(WorldConfig(n_servers=12, seed=2))
        with self.assertRaises(DegeneratePairError):
            discover_connection(world, 3, 3)

    def test_unreachable_pair(self):
        world = build_world(WorldConfig(n_servers=12, n_clients=1, seed=2))
        with self.assertRaises(UnreachablePeerError):
            discover_connection(world, 0, world.client_ids[0])

    @unittest.skipUnless(settings.slow_tests, "set GOSSIPLAB_SLOW_TESTS=1")
    def test_published_rows(self):
        table = discovery_table(seed=1)
        self.assertEqual(list(table["discovered"]), list(table["not_behind_nat"]))
        self.assertEqual(int(table["false_positives"].sum()), 0)


class TestGetaddrChain(unittest.TestCase):

    def test_full_database(self):
        started = time.perf_counter()
        self.assertAlmostEqual(markov_getaddr_expectation(ADDRDB_CAPACITY, GETADDR_MAX), 81, delta=4)
        self.assertLess(time.perf_counter() - started, 30.0)

    def test_transitions_match_hypergeometric(self):
        nxt, probs = _transitions(60, 7, 25)
        overlap = 25 + 7 - nxt
        np.testing.assert_allclose(probs, stats.hypergeom.pmf(overlap, 60, 25, 7), rtol=1e-9)
        self.assertAlmostEqual(float(probs.sum()), 1.0)

    def test_single_reply_reads_everything(self):
        self.assertAlmostEqual(markov_getaddr_expectation(100, 100), 1.0)

    def test_methods_agree(self):
        recurrence = markov_getaddr_expectation(200, 23)
        fundamental = markov_getaddr_expectation(200, 23, method="fundamental")
        self.assertAlmostEqual(recurrence, fundamental, places=8)

    def test_against_simulation(self):
        expected = markov_getaddr_expectation(20, 5)
        rng = np.random.default_rng(8)
        counts = simulate_getaddr_rounds(20, 5, 20_000, rng, method="counts")
        direct = simulate_getaddr_rounds(20, 5, 20_000, rng, method="direct")
        self.assertAlmostEqual(counts.mean(), expected, delta=0.01 * expected)
        self.assertAlmostEqual(direct.mean(), expected, delta=0.01 * expected)

    def test_miss_probability(self):
        self.assertAlmostEqual(residual_miss_probability(20480, 2500, 80) / 3.0e-5, 1.0, delta=0.02)
        self.assertEqual(residual_miss_probability(10, 10, 1), 0.0)

    def test_poll_coverage(self):
        self.assertEqual(poll_coverage(0, 5), 0.0)
        self.assertAlmostEqual(poll_coverage(2500, 1), 2500 / 20480)
        self.assertAlmostEqual(poll_coverage(40, 2), 1 - 0.77**2)

    def test_bad_arguments(self):
        with self.assertRaisesRegex(ValueError, "never absorbs"):
            markov_getaddr_expectation(100, 0)
        with self.assertRaises(ValueError):
            markov_getaddr_expectation(10, 11)
        with self.assertRaises(ValueError):
            markov_getaddr_expectation(0, 0)
        with self.assertRaises(ValueError):
            markov_getaddr_expectation(5000, 10, method="fundamental")
        with self.assertRaises(ValueError):
            markov_getaddr_expectation(10, 2, method="guess")
        with self.assertRaises(ValueError):
            simulate_getaddr_rounds(10, 2, 0, np.random.default_rng(0))


if __name__ == '__main__':
    unittest.main()

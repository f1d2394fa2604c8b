import unittest

import numpy as np
from scipy import stats
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

from gossiplab.protocol_model import (
    ADDR_MAX_AGE_S,
    DAY_S,
    GETADDR_MAX,
    AddrDb,
    Connection,
    NetAddress,
    NoNeighborsError,
    Reachability,
    getaddr_reply_size,
    getaddr_response,
    is_immediate,
    misbehave,
    relay_targets,
    responsible_connections,
    responsible_nodes,
    schedule_tx_forwarding,
    should_forward_addr,
    trickle_pick,
)


def make_links(n, epoch=0):
    return [Connection(0, i + 1, nonce=1000 + 7 * i, established_at=0.0, history_epoch=epoch) for i in range(n)]


class TestNetAddress(unittest.TestCase):

    def test_negative_timestamp_rejected(self):
        with self.assertRaises(ValueError):
            NetAddress(1, Reachability.REACHABLE, -1.0)

    def test_restamped_keeps_owner(self):
        addr = NetAddress(5, Reachability.UNREACHABLE, 10.0).restamped(20.0)
        self.assertEqual((addr.owner, addr.timestamp, addr.reachable), (5, 20.0, False))


class TestResponsibleNodes(unittest.TestCase):

    def test_reachable_goes_to_two(self):
        links = make_links(8)
        addr = NetAddress(42, Reachability.REACHABLE, 0.0)
        self.assertEqual(len(responsible_connections(addr, links, salt=3, day=0)), 2)

    def test_unreachable_goes_to_one(self):
        links = make_links(8)
        addr = NetAddress(42, Reachability.UNREACHABLE, 0.0)
        self.assertEqual(len(responsible_connections(addr, links, salt=3, day=0)), 1)

    def test_single_neighbor(self):
        links = make_links(1)
        addr = NetAddress(42, Reachability.REACHABLE, 0.0)
        self.assertEqual(responsible_connections(addr, links, salt=3, day=0), links)

    def test_no_neighbors(self):
        self.assertEqual(responsible_connections(NetAddress(1), [], salt=3, day=0), [])

    @given(
        owner=st.integers(min_value=0, max_value=2**40),
        salt=st.integers(min_value=0, max_value=2**63),
        day=st.integers(min_value=0, max_value=10_000),
        order=st.permutations(list(range(10))),
    )
    @hyp_settings(max_examples=50, deadline=None)
    def test_choice_ignores_neighbor_order(self, owner, salt, day, order):
        links = make_links(10)
        shuffled = [links[i] for i in order]
        addr = NetAddress(owner, Reachability.REACHABLE, 0.0)
        first = {c.nonce for c in responsible_connections(addr, links, salt, day)}
        second = {c.nonce for c in responsible_connections(addr, shuffled, salt, day)}
        self.assertEqual(first, second)

    def test_pairs_spread_evenly(self):
        links = make_links(100)
        counts = np.zeros(101)
        for owner in range(5000):
            for node in responsible_nodes(NetAddress(owner), links, salt=17, day=3):
                counts[node] += 1
        self.assertEqual(counts.sum(), 10_000)
        self.assertGreater(stats.chisquare(counts[1:]).pvalue, 1e-4)

    def test_choice_changes_across_days(self):
        links = make_links(20)
        addr = NetAddress(9, Reachability.REACHABLE, 0.0)
        picks = {tuple(c.nonce for c in responsible_connections(addr, links, 11, day)) for day in range(30)}
        self.assertGreater(len(picks), 1)


class TestAddrForwarding(unittest.TestCase):

    def setUp(self):
        self.conn = make_links(1)[0]
        self.addr = NetAddress(77, Reachability.REACHABLE, 1000.0)

    def test_fresh_address_forwarded(self):
        self.assertTrue(should_forward_addr(1, self.addr, 1000.0 + ADDR_MAX_AGE_S, self.conn))

    def test_stale_address_dropped(self):
        self.assertFalse(should_forward_addr(1, self.addr, 1000.0 + ADDR_MAX_AGE_S + 1, self.conn))

    def test_large_message_dropped(self):
        self.assertFalse(should_forward_addr(11, self.addr, 1000.0, self.conn))
        self.assertTrue(should_forward_addr(10, self.addr, 1000.0, self.conn))

    def test_history_blocks_repeat(self):
        self.conn.mark_addr_sent(77)
        self.assertFalse(should_forward_addr(1, self.addr, 1000.0, self.conn))

    def test_history_rolls_over_each_day(self):
        self.conn.mark_addr_sent(77)
        addr = self.addr.restamped(DAY_S + 10.0)
        self.assertTrue(should_forward_addr(1, addr, DAY_S + 20.0, self.conn))
        self.assertEqual(self.conn.history_epoch, 1)

    def test_relay_targets_subset_of_responsible(self):
        links = make_links(8)
        addr = NetAddress(3, Reachability.REACHABLE, 0.0)
        chosen = responsible_connections(addr, links, 5, 0)
        chosen[0].mark_addr_sent(3)
        targets = relay_targets(addr, 1, 10.0, links, 5)
        self.assertEqual(targets, chosen[1:])


class TestTransactions(unittest.TestCase):

    def test_immediate_share_near_quarter(self):
        share = np.mean([is_immediate(tx, salt=99) for tx in range(4000)])
        self.assertGreater(share, 0.22)
        self.assertLess(share, 0.28)

    def test_schedule_skips_known(self):
        links = make_links(4)
        links[0].mark_tx_sent(5)
        schedule = schedule_tx_forwarding(5, links, salt=1)
        self.assertEqual(schedule.queued_to, links[1:])
        # queuing twice does not duplicate
        self.assertEqual(schedule_tx_forwarding(5, links, salt=1).queued_to, [])

    def test_trickle_pick_empty(self):
        with self.assertRaises(NoNeighborsError):
            trickle_pick([], np.random.default_rng(0))

    def test_trickle_pick_uniform(self):
        links = make_links(4)
        rng = np.random.default_rng(1)
        counts = np.bincount([trickle_pick(links, rng).to_id for _ in range(4000)], minlength=5)[1:]
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-4)


class TestAddrDb(unittest.TestCase):

    def test_newer_timestamp_replaces(self):
        db = AddrDb(salt=1)
        rng = np.random.default_rng(0)
        self.assertTrue(db.insert(NetAddress(1, Reachability.REACHABLE, 10.0), rng))
        self.assertFalse(db.insert(NetAddress(1, Reachability.REACHABLE, 20.0), rng))
        self.assertFalse(db.insert(NetAddress(1, Reachability.REACHABLE, 5.0), rng))
        self.assertEqual(db.get(1).timestamp, 20.0)

    @given(capacity=st.integers(min_value=1, max_value=50), n=st.integers(min_value=0, max_value=200))
    @hyp_settings(max_examples=40, deadline=None)
    def test_capacity_bound(self, capacity, n):
        db = AddrDb(salt=1, capacity=capacity)
        rng = np.random.default_rng(n)
        for owner in range(n):
            db.insert(NetAddress(owner), rng)
        self.assertEqual(len(db), min(n, capacity))
        self.assertEqual({a.owner for a in db.entries} <= set(range(n)), True)

    def test_sample_distinct(self):
        db = AddrDb(salt=1)
        rng = np.random.default_rng(0)
        for owner in range(100):
            db.insert(NetAddress(owner), rng)
        owners = [a.owner for a in db.sample(40, rng)]
        self.assertEqual(len(set(owners)), 40)


class TestGetaddr(unittest.TestCase):

    def test_reply_sizes(self):
        self.assertEqual(getaddr_reply_size(100), 23)
        self.assertEqual(getaddr_reply_size(0), 0)
        self.assertEqual(getaddr_reply_size(20480), GETADDR_MAX)

    @given(st.integers(min_value=0, max_value=100_000))
    def test_reply_size_bounds(self, size):
        reply = getaddr_reply_size(size)
        self.assertLessEqual(reply, min(size, GETADDR_MAX))

    def test_response_drawn_from_db(self):
        db = AddrDb(salt=1)
        rng = np.random.default_rng(0)
        for owner in range(200):
            db.insert(NetAddress(owner), rng)
        reply = getaddr_response(db, rng)
        self.assertEqual(len(reply), 46)
        self.assertTrue(all(a.owner in db for a in reply))


class TestMisbehave(unittest.TestCase):

    def test_threshold(self):
        self.assertEqual(misbehave(0, 99), (99, False))
        self.assertEqual(misbehave(99, 1), (100, True))

    def test_negative_penalty(self):
        with self.assertRaises(ValueError):
            misbehave(0, -1)


if __name__ == '__main__':
    unittest.main()

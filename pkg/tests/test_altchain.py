import unittest

from gossiplab.altchain import (
    DAY_S,
    BlockMeta,
    CheckpointRule,
    PlanInfeasibleError,
    build_plan_frame,
    checkpoint_floor,
    median_time_ok,
    median_time_past,
    plan_alternative_chain,
    plan_cost,
    plan_summary,
    retarget,
    validate_chain,
)

RULE = CheckpointRule(T_c=0.0, Q_c=1.0)
FORK = BlockMeta(252_000, 14 * DAY_S, 1.0)


class TestRules(unittest.TestCase):

    def test_retarget_clamps(self):
        self.assertEqual(retarget(1.0, 0.0, 1 * DAY_S), 4.0)
        self.assertEqual(retarget(1.0, 0.0, 100 * DAY_S), 0.25)
        self.assertAlmostEqual(retarget(2.0, 0.0, 14 * DAY_S), 2.0)
        with self.assertRaises(ValueError):
            retarget(1.0, 5.0, 5.0)

    def test_median(self):
        prev = list(range(1, 12))
        self.assertFalse(median_time_ok(6, prev))
        self.assertTrue(median_time_ok(7, prev))
        self.assertTrue(median_time_ok(0, []))
        self.assertEqual(median_time_past([4, 1, 3, 2]), 3)
        with self.assertRaises(ValueError):
            median_time_ok(20, list(range(12)))

    def test_floor_halves_every_four_weeks(self):
        self.assertAlmostEqual(checkpoint_floor(28.0, RULE), 0.5)
        self.assertAlmostEqual(1 / checkpoint_floor(134.0, RULE), 2 ** (134 / 28))
        with self.assertRaises(ValueError):
            checkpoint_floor(-1.0, RULE)


class TestPlanner(unittest.TestCase):

    def test_single_period_quarters_difficulty(self):
        plan = plan_alternative_chain(FORK, 2016, now=134.0, rule=RULE)
        self.assertEqual(plan.blocks[-1].difficulty, 0.25)
        self.assertEqual(len(plan.mined), 2017)
        self.assertIsNone(validate_chain(plan.blocks, RULE, as_of=134.0))

    def test_long_replacement_cost(self):
        plan = plan_alternative_chain(FORK, 27_032, now=134.0, rule=RULE)
        cost = plan_cost(plan, FORK.difficulty)
        self.assertGreaterEqual(cost, 1350)
        self.assertLessEqual(cost, 1500)
        self.assertLess(cost / 30, 50)
        self.assertAlmostEqual(plan.blocks[-1].difficulty, checkpoint_floor(134.0, RULE))
        self.assertTrue(all(b.timestamp <= 134 * DAY_S for b in plan.blocks))

    def test_more_blocks_cost_more(self):
        short = plan_alternative_chain(FORK, 4032, now=134.0, rule=RULE)
        long = plan_alternative_chain(FORK, 8064, now=134.0, rule=RULE)
        self.assertGreater(long.total_work, short.total_work)

    def test_too_early(self):
        with self.assertRaises(PlanInfeasibleError):
            plan_alternative_chain(FORK, 2016, now=20.0, rule=RULE)

    def test_bad_arguments(self):
        with self.assertRaises(ValueError):
            plan_alternative_chain(BlockMeta(252_001, 14 * DAY_S, 1.0), 2016, now=134.0, rule=RULE)
        with self.assertRaises(ValueError):
            plan_alternative_chain(FORK, 100, now=134.0, rule=RULE)

    def test_frame_and_summary(self):
        plan = plan_alternative_chain(FORK, 2016, now=134.0, rule=RULE)
        frame = build_plan_frame(plan)
        self.assertEqual(int(frame["mined"].sum()), 2017)
        summary = plan_summary(plan, reference_difficulty=0.5)
        self.assertAlmostEqual(summary["cost_in_reference_blocks"], 2 * summary["cost_in_fork_blocks"])


class TestValidateChain(unittest.TestCase):

    def setUp(self):
        self.plan = plan_alternative_chain(FORK, 4032, now=134.0, rule=RULE)

    def tamper(self, pos, factor):
        blocks = list(self.plan.blocks)
        blk = blocks[pos]
        blocks[pos] = BlockMeta(blk.index, blk.timestamp, blk.difficulty * factor)
        return blocks

    def test_mid_period_change(self):
        violation = validate_chain(self.tamper(3000, 1.01), RULE, as_of=134.0)
        self.assertEqual(violation.index, FORK.index + 3000)

    def test_wrong_retarget(self):
        violation = validate_chain(self.tamper(2016, 1.01), RULE, as_of=134.0)
        self.assertEqual(violation.index, FORK.index + 2016)
        self.assertIn("retarget", violation.reason)

    def test_below_floor(self):
        blocks = [BlockMeta(10, 1 * DAY_S, 0.5)]
        self.assertEqual(validate_chain(blocks, RULE).reason, "below checkpoint floor")

    def test_old_timestamp(self):
        blocks = [BlockMeta(i, 1000.0 + i, 1.0) for i in range(12)] + [BlockMeta(12, 1000.0, 1.0)]
        self.assertEqual(validate_chain(blocks, CheckpointRule(T_c=10.0, Q_c=1.0)).index, 12)

    def test_gap_in_indices(self):
        with self.assertRaises(ValueError):
            validate_chain([BlockMeta(1, 0.0, 1.0), BlockMeta(3, 1.0, 1.0)], RULE)


if __name__ == '__main__':
    unittest.main()

import unittest

import numpy as np

from gossiplab.analysis import (
    ChurnInput,
    CostModelInput,
    SuccessModelInput,
    attack_cost,
    average_p_addr,
    binomial_spectrum,
    churn_false_positive_exact,
    churn_false_positive_rate,
    churn_table,
    collision_probability,
    cost_table,
    default_churn_input,
    hypergeom,
    p_addr,
    p_tx,
    success_probability,
    success_spectrum,
    success_table,
)


class TestElementary(unittest.TestCase):

    def test_p_addr(self):
        self.assertAlmostEqual(p_addr(8, 10), 1 - 0.8 * 7 / 9)
        self.assertEqual(p_addr(0, 10), 1.0)
        self.assertEqual(p_addr(10, 10), 0.0)
        with self.assertRaises(ValueError):
            p_addr(11, 10)

    def test_p_tx(self):
        self.assertEqual(p_tx(50, 125), 0.4)
        with self.assertRaises(ValueError):
            p_tx(5, 0)

    def test_collision(self):
        self.assertAlmostEqual(collision_probability(10, 3, 8000) / 2.8125e-8, 1.0, places=6)
        with self.assertRaises(ValueError):
            collision_probability(2, 3, 8000)

    def test_hypergeom_support(self):
        self.assertEqual(hypergeom(4, 3, 8, 10), 0.0)
        self.assertAlmostEqual(sum(hypergeom(x, 5, 6, 10) for x in range(6)), 1.0)

    def test_spectrum_normalized(self):
        self.assertAlmostEqual(binomial_spectrum(0.34, 8).sum(), 1.0)


class TestAverageAddr(unittest.TestCase):

    def test_full_and_empty_servers(self):
        self.assertEqual(average_p_addr({0: 1.0}, m=50), 0.0)
        self.assertEqual(average_p_addr({125: 1.0}, m=50), 1.0)
        self.assertAlmostEqual(average_p_addr({0: 1.0, 125: 1.0}, m=50), 0.5)

    def test_bad_histogram(self):
        with self.assertRaises(ValueError):
            average_p_addr({}, m=50)
        with self.assertRaises(ValueError):
            average_p_addr({200: 1.0}, m=50)


class TestSuccessModel(unittest.TestCase):

    def test_low_p_row(self):
        model = SuccessModelInput(p_addr_avg=0.34)
        expected = [0.721209, 0.355249, 0.112257, 0.0223, 0.0026]
        for M, value in enumerate(expected, start=1):
            self.assertAlmostEqual(success_probability(M, model), value, delta=5e-4)

    def test_three_tuple_column(self):
        table = success_table()
        self.assertEqual(list(table["p_addr"]), [0.64, 0.86, 0.34])
        self.assertAlmostEqual(table["p_success_3"][0], 0.4298, delta=5e-4)
        self.assertAlmostEqual(table["p_success_3"][1], 0.6705, delta=5e-4)

    def test_spectrum_sums_to_one(self):
        self.assertAlmostEqual(success_spectrum(SuccessModelInput(p_addr_avg=0.5)).sum(), 1.0)

    def test_monotone_in_p(self):
        values = [success_probability(3, SuccessModelInput(p_addr_avg=p)) for p in np.linspace(0, 1, 11)]
        self.assertEqual(values[0], 0.0)
        self.assertTrue(all(b >= a for a, b in zip(values, values[1:])))

    def test_input_validation(self):
        with self.assertRaises(ValueError):
            SuccessModelInput(p_addr_avg=1.2)
        with self.assertRaises(ValueError):
            SuccessModelInput(p_addr_avg=0.5, p3=[1.0])
        with self.assertRaises(ValueError):
            SuccessModelInput(p_addr_avg=0.5, p3=[0.5] * 9)
        with self.assertRaises(ValueError):
            success_probability(0, SuccessModelInput(p_addr_avg=0.5))


def fixed_churn(m, n, arrivals, departures):
    new = [0.0] * arrivals + [1.0]
    gone = [0.0] * departures + [1.0]
    return ChurnInput(m=m, n=n, dt_grid_s=[0.0, 100.0], new_connection_pmf=[new, new], disconnect_pmf=[gone, gone])


class TestChurn(unittest.TestCase):

    def test_zero_dt(self):
        churn = default_churn_input(50, 20)
        self.assertEqual(churn_false_positive_exact(churn, 0), 0.0)
        self.assertEqual(churn_false_positive_rate(churn, 0, runs=10), 0.0)

    def test_one_new_link(self):
        # the new link leaks unless both attacker links still rank first
        self.assertAlmostEqual(churn_false_positive_exact(fixed_churn(2, 0, 1, 0), 50.0), 2 / 3)

    def test_departure_alone_never_leaks(self):
        self.assertEqual(churn_false_positive_exact(fixed_churn(0, 2, 0, 1), 50.0), 0.0)

    def test_simulation_matches_exact(self):
        churn = default_churn_input(50, 20)
        rate = churn_false_positive_rate(churn, 600, runs=20_000, rng=np.random.default_rng(2))
        self.assertAlmostEqual(rate, churn_false_positive_exact(churn, 600), delta=0.015)

    def test_rate_grows_with_delay(self):
        churn = default_churn_input(50, 20)
        exact = [churn_false_positive_exact(churn, dt) for dt in (0, 60, 300, 600, 1200, 1800, 3600)]
        self.assertTrue(all(b >= a for a, b in zip(exact, exact[1:])), exact)
        short = churn_false_positive_rate(churn, 600, runs=5_000, rng=np.random.default_rng(4))
        long = churn_false_positive_rate(churn, 3600, runs=5_000, rng=np.random.default_rng(4))
        self.assertLessEqual(short, long)

    def test_table(self):
        table = churn_table(default_churn_input(50, 20), [0, 300], runs=500, seed=3)
        self.assertEqual(list(table.columns), ["m", "n", "dt_s", "simulated", "exact"])
        self.assertEqual(table["exact"][0], 0.0)

    def test_bad_input(self):
        with self.assertRaises(ValueError):
            ChurnInput(m=1, n=0, dt_grid_s=[0.0], new_connection_pmf=[[1.0]], disconnect_pmf=[[1.0]])
        with self.assertRaises(ValueError):
            default_churn_input(50, 20).pmfs_at(-1)


class TestCost(unittest.TestCase):

    def test_default_month(self):
        result = attack_cost(CostModelInput())
        self.assertAlmostEqual(result.traffic_gb_per_period, 24.21, delta=0.01)
        self.assertAlmostEqual(result.traffic_gb_per_month, 104_606, delta=5)
        self.assertAlmostEqual(result.rental, 1250.0)
        self.assertAlmostEqual(result.overage, 109.2, delta=0.1)
        self.assertLess(result.monthly_cost, 1500)

    def test_no_overage_under_allowance(self):
        self.assertEqual(attack_cost(CostModelInput(n_servers=100)).overage, 0.0)

    def test_table_row(self):
        self.assertEqual(len(cost_table(CostModelInput())), 1)

    def test_validation(self):
        with self.assertRaises(ValueError):
            CostModelInput(rebroadcast_period_s=0)
        with self.assertRaises(ValueError):
            CostModelInput(server_month_price=-1)


if __name__ == '__main__':
    unittest.main()

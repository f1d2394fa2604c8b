"""
gossiplab/analysis.py

Closed-form side of the attack, used as the oracle for simulator results:

- p_addr / p_tx: chance that an attacker link is a responsible node or the first trickle pick
- collision_probability: chance that random top-q servers match somebody's entry tuple
- success_probability: chance that at least M detected entry nodes show up in the top-q,
  built from a binomial detection spectrum, a hypergeometric overlap and an empirical
  histogram of entry nodes among the top-q
- churn_false_positive_rate: Monte-Carlo of responsible-pair changes on an entry node
- attack_cost: traffic and monthly price of the periodic candidate rebroadcast

Example:
    from gossiplab.analysis import SuccessModelInput, success_probability
    print(success_probability(3, SuccessModelInput(p_addr_avg=0.34)))

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Mapping, Optional, Sequence

# Import from external packages (requires a virtual environment)
import numpy as np
import pandas as pd
from scipy import special, stats

# Import local modules
from utils.logger import logger

#####################################
# Define Constants
#####################################

# Share of transactions with L entry nodes among the first ten announcers, L = 0..8 (testnet)
P3_TESTNET: List[float] = [0.04, 0.02, 0.055, 0.1225, 0.245, 0.2125, 0.2125, 0.0925, 0.0]

# Deanonymization rates measured on testnet at the two attacker strengths
MEASURED_TESTNET_RATES: Dict[float, float] = {0.64: 0.41, 0.86: 0.599}

# 61,395 connections observed by one peer over 60 days
OBSERVED_CONNECTIONS_PER_HOUR = 61_395 / (60 * 24)

GIB = 2**30
NORMALIZATION_TOL = 1e-9
PMF_FLOOR = 1e-13

#####################################
# Define Elementary Probabilities
#####################################


def p_addr(n: int, N: int) -> float:
    """
    Probability that at least one of the two responsible links is an attacker link.

    Parameters:
        n (int): the entry node's own (non-attacker) connections.
        N (int): all connections, attacker links included.
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if not 0 <= n <= N:
        raise ValueError(f"n must be in [0, N], got n={n}, N={N}")
    return 1.0 - (n / N) * ((n - 1) / (N - 1))


def p_tx(m: int, N: int) -> float:
    """Probability that the first trickle pick is one of m attacker links out of N."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 <= m <= N:
        raise ValueError(f"m must be in [0, N], got m={m}, N={N}")
    return m / N


def collision_probability(q: int, tuple_size: int, N: int) -> float:
    """
    Raw C(q, t)^2 / N^t; values above 1 mean the model does not apply to such a small N.
    """
    if not q >= tuple_size >= 1:
        raise ValueError(f"need q >= tuple_size >= 1, got q={q}, tuple_size={tuple_size}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return float(special.comb(q, tuple_size, exact=True) ** 2) / float(N) ** tuple_size


def binomial_spectrum(p: float, N: int) -> np.ndarray:
    """Binomial pmf over R = 0..N detected entry nodes."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if N < 0:
        raise ValueError(f"N must be >= 0, got {N}")
    return stats.binom.pmf(np.arange(N + 1), N, p)


def hypergeom(q: int, L: int, R: int, N: int) -> float:
    """
    C(R, q) C(N - R, L - q) / C(N, L): chance that q of the L top-q entry nodes are among
    the R detected ones. Outside the support the value is 0.
    """
    if N < 0 or not 0 <= L <= N or not 0 <= R <= N:
        raise ValueError(f"need 0 <= L, R <= N, got L={L}, R={R}, N={N}")
    if q < 0 or q > min(L, R):
        return 0.0
    return float(stats.hypergeom.pmf(q, N, R, L))


def average_p_addr(slot_histogram: Mapping[int, float], m: int, max_connections: int = 125) -> float:
    """
    p_addr averaged over a distribution of free slots.

    A server with `free` open slots already holds max_connections - free links, and the
    attacker gets min(m, free) of the open ones.
    """
    total = float(sum(slot_histogram.values()))
    if total <= 0 or any(w < 0 for w in slot_histogram.values()):
        raise ValueError("slot_histogram needs non-negative weights with a positive sum")
    acc = 0.0
    for free, weight in slot_histogram.items():
        if not 0 <= free <= max_connections:
            raise ValueError(f"free slots {free} outside [0, {max_connections}]")
        n = max_connections - free
        N = n + min(m, free)
        acc += weight * (p_addr(n, N) if N >= 2 else 0.0)
    return acc / total


#####################################
# Define the Success Model
#####################################


@dataclass
class SuccessModelInput:
    p_addr_avg: float
    p3: List[float] = field(default_factory=lambda: list(P3_TESTNET))
    n_entry: int = 8
    top_q: int = 10

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_addr_avg <= 1.0:
            raise ValueError(f"p_addr_avg must be in [0, 1], got {self.p_addr_avg}")
        if len(self.p3) != self.n_entry + 1:
            raise ValueError(f"p3 needs {self.n_entry + 1} entries (L = 0..{self.n_entry}), got {len(self.p3)}")
        if any(p < 0 for p in self.p3) or abs(sum(self.p3) - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"p3 must be non-negative and sum to 1, sums to {sum(self.p3)}")
        if self.top_q < self.n_entry:
            raise ValueError("top_q must be >= n_entry")


def success_spectrum(model: SuccessModelInput) -> np.ndarray:
    """P(x detected entry nodes among the top-q), x = 0..n_entry."""
    p1 = binomial_spectrum(model.p_addr_avg, model.n_entry)
    spectrum = np.zeros(model.n_entry + 1)
    for L, p3 in enumerate(model.p3):
        if p3 == 0:
            continue
        for R, p_r in enumerate(p1):
            for x in range(min(L, R) + 1):
                spectrum[x] += hypergeom(x, L, R, model.top_q) * p_r * p3
    return spectrum


def success_probability(M: int, model: SuccessModelInput) -> float:
    """Chance that at least M detected entry nodes are among the first top_q announcers."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return float(success_spectrum(model)[M:].sum())


def success_table(
    p_values: Sequence[float] = (0.64, 0.86, 0.34), p3: Optional[Sequence[float]] = None, max_m: int = 5
) -> pd.DataFrame:
    """Predicted success for M = 1..max_m at each p_addr, next to the measured testnet rate."""
    rows = []
    for p in p_values:
        model = SuccessModelInput(p_addr_avg=p, p3=list(p3) if p3 is not None else list(P3_TESTNET))
        spectrum = success_spectrum(model)
        row = {"p_addr": p}
        for M in range(1, max_m + 1):
            row[f"p_success_{M}"] = float(spectrum[M:].sum())
        row["measured_3_tuple"] = MEASURED_TESTNET_RATES.get(p, float("nan"))
        rows.append(row)
    return pd.DataFrame(rows)


#####################################
# Define the Churn Model
#####################################


@dataclass
class ChurnInput:
    """
    Tabulated churn on one entry node.

    Row i of each table is the pmf of the number of new (or closed) connections over
    dt_grid_s[i] seconds; the column index is the count.
    """

    m: int
    n: int
    dt_grid_s: List[float]
    new_connection_pmf: List[List[float]]
    disconnect_pmf: List[List[float]]

    def __post_init__(self) -> None:
        if self.m < 0 or self.n < 0 or self.m + self.n < 2:
            raise ValueError(f"need m, n >= 0 and m + n >= 2, got m={self.m}, n={self.n}")
        if not self.dt_grid_s or not self.new_connection_pmf or not self.disconnect_pmf:
            raise ValueError("empty pdf tables")
        if len(self.new_connection_pmf) != len(self.dt_grid_s) or len(self.disconnect_pmf) != len(self.dt_grid_s):
            raise ValueError("pdf tables need one row per dt_grid_s entry")
        if any(b <= a for a, b in zip(self.dt_grid_s, self.dt_grid_s[1:])) or self.dt_grid_s[0] < 0:
            raise ValueError("dt_grid_s must be non-negative and increasing")
        for table in (self.new_connection_pmf, self.disconnect_pmf):
            for row in table:
                if not row or any(p < 0 for p in row) or sum(row) <= 0:
                    raise ValueError("pdf rows must be non-empty and non-negative with a positive sum")

    def pmfs_at(self, dt_s: float) -> tuple:
        """Pmfs at dt_s, mixing the two neighbouring grid rows linearly."""
        grid = self.dt_grid_s
        if dt_s < 0:
            raise ValueError(f"dt must be >= 0, got {dt_s}")
        if dt_s >= grid[-1]:
            i = j = len(grid) - 1
            w = 0.0
        elif dt_s <= grid[0]:
            i = j = 0
            w = 0.0
        else:
            j = int(np.searchsorted(grid, dt_s, side="right"))
            i = j - 1
            w = (dt_s - grid[i]) / (grid[j] - grid[i])
        return (
            _mix(self.new_connection_pmf[i], self.new_connection_pmf[j], w),
            _mix(self.disconnect_pmf[i], self.disconnect_pmf[j], w),
        )


def _mix(a: Sequence[float], b: Sequence[float], w: float) -> np.ndarray:
    size = max(len(a), len(b))
    left = np.zeros(size)
    right = np.zeros(size)
    left[: len(a)] = a
    right[: len(b)] = b
    mixed = (1 - w) * left / left.sum() + w * right / right.sum()
    return mixed / mixed.sum()


def _poisson_rows(rate_per_hour: float, dt_grid_s: Sequence[float], max_count: int) -> List[List[float]]:
    rows = []
    counts = np.arange(max_count + 1)
    for dt in dt_grid_s:
        pmf = stats.poisson.pmf(counts, rate_per_hour * dt / 3600.0)
        pmf[-1] += max(1.0 - pmf.sum(), 0.0)
        rows.append(pmf.tolist())
    return rows


def default_churn_input(
    m: int,
    n: int,
    arrival_rate_per_hour: float = OBSERVED_CONNECTIONS_PER_HOUR,
    departure_rate_per_hour: Optional[float] = None,
    dt_grid_s: Sequence[float] = (0, 60, 300, 600, 1200, 1800, 3600, 7200),
    max_count: int = 400,
) -> ChurnInput:
    """Poisson arrival and departure tables; departures default to the arrival rate."""
    if departure_rate_per_hour is None:
        departure_rate_per_hour = arrival_rate_per_hour
    return ChurnInput(
        m=m,
        n=n,
        dt_grid_s=list(dt_grid_s),
        new_connection_pmf=_poisson_rows(arrival_rate_per_hour, dt_grid_s, max_count),
        disconnect_pmf=_poisson_rows(departure_rate_per_hour, dt_grid_s, max_count),
    )


def _leaks(keys: np.ndarray, attacker: np.ndarray, n_departed: int, new_keys: np.ndarray, rng) -> bool:
    t0 = set(np.argsort(keys)[:2].tolist())
    honest = np.flatnonzero(~attacker)
    alive = np.ones(keys.size, dtype=bool)
    if n_departed:
        alive[rng.choice(honest, size=min(n_departed, honest.size), replace=False)] = False
    survivors = np.flatnonzero(alive)
    merged = np.concatenate([keys[survivors], new_keys])
    for pos in np.argsort(merged)[:2]:
        if pos >= survivors.size:
            return True
        link = int(survivors[pos])
        if not attacker[link] and link not in t0:
            return True
    return False


def churn_false_positive_rate(
    churn: ChurnInput, dt_s: float, runs: int = 10_000, rng: Optional[np.random.Generator] = None
) -> float:
    """
    Share of runs in which an entry node relays the client address over a non-attacker
    link dt_s seconds after the attacker's last rebroadcast.

    Links get uniform ranking keys; the two smallest form the responsible pair. Departures
    hit non-attacker links only and new links are never attacker links.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if dt_s == 0:
        return 0.0
    rng = rng if rng is not None else np.random.default_rng()
    new_pmf, gone_pmf = churn.pmfs_at(dt_s)
    arrivals = rng.choice(new_pmf.size, size=runs, p=new_pmf)
    departures = rng.choice(gone_pmf.size, size=runs, p=gone_pmf)
    total = churn.m + churn.n
    attacker = np.zeros(total, dtype=bool)
    attacker[: churn.m] = True
    leaks = 0
    for a, d in zip(arrivals, departures):
        keys = rng.random(total)
        if _leaks(keys, attacker, int(d), rng.random(int(a)), rng):
            leaks += 1
    return leaks / runs


def churn_false_positive_exact(churn: ChurnInput, dt_s: float) -> float:
    """
    Exact counterpart of churn_false_positive_rate.

    All link keys are exchangeable, so the merged key order is a uniform shuffle of
    attacker, surviving, departed and new links; walking it from the smallest key decides
    both responsible pairs.
    """
    if dt_s == 0:
        return 0.0
    new_pmf, gone_pmf = churn.pmfs_at(dt_s)
    m, n = churn.m, churn.n

    @lru_cache(maxsize=None)
    def leak(a_rem: int, s_rem: int, d_rem: int, x_rem: int, old_rank: int, picked: int) -> float:
        total = a_rem + s_rem + d_rem + x_rem
        if picked == 2 or a_rem + s_rem + x_rem == 0:
            return 0.0
        p = 0.0
        if a_rem:
            p += a_rem / total * leak(a_rem - 1, s_rem, d_rem, x_rem, min(old_rank + 1, 2), picked + 1)
        if s_rem:
            stays_responsible = old_rank < 2
            cont = leak(a_rem, s_rem - 1, d_rem, x_rem, min(old_rank + 1, 2), picked + 1) if stays_responsible else 1.0
            p += s_rem / total * cont
        if d_rem:
            p += d_rem / total * leak(a_rem, s_rem, d_rem - 1, x_rem, min(old_rank + 1, 2), picked)
        if x_rem:
            p += x_rem / total
        return p

    rate = 0.0
    for a, pa in enumerate(new_pmf):
        if pa < PMF_FLOOR:
            continue
        for d, pd_ in enumerate(gone_pmf):
            if pd_ < PMF_FLOOR:
                continue
            gone = min(d, n)
            rate += pa * pd_ * leak(m, n - gone, gone, a, 0, 0)
    return rate


def churn_table(
    churn: ChurnInput, dt_values_s: Sequence[float], runs: int = 10_000, seed: int = 1
) -> pd.DataFrame:
    """Simulated and exact leak rates per dt; each dt gets its own child stream."""
    logger.info(f"FUNCTION START: churn_table with m={churn.m}, n={churn.n}, runs={runs}")
    streams = np.random.SeedSequence(seed).spawn(len(dt_values_s))
    rows = []
    for dt, stream in zip(dt_values_s, streams):
        rows.append(
            {
                "m": churn.m,
                "n": churn.n,
                "dt_s": dt,
                "simulated": churn_false_positive_rate(churn, dt, runs, np.random.default_rng(stream)),
                "exact": churn_false_positive_exact(churn, dt),
            }
        )
    return pd.DataFrame(rows)


#####################################
# Define the Cost Model
#####################################


@dataclass
class CostModelInput:
    n_servers: int = 8000
    n_candidates: int = 100_000
    addr_msg_bytes: int = 325
    addrs_per_msg: int = 10
    rebroadcast_period_s: float = 600.0
    attacker_servers: int = 50
    server_month_price: float = 25.0
    included_gb_per_server: float = 1000.0
    overage_price_per_1000_gb: float = 2.0
    month_days: int = 30

    def __post_init__(self) -> None:
        positives = {
            "n_servers": self.n_servers,
            "addr_msg_bytes": self.addr_msg_bytes,
            "addrs_per_msg": self.addrs_per_msg,
            "rebroadcast_period_s": self.rebroadcast_period_s,
            "attacker_servers": self.attacker_servers,
            "month_days": self.month_days,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if self.n_candidates < 0 or self.included_gb_per_server < 0:
            raise ValueError("n_candidates and included_gb_per_server must be >= 0")
        if self.server_month_price < 0 or self.overage_price_per_1000_gb < 0:
            raise ValueError("prices must be >= 0")


@dataclass
class AttackCost:
    traffic_gb_per_period: float
    traffic_gb_per_month: float
    rental: float
    overage: float
    monthly_cost: float


def attack_cost(cost: CostModelInput) -> AttackCost:
    """Traffic (binary GB) of one rebroadcast round and of a month, and the monthly bill."""
    messages = math.ceil(cost.n_candidates / cost.addrs_per_msg)
    per_period = cost.n_servers * messages * cost.addr_msg_bytes / GIB
    periods = cost.month_days * 86400 / cost.rebroadcast_period_s
    per_month = per_period * periods
    rental = cost.attacker_servers * cost.server_month_price
    excess = max(per_month - cost.attacker_servers * cost.included_gb_per_server, 0.0)
    overage = excess / 1000.0 * cost.overage_price_per_1000_gb
    return AttackCost(per_period, per_month, rental, overage, rental + overage)


def cost_table(cost: CostModelInput) -> pd.DataFrame:
    result = attack_cost(cost)
    return pd.DataFrame(
        [
            {
                "n_servers": cost.n_servers,
                "n_candidates": cost.n_candidates,
                "traffic_gb_per_period": result.traffic_gb_per_period,
                "traffic_gb_per_month": result.traffic_gb_per_month,
                "rental": result.rental,
                "overage": result.overage,
                "monthly_cost": result.monthly_cost,
            }
        ]
    )

"""
gossiplab/altchain.py

Difficulty arithmetic and a planner for a low-difficulty replacement chain.

Rules modelled (real-valued difficulty, timestamps in seconds):
- block i with i % 2016 != 0 keeps the difficulty of block i - 1
- block i with i % 2016 == 0 multiplies it by 14 / dT, dT = ts[i-1] - ts[i-2016] in days,
  clamped to [0.25, 4]
- a timestamp must be strictly greater than the median of the 11 previous ones
- no difficulty may fall below Q_c / 2^((T - T_c) / 28), the checkpoint floor

The planner keeps the honest retarget period that starts at the fork point, re-dates its
last block so the next retarget divides by 4, then packs every later period one second
apart above the median and closes it with a late timestamp, until the floor binds.

Example:
    rule = CheckpointRule(T_c=0.0, Q_c=1.0)
    plan = plan_alternative_chain(BlockMeta(252000, 14 * 86400, 1.0), 27032, now=134.0, rule=rule)
    print(plan_cost(plan, 1.0))

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

# Import from external packages (requires a virtual environment)
import pandas as pd

# Import local modules
from utils.logger import logger

#####################################
# Define Constants and Errors
#####################################

RETARGET_INTERVAL = 2016
TARGET_SPAN_DAYS = 14.0
MAX_MULTIPLIER = 4.0
MIN_MULTIPLIER = 0.25
MEDIAN_WINDOW = 11
FLOOR_HALVING_DAYS = 28.0
DAY_S = 86400.0
HONEST_SPACING_S = 600.0
REL_TOL = 1e-9


class PlanInfeasibleError(ValueError):
    """The planner cannot continue without breaking a chain rule at `index`."""

    def __init__(self, index: int, reason: str):
        super().__init__(f"block {index}: {reason}")
        self.index = index
        self.reason = reason


#####################################
# Define Domain Types
#####################################


@dataclass(frozen=True)
class BlockMeta:
    index: int
    timestamp: float
    difficulty: float

    def __post_init__(self) -> None:
        if self.difficulty <= 0:
            raise ValueError(f"Block {self.index} difficulty must be > 0, got {self.difficulty}")


@dataclass(frozen=True)
class CheckpointRule:
    T_c: float
    Q_c: float

    def __post_init__(self) -> None:
        if self.Q_c <= 0:
            raise ValueError(f"Q_c must be > 0, got {self.Q_c}")


@dataclass
class ChainViolation:
    index: int
    reason: str


@dataclass
class DifficultyPlan:
    blocks: List[BlockMeta]
    total_work: float = 0.0
    cost_in_reference_blocks: float = 0.0
    first_mined: int = 0
    as_of: Optional[float] = None
    multipliers: List[float] = field(default_factory=list)

    @property
    def mined(self) -> List[BlockMeta]:
        return self.blocks[self.first_mined:]


#####################################
# Define Rule Functions
#####################################


def retarget(prev_difficulty: float, T1: float, T2: float) -> float:
    """Difficulty after a retarget over the window [T1, T2] (seconds)."""
    if T2 <= T1:
        raise ValueError(f"retarget window must be positive, got T1={T1}, T2={T2}")
    return prev_difficulty * retarget_multiplier(T1, T2)


def retarget_multiplier(T1: float, T2: float) -> float:
    span_days = (T2 - T1) / DAY_S
    return min(max(TARGET_SPAN_DAYS / span_days, MIN_MULTIPLIER), MAX_MULTIPLIER)


def median_time_past(prev: Sequence[float]) -> Optional[float]:
    """Middle element of the sorted last 11 timestamps (upper middle for even counts)."""
    window = sorted(prev[-MEDIAN_WINDOW:])
    if not window:
        return None
    return window[len(window) // 2]


def median_time_ok(candidate_ts: float, prev_11: Sequence[float]) -> bool:
    if len(prev_11) > MEDIAN_WINDOW:
        raise ValueError(f"expected at most {MEDIAN_WINDOW} previous timestamps, got {len(prev_11)}")
    median = median_time_past(prev_11)
    return median is None or candidate_ts > median


def checkpoint_floor(T: float, rule: CheckpointRule) -> float:
    """Lowest difficulty allowed on day T."""
    if T < rule.T_c:
        raise ValueError(f"T={T} is before the checkpoint date {rule.T_c}")
    return rule.Q_c / 2 ** ((T - rule.T_c) / FLOOR_HALVING_DAYS)


#####################################
# Define Validation
#####################################


def validate_chain(
    blocks: Sequence[BlockMeta],
    rule: CheckpointRule,
    as_of: Optional[float] = None,
    anchor: Optional[Sequence[BlockMeta]] = None,
) -> Optional[ChainViolation]:
    """
    First rule violation in blocks, or None.

    Parameters:
        blocks: index-contiguous blocks to check.
        rule: the last checkpoint.
        as_of (float, optional): day at which the floor is evaluated; each block's own
            timestamp when None.
        anchor (optional): contiguous blocks right before `blocks`, used as median and
            retarget history but not checked themselves.
    """
    history = list(anchor or [])
    chain = history + list(blocks)
    for a, b in zip(chain, chain[1:]):
        if b.index != a.index + 1:
            raise ValueError(f"blocks are not index-contiguous at {a.index} -> {b.index}")
    by_index: Dict[int, BlockMeta] = {blk.index: blk for blk in chain}
    offset = len(history)
    for pos in range(offset, len(chain)):
        blk = chain[pos]
        prev_ts = [c.timestamp for c in chain[max(0, pos - MEDIAN_WINDOW):pos]]
        if not median_time_ok(blk.timestamp, prev_ts):
            return ChainViolation(blk.index, "timestamp not above the median of the previous 11")
        day = as_of if as_of is not None else blk.timestamp / DAY_S
        if day >= rule.T_c and blk.difficulty < checkpoint_floor(day, rule) * (1 - REL_TOL):
            return ChainViolation(blk.index, "below checkpoint floor")
        if pos == 0:
            continue
        prev = chain[pos - 1]
        if blk.index % RETARGET_INTERVAL != 0:
            if abs(blk.difficulty - prev.difficulty) > REL_TOL * prev.difficulty:
                return ChainViolation(blk.index, "difficulty changed outside a retarget boundary")
            continue
        first = by_index.get(blk.index - RETARGET_INTERVAL)
        if first is None:
            continue
        if prev.timestamp <= first.timestamp:
            return ChainViolation(blk.index, "non-positive retarget window")
        expected = retarget(prev.difficulty, first.timestamp, prev.timestamp)
        if abs(blk.difficulty - expected) > REL_TOL * expected:
            return ChainViolation(blk.index, f"retarget difficulty {blk.difficulty:.6g} != {expected:.6g}")
    return None


#####################################
# Define the Planner
#####################################


def _period_close(first_ts: float, difficulty: float, floor: float, now_s: float, index: int) -> tuple:
    """Timestamp for the last block of a period and the multiplier it produces."""
    if difficulty < floor * (1 - REL_TOL):
        raise PlanInfeasibleError(index, "already below checkpoint floor")
    wanted = max(MIN_MULTIPLIER, floor / difficulty)
    if wanted == MIN_MULTIPLIER and now_s - first_ts >= TARGET_SPAN_DAYS / MIN_MULTIPLIER * DAY_S:
        close_ts = now_s
    else:
        close_ts = first_ts + TARGET_SPAN_DAYS / wanted * DAY_S
    if close_ts > now_s:
        raise PlanInfeasibleError(index, "needs a timestamp later than now")
    return close_ts, retarget_multiplier(first_ts, close_ts)


def plan_alternative_chain(
    fork_point: BlockMeta,
    n_blocks: int,
    now: float,
    rule: CheckpointRule,
    honest_period: Optional[Sequence[BlockMeta]] = None,
) -> DifficultyPlan:
    """
    Timestamp and difficulty schedule for a replacement chain.

    Parameters:
        fork_point (BlockMeta): first block after the checkpoint with index % 2016 == 0.
        n_blocks (int): blocks to mine after the honest period, at least 2016.
        now (float): current date in days; the checkpoint floor is evaluated here.
        rule (CheckpointRule): the last checkpoint.
        honest_period (optional): the 2015 honest blocks starting at fork_point; spaced
            ten minutes apart at the fork difficulty when omitted.

    Returns:
        DifficultyPlan: reused honest blocks, the re-dated boundary block and the new blocks.

    Raises:
        PlanInfeasibleError: If a period cannot be closed without breaking a rule.
    """
    logger.info(f"FUNCTION START: plan_alternative_chain with fork={fork_point.index}, n_blocks={n_blocks}, now={now}")
    if fork_point.index % RETARGET_INTERVAL != 0:
        raise ValueError(f"fork_point.index {fork_point.index} is not a retarget boundary")
    if n_blocks < RETARGET_INTERVAL:
        raise ValueError(f"n_blocks must be >= {RETARGET_INTERVAL}, got {n_blocks}")
    if now < rule.T_c:
        raise ValueError(f"now={now} is before the checkpoint date {rule.T_c}")
    now_s = now * DAY_S
    floor = checkpoint_floor(now, rule)
    d = fork_point.difficulty

    if honest_period is None:
        blocks = [
            BlockMeta(fork_point.index + j, fork_point.timestamp + j * HONEST_SPACING_S, d)
            for j in range(RETARGET_INTERVAL - 1)
        ]
    else:
        blocks = list(honest_period)
        if len(blocks) != RETARGET_INTERVAL - 1 or blocks[0] != fork_point:
            raise ValueError(f"honest_period must hold {RETARGET_INTERVAL - 1} blocks starting at the fork point")

    # Boundary block of the honest period, re-dated and re-mined
    close_ts, multiplier = _period_close(fork_point.timestamp, d, floor, now_s, fork_point.index + 2015)
    blocks.append(BlockMeta(fork_point.index + RETARGET_INTERVAL - 1, close_ts, d))
    first_mined = len(blocks) - 1
    multipliers = [multiplier]

    index = fork_point.index + RETARGET_INTERVAL
    remaining = n_blocks
    while remaining > 0:
        d = d * multiplier
        if d < floor * (1 - REL_TOL):
            raise PlanInfeasibleError(index, "below checkpoint floor")
        size = min(RETARGET_INTERVAL, remaining)
        first_ts = median_time_past([b.timestamp for b in blocks]) + 1.0
        for j in range(size):
            blocks.append(BlockMeta(index + j, first_ts + j, d))
        if size == RETARGET_INTERVAL and remaining > size:
            close_ts, multiplier = _period_close(first_ts, d, floor, now_s, index + size - 1)
            blocks[-1] = BlockMeta(index + size - 1, close_ts, d)
            multipliers.append(multiplier)
        index += size
        remaining -= size

    total_work = sum(b.difficulty for b in blocks[first_mined:])
    plan = DifficultyPlan(
        blocks=blocks,
        total_work=total_work,
        cost_in_reference_blocks=total_work / fork_point.difficulty,
        first_mined=first_mined,
        as_of=now,
        multipliers=multipliers,
    )
    violation = validate_chain(blocks, rule, as_of=now)
    if violation is not None:
        raise PlanInfeasibleError(violation.index, violation.reason)
    logger.info(f"Plan ready: {len(plan.mined)} mined blocks, cost {plan.cost_in_reference_blocks:.1f} fork-difficulty blocks")
    return plan


def plan_cost(plan: DifficultyPlan, reference_difficulty: float) -> float:
    """Work of the mined blocks in units of reference-difficulty blocks."""
    if reference_difficulty <= 0:
        raise ValueError(f"reference_difficulty must be > 0, got {reference_difficulty}")
    return plan.total_work / reference_difficulty


def build_plan_frame(plan: DifficultyPlan) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "index": [b.index for b in plan.blocks],
            "timestamp": [b.timestamp for b in plan.blocks],
            "difficulty": [b.difficulty for b in plan.blocks],
        }
    )
    frame["mined"] = frame.index >= plan.first_mined
    return frame


def plan_summary(plan: DifficultyPlan, reference_difficulty: Optional[float] = None) -> Dict:
    summary = {
        "blocks": len(plan.blocks),
        "mined_blocks": len(plan.mined),
        "total_work": plan.total_work,
        "cost_in_fork_blocks": plan.cost_in_reference_blocks,
        "tail_difficulty": plan.blocks[-1].difficulty if plan.blocks else None,
        "as_of_days": plan.as_of,
    }
    if reference_difficulty is not None:
        summary["cost_in_reference_blocks"] = plan_cost(plan, reference_difficulty)
    return summary

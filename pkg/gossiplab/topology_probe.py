"""
gossiplab/topology_probe.py

Topology inference with marker addresses, run against a simulated World:

- estimate_degree: inject fake addresses over one attacker link and count how many
  come back over the attacker's listener links. A reachable address is relayed to the
  two responsible connections out of 1 + k, so the echoed share is about 2/(1 + k).
- enumerate_neighbors / discover_connection: inject markers into a, then poll every
  candidate b with GETADDR. Markers carry near-expiry timestamps so they stop after one
  hop; only direct neighbours of a hold a meaningful share of them.
- markov_getaddr_expectation: expected number of GETADDR replies needed to see every
  entry of an address database (absorbing chain over the number of known entries).

Example:
    from gossiplab.topology_probe import degree_table, markov_getaddr_expectation
    print(markov_getaddr_expectation(20480, 2500))
    table = degree_table(runs=5, seed=3)

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Set, Tuple

# Import from external packages (requires a virtual environment)
import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import gammaln

# Import local modules
from gossiplab.netsim import DelayModel, ObservationTap, World, WorldConfig, build_world
from gossiplab.protocol_model import (
    ADDR_MAX_AGE_S,
    ADDR_RELAY_MAX_COUNT,
    ADDRDB_CAPACITY,
    GETADDR_FRACTION,
    GETADDR_MAX,
    Connection,
    NetAddress,
    NodeId,
    Reachability,
)
from utils.logger import logger

#####################################
# Define Errors and Constants
#####################################

TIMESTAMP_POLICIES = ("near_expiry", "fresh")
FUNDAMENTAL_MAX_STATES = 4000

# (true degree, markers, listeners) used for the published degree experiment
DEGREE_TABLE_ROWS: List[Tuple[int, int, int]] = [(10, 500, 2), (30, 1000, 3), (70, 1000, 7), (100, 2000, 10)]

# (connections, server neighbours, candidates) used for the published discovery experiment
DISCOVERY_TABLE_ROWS: List[Tuple[int, int, int]] = [(59, 25, 459), (53, 22, 453), (73, 8, 473), (81, 17, 481)]


class InsufficientSignalError(RuntimeError):
    """No marker came back over any listener link."""


class DegeneratePairError(ValueError):
    """Connection discovery asked about a node and itself."""


class UnreachablePeerError(ValueError):
    """The probed node does not accept inbound connections."""


#####################################
# Define Marker and Result Types
#####################################


@dataclass
class MarkerSet:
    addrs: List[NetAddress]
    timestamp_policy: str = "near_expiry"
    # None defers to the stamp the world calibrates for the sending link
    near_expiry_age_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.timestamp_policy not in TIMESTAMP_POLICIES:
            raise ValueError(f"timestamp_policy must be one of {', '.join(TIMESTAMP_POLICIES)}")
        if self.near_expiry_age_s is not None and not 0 <= self.near_expiry_age_s <= ADDR_MAX_AGE_S:
            raise ValueError(f"near_expiry_age_s must be in [0, {ADDR_MAX_AGE_S}]")
        self._owners = {a.owner for a in self.addrs}

    @classmethod
    def fresh(
        cls, n: int, start_id: NodeId, reachable: bool = True, timestamp_policy: str = "near_expiry"
    ) -> "MarkerSet":
        """n consecutive marker owners starting at start_id."""
        if n < 1:
            raise ValueError(f"Marker count must be >= 1, got {n}")
        reach = Reachability.REACHABLE if reachable else Reachability.UNREACHABLE
        return cls([NetAddress(start_id + i, reach, 0.0) for i in range(n)], timestamp_policy)

    @classmethod
    def for_world(
        cls, world: World, n: int, reachable: bool = True, timestamp_policy: str = "near_expiry"
    ) -> "MarkerSet":
        """Markers with identifiers the world has never handed out."""
        if n < 1:
            raise ValueError(f"Marker count must be >= 1, got {n}")
        start = world.allocate_id()
        for _ in range(n - 1):
            world.allocate_id()
        return cls.fresh(n, start, reachable, timestamp_policy)

    def __len__(self) -> int:
        return len(self.addrs)

    @property
    def owners(self) -> Set[NodeId]:
        return self._owners

    @property
    def reachable(self) -> bool:
        return bool(self.addrs) and self.addrs[0].reachable

    def check_against(self, world: World) -> None:
        clash = sorted(self._owners & set(world.nodes))
        if clash:
            raise ValueError(f"Marker owners {clash[:5]} collide with real nodes.")

    def stamped(self, now_s: float, calibrated: Optional[float] = None) -> List[NetAddress]:
        """Markers stamped for sending at now_s; `calibrated` is the link-specific near-expiry stamp."""
        if self.timestamp_policy == "fresh":
            ts = now_s
        elif self.near_expiry_age_s is not None:
            ts = max(now_s - self.near_expiry_age_s, 0.0)
        elif calibrated is not None:
            ts = calibrated
        else:
            ts = max(now_s - ADDR_MAX_AGE_S, 0.0)
        return [a.restamped(ts) for a in self.addrs]


@dataclass
class DegreeEstimate:
    target: NodeId
    k_hat: float
    n_markers: int
    n_listeners: int
    received: int
    repeats: int = 1
    k_with_listeners: float = 0.0
    reachable: bool = True

    @property
    def echo_fraction(self) -> float:
        return self.received / (self.n_markers * self.n_listeners * self.repeats)


class MarkerCounter(ObservationTap):
    """Counts distinct marker owners echoed on each listener link."""

    prune_server_duplicates = False

    def __init__(self, owners: Set[NodeId]):
        self.owners = owners
        self.listeners: Set[Connection] = set()
        self.seen: Set[Tuple[int, NodeId]] = set()

    def on_addr(self, server: NodeId, conn: Connection, addrs: List[NetAddress], at_ms: int) -> None:
        if conn not in self.listeners:
            return
        for addr in addrs:
            if addr.owner in self.owners:
                self.seen.add((id(conn), addr.owner))

    @property
    def received(self) -> int:
        return len(self.seen)


@dataclass
class _ProbeLinks:
    sender: Connection
    listeners: List[Connection] = field(default_factory=list)

    def all(self) -> List[Connection]:
        return [self.sender] + self.listeners


#####################################
# Define Marker Injection Helpers
#####################################


def _require_server(world: World, node_id: NodeId) -> None:
    if not world.accepts_inbound(node_id):
        raise UnreachablePeerError(f"Node {node_id} does not accept inbound connections.")


def _open_probe_links(world: World, target: NodeId, counter: MarkerCounter, listeners: int) -> _ProbeLinks:
    if listeners < 1:
        raise ValueError(f"listeners must be >= 1, got {listeners}")
    _require_server(world, target)
    if world.free_slots(target) < listeners + 1:
        raise ValueError(f"Node {target} has {world.free_slots(target)} free slots, need {listeners + 1}.")
    sender = world.open_observer_link(target, counter, world.allocate_id())
    links = _ProbeLinks(sender)
    for _ in range(listeners):
        conn = world.open_observer_link(target, counter, world.allocate_id())
        links.listeners.append(conn)
        counter.listeners.add(conn)
    return links


def _close_probe_links(world: World, links: _ProbeLinks) -> None:
    for conn in links.all():
        world.close_link(conn, replace=False)


def _markers_queued(world: World, node_id: NodeId, owners: Set[NodeId]) -> bool:
    return any(owner in owners for conn in world.nodes[node_id].links for owner in conn.addr_queue)


def _inject(
    world: World,
    links: _ProbeLinks,
    markers: MarkerSet,
    settle_ms: int = 2_000,
    step_ms: int = 1_000,
    limit_ms: int = 600_000,
) -> None:
    """Send the markers in ADDR batches and run until the target has flushed them all."""
    addrs = markers.stamped(world.now_s, world.near_expiry_timestamp(links.sender))
    for start in range(0, len(addrs), ADDR_RELAY_MAX_COUNT):
        world.send_from_observer(links.sender, addrs[start:start + ADDR_RELAY_MAX_COUNT])
    target = links.sender.from_id
    began = world.now_ms
    world.run_until(began + settle_ms)
    while _markers_queued(world, target, markers.owners) and world.now_ms - began < limit_ms:
        world.run_until(world.now_ms + step_ms)
    if _markers_queued(world, target, markers.owners):
        logger.warning(f"Node {target} still holds queued markers after {limit_ms} ms")
    world.run_until(world.now_ms + settle_ms)


#####################################
# Define Degree Estimation
#####################################


def estimate_degree(
    world: World, target: NodeId, markers: MarkerSet, listeners: int = 2, repeats: int = 1
) -> DegreeEstimate:
    """
    Estimate the number of connections of target from the marker echo rate.

    Each repeat opens a fresh sender link and fresh listener links, so their
    per-connection histories start empty. The echoed share f solves
    f = reach / (1 + k + listeners), where reach is 2 for reachable markers and 1 otherwise.

    Parameters:
        world (World): the simulated network.
        target (NodeId): a server with at least listeners + 1 free slots.
        markers (MarkerSet): fake addresses absent from the world.
        listeners (int): attacker listener links per repeat.
        repeats (int): independent rounds pooled into one estimate.

    Returns:
        DegreeEstimate: k_hat counts target's connections other than the attacker's.

    Raises:
        InsufficientSignalError: If no marker was echoed.
    """
    logger.info(f"FUNCTION START: estimate_degree with target={target}, markers={len(markers)}, listeners={listeners}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    markers.check_against(world)
    received = 0
    for _ in range(repeats):
        counter = MarkerCounter(markers.owners)
        links = _open_probe_links(world, target, counter, listeners)
        _inject(world, links, markers)
        _close_probe_links(world, links)
        received += counter.received
    if received == 0:
        raise InsufficientSignalError(f"insufficient signal: no marker echoed by node {target}")
    reach = 2 if markers.reachable else 1
    f = received / (len(markers) * listeners * repeats)
    k_with_listeners = reach / f - 1
    estimate = DegreeEstimate(
        target=target,
        k_hat=max(k_with_listeners - listeners, 0.0),
        n_markers=len(markers),
        n_listeners=listeners,
        received=received,
        repeats=repeats,
        k_with_listeners=k_with_listeners,
        reachable=markers.reachable,
    )
    logger.info(f"Degree estimate for node {target}: f={f:.4f}, k_hat={estimate.k_hat:.2f}")
    return estimate


#####################################
# Define Connection Discovery
#####################################


def _poll_markers(world: World, node_id: NodeId, owners: Set[NodeId], polls: int) -> Tuple[int, int]:
    """Distinct markers seen in `polls` GETADDR replies, plus the first reply size."""
    seen: Set[NodeId] = set()
    reply_size = 0
    for i in range(polls):
        reply = world.getaddr(node_id)
        if i == 0:
            reply_size = len(reply)
        seen.update(a.owner for a in reply if a.owner in owners)
    return len(seen), reply_size


def poll_coverage(reply_size: int, polls: int) -> float:
    """Chance that one stored entry appears in at least one of `polls` replies."""
    if reply_size <= 0:
        return 0.0
    share = GETADDR_FRACTION if reply_size < GETADDR_MAX else GETADDR_MAX / ADDRDB_CAPACITY
    return 1.0 - (1.0 - share) ** polls


def enumerate_neighbors(
    world: World,
    a: NodeId,
    candidates: Iterable[NodeId],
    markers: Optional[MarkerSet] = None,
    n_markers: int = 1000,
    listeners: int = 2,
    polls: int = 5,
    threshold_share: float = 0.5,
) -> List[NodeId]:
    """
    Candidate servers directly connected to a, found with a single marker send.

    The listener echo rate gives the share of markers each neighbour of a received.
    A candidate is a neighbour when its GETADDR replies show at least threshold_share
    of the markers it would be expected to reveal.
    """
    logger.info(f"FUNCTION START: enumerate_neighbors with a={a}, n_markers={n_markers}, polls={polls}")
    _require_server(world, a)
    if markers is None:
        markers = MarkerSet.for_world(world, n_markers)
    markers.check_against(world)
    counter = MarkerCounter(markers.owners)
    links = _open_probe_links(world, a, counter, listeners)
    _inject(world, links, markers)
    _close_probe_links(world, links)
    if counter.received == 0:
        raise InsufficientSignalError(f"insufficient signal: no marker echoed by node {a}")
    expected = counter.received / listeners
    found = []
    for b in dict.fromkeys(candidates):
        if b == a or not world.accepts_inbound(b):
            continue
        count, reply_size = _poll_markers(world, b, markers.owners, polls)
        threshold = threshold_share * expected * poll_coverage(reply_size, polls)
        if count > 0 and count >= threshold:
            found.append(b)
    logger.info(f"Node {a}: {len(found)} neighbour(s) among the candidates, expected share {expected:.1f}")
    return sorted(found)


def discover_connection(world: World, a: NodeId, b: NodeId, markers: Optional[MarkerSet] = None) -> bool:
    """
    True when a and b are directly connected.

    Raises:
        DegeneratePairError: If a == b.
        UnreachablePeerError: If a or b does not accept inbound connections.
    """
    if a == b:
        raise DegeneratePairError(f"degenerate pair: {a} and {b} are the same node")
    _require_server(world, a)
    _require_server(world, b)
    return b in enumerate_neighbors(world, a, [b], markers=markers)


#####################################
# Define GETADDR Sufficiency Analysis
#####################################


def _check_chain_args(db_size: int, per_reply: int) -> None:
    if db_size < 1:
        raise ValueError(f"db_size must be >= 1, got {db_size}")
    if per_reply <= 0:
        raise ValueError(f"per_reply={per_reply} never absorbs")
    if per_reply > db_size:
        raise ValueError(f"per_reply={per_reply} exceeds db_size={db_size}")


def _log_factorials(db_size: int) -> np.ndarray:
    return gammaln(np.arange(db_size + 1) + 1.0)


def _transitions(
    db_size: int, per_reply: int, known: int, log_fact: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Next-state values and probabilities from `known` after one reply."""
    lf = _log_factorials(db_size) if log_fact is None else log_fact
    unseen = db_size - known
    lo = max(0, per_reply - unseen)
    hi = min(per_reply, known)
    overlap = np.arange(lo, hi + 1)
    fresh = per_reply - overlap
    # hypergeometric pmf in log space: C(known, overlap) C(unseen, fresh) / C(db_size, per_reply)
    log_p = (
        lf[known] - lf[overlap] - lf[known - overlap]
        + lf[unseen] - lf[fresh] - lf[unseen - fresh]
        - (lf[db_size] - lf[per_reply] - lf[db_size - per_reply])
    )
    return known + fresh, np.exp(log_p)


def markov_getaddr_expectation(
    db_size: int = ADDRDB_CAPACITY, per_reply: int = GETADDR_MAX, method: str = "recurrence"
) -> float:
    """
    Expected number of GETADDR replies until every database entry has been seen.

    Each reply draws per_reply distinct entries uniformly; the state is the number of
    entries seen so far. "recurrence" solves the hitting times backwards from the full
    state, "fundamental" solves (I - Q) t = 1 and is limited to small databases.
    """
    _check_chain_args(db_size, per_reply)
    log_fact = _log_factorials(db_size)
    if method == "recurrence":
        expected = np.zeros(db_size + 1)
        for known in range(db_size - 1, -1, -1):
            nxt, probs = _transitions(db_size, per_reply, known, log_fact)
            stay = probs[nxt == known].sum()
            moving = nxt != known
            expected[known] = (1.0 + probs[moving] @ expected[nxt[moving]]) / (1.0 - stay)
        return float(expected[0])
    if method == "fundamental":
        if db_size > FUNDAMENTAL_MAX_STATES:
            raise ValueError(f"method='fundamental' supports db_size <= {FUNDAMENTAL_MAX_STATES}")
        q = np.zeros((db_size, db_size))
        for known in range(db_size):
            nxt, probs = _transitions(db_size, per_reply, known, log_fact)
            transient = nxt < db_size
            q[known, nxt[transient]] += probs[transient]
        t = linalg.solve(np.eye(db_size) - q, np.ones(db_size))
        return float(t[0])
    raise ValueError(f"Unknown method '{method}'; use 'recurrence' or 'fundamental'.")


def simulate_getaddr_rounds(
    db_size: int,
    per_reply: int,
    runs: int,
    rng: np.random.Generator,
    method: str = "direct",
    chunk: int = 100_000,
) -> np.ndarray:
    """
    Monte-Carlo number of replies needed per run.

    "direct" draws the reply contents entry by entry; "counts" only tracks how many
    entries are known, drawing the overlap of each reply from the hypergeometric law.
    """
    _check_chain_args(db_size, per_reply)
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if method == "counts":
        known = np.zeros(runs, dtype=np.int64)
        rounds = np.zeros(runs, dtype=np.int64)
        active = known < db_size
        while active.any():
            k = known[active]
            overlap = rng.hypergeometric(k, db_size - k, per_reply)
            known[active] = k + per_reply - overlap
            rounds[active] += 1
            active = known < db_size
        return rounds
    if method != "direct":
        raise ValueError(f"Unknown method '{method}'; use 'direct' or 'counts'.")
    out = []
    for start in range(0, runs, chunk):
        size = min(chunk, runs - start)
        seen = np.zeros((size, db_size), dtype=bool)
        rounds = np.zeros(size, dtype=np.int64)
        active = np.arange(size)
        while active.size:
            keys = rng.random((active.size, db_size))
            picks = np.argpartition(keys, per_reply - 1, axis=1)[:, :per_reply]
            seen[active[:, None], picks] = True
            rounds[active] += 1
            active = active[~seen[active].all(axis=1)]
        out.append(rounds)
    return np.concatenate(out)


def residual_miss_probability(db_size: int, per_reply: int, rounds: int) -> float:
    """Probability that one given entry is still unseen after `rounds` replies."""
    _check_chain_args(db_size, per_reply)
    return (1.0 - per_reply / db_size) ** rounds


#####################################
# Define Table Experiments
#####################################


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def degree_experiment(
    k: int,
    n_markers: int,
    listeners: int,
    seed: int,
    reachable: bool = True,
    delay_model: Optional[DelayModel] = None,
) -> DegreeEstimate:
    """Degree estimate for the centre of a star with k server leaves."""
    cfg = WorldConfig(
        n_servers=k + 1,
        edges=[(0, leaf) for leaf in range(1, k + 1)],
        max_connections_per_server=max(125, k + listeners + 1),
        seed=seed,
        record_events="none",
        delay_model=delay_model or DelayModel(),
    )
    world = build_world(cfg)
    markers = MarkerSet.for_world(world, n_markers, reachable=reachable)
    return estimate_degree(world, 0, markers, listeners=listeners)


def degree_table(
    rows: Sequence[Tuple[int, int, int]] = DEGREE_TABLE_ROWS, runs: int = 5, seed: int = 1
) -> pd.DataFrame:
    """One row per (k, markers, listeners) with each try and the average estimate."""
    logger.info(f"FUNCTION START: degree_table with {len(rows)} row(s), runs={runs}, seed={seed}")
    records = []
    for i, (k, n_markers, listeners) in enumerate(rows):
        record = {"k": k, "markers": n_markers, "listeners": listeners}
        estimates = []
        for run in range(runs):
            est = degree_experiment(k, n_markers, listeners, _child_seed(seed, i, run))
            record[f"try_{run + 1}"] = est.k_hat
            estimates.append(est.k_hat)
        record["average"] = float(np.mean(estimates))
        records.append(record)
        logger.debug(f"Degree row k={k}: average {record['average']:.2f}")
    return pd.DataFrame(records)


def discovery_world(
    connections: int, server_neighbors: int, candidates: int, seed: int, outgoing: int = 8
) -> World:
    """
    World whose node 0 has server_neighbors server links and the rest as client links.

    Servers 1..candidates form a random graph among themselves; all of them are candidates.
    """
    if not 0 <= server_neighbors <= min(connections, candidates):
        raise ValueError("server_neighbors must be between 0 and min(connections, candidates)")
    rng = np.random.default_rng(_child_seed(seed, 0))
    edges = [(0, s) for s in range(1, server_neighbors + 1)]
    pool = np.arange(1, candidates + 1)
    for s in pool:
        others = pool[pool != s]
        for peer in rng.choice(others, size=min(outgoing, others.size), replace=False):
            edges.append((int(s), int(peer)))
    n_clients = connections - server_neighbors
    cfg = WorldConfig(
        n_servers=candidates + 1,
        n_clients=n_clients,
        edges=edges,
        seed=seed,
        record_events="none",
    )
    world = build_world(cfg)
    for client in world.client_ids:
        world.client_connect(client, servers=[0])
    world.run_until(world.now_ms + 5_000)
    return world


def discovery_experiment(
    connections: int, server_neighbors: int, candidates: int, seed: int, n_markers: int = 1000
) -> dict:
    world = discovery_world(connections, server_neighbors, candidates, seed)
    truth = {c.to_id for c in world.nodes[0].links if not c.observer and world.nodes[c.to_id].is_server}
    found = set(enumerate_neighbors(world, 0, range(1, candidates + 1), n_markers=n_markers))
    return {
        "connections": connections,
        "not_behind_nat": server_neighbors,
        "candidates": candidates,
        "discovered": len(found & truth),
        "false_positives": len(found - truth),
    }


def discovery_table(
    rows: Sequence[Tuple[int, int, int]] = DISCOVERY_TABLE_ROWS,
    seed: int = 1,
    n_markers: int = 1000,
    runs: int = 1,
) -> pd.DataFrame:
    """
    One row per (connections, server neighbours, candidates), repeated over `runs` seeded worlds.

    discovered is the mean over runs, min_discovered the worst run and false_positives the total.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    logger.info(f"FUNCTION START: discovery_table with {len(rows)} row(s), runs={runs}, seed={seed}")
    records = []
    for i, (connections, servers, candidates) in enumerate(rows):
        results = [
            discovery_experiment(connections, servers, candidates, _child_seed(seed, i, run), n_markers)
            for run in range(runs)
        ]
        discovered = [r["discovered"] for r in results]
        records.append({
            "connections": connections,
            "not_behind_nat": servers,
            "candidates": candidates,
            "runs": runs,
            "discovered": float(np.mean(discovered)),
            "min_discovered": min(discovered),
            "false_positives": sum(r["false_positives"] for r in results),
        })
        logger.debug(f"Discovery row {i}: mean {records[-1]['discovered']:.2f} of {servers}")
    return pd.DataFrame(records)

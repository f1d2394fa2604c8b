"""
gossiplab/attacker.py

Client deanonymization pipeline driven only by what a well-connected peer can observe:

1. enumerate reachable servers through GETADDR replies and liveness probes
2. open many connections to every server (one announce link plus listeners)
3. rebroadcast candidate client addresses with near-expiry timestamps so that honest
   links remember them, then learn each client's entry servers when the client's fresh
   self-advertisement is forwarded to a listener
4. record the first q servers announcing each transaction and match them against the
   learned entry sets with 3-, 2- and 1-subsets

Example:
    attacker = Attacker(world, AttackerConfig(m=50, candidate_addresses=candidates))
    attacker.establish_listeners(attacker.enumerate_servers([0]))
    attacker.schedule_rebroadcasts(start_ms=world.now_ms)
    ...
    records, unrecognized = attacker.deanonymize()

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import enum
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

# Import from external packages (requires a virtual environment)
import pandas as pd

# Import local modules
from gossiplab.netsim import ObservationTap, World
from gossiplab.protocol_model import ADDR_RELAY_MAX_COUNT, Connection, NetAddress, NodeId, TxId
from utils.logger import logger

RECORD_COLUMNS = [
    "tx_id", "ip", "session_id", "tuple_level", "n_candidates", "overlap",
    "correct", "right_among_candidates", "immediate",
]

#####################################
# Define Configuration and Result Types
#####################################


@dataclass
class AttackerConfig:
    m: int = 50
    q: int = 10
    rebroadcast_period_s: float = 600.0
    candidate_addresses: List[NetAddress] = field(default_factory=list)
    stealth_ip_count: int = 50
    # None stamps each announce so it expires right after reaching the server
    near_expiry_age_s: Optional[float] = None
    announce_settle_ms: int = 3000
    session_gap_s: float = 30.0
    idle_timeout_s: float = 7200.0
    per_connection_sightings: bool = False
    recycle_listeners: bool = True

    def validate(self, prefix: str = "attacker") -> List[str]:
        problems = []
        if self.m < 1:
            problems.append(f"{prefix}.m: must be >= 1")
        if self.q < 1:
            problems.append(f"{prefix}.q: must be >= 1")
        if self.rebroadcast_period_s <= 0:
            problems.append(f"{prefix}.rebroadcast_period_s: must be > 0")
        if self.stealth_ip_count < 1:
            problems.append(f"{prefix}.stealth_ip_count: must be >= 1")
        if self.near_expiry_age_s is not None and not 0 <= self.near_expiry_age_s <= 600:
            problems.append(f"{prefix}.near_expiry_age_s: must be in [0, 600]")
        if self.announce_settle_ms < 0 or self.session_gap_s < 0 or self.idle_timeout_s <= 0:
            problems.append(f"{prefix}.announce_settle_ms: settle and gap must be >= 0, idle_timeout_s > 0")
        return problems


class TupleLevel(str, enum.Enum):
    THREE = "three"
    TWO = "two"
    ONE = "one"

    @property
    def size(self) -> int:
        return {"three": 3, "two": 2, "one": 1}[self.value]


@dataclass
class LearnedFingerprint:
    fingerprint_id: int
    client_addr: NetAddress
    observed_entries: Set[NodeId]
    first_seen: float
    last_seen: float

    def active_at(self, t_s: float, gap_s: float, idle_s: float) -> bool:
        return self.first_seen - gap_s <= t_s <= self.last_seen + idle_s


@dataclass
class TxSighting:
    tx: TxId
    top_q: List[NodeId]
    arrival_ms: List[int]
    pseudonym: Optional[int] = None

    @property
    def first_ms(self) -> int:
        return self.arrival_ms[0] if self.arrival_ms else 0


@dataclass
class DeanonRecord:
    tx: TxId
    ip: NetAddress
    session_id: int
    pseudonym: Optional[int]
    tuple_level: TupleLevel
    candidates: List[NetAddress]
    fingerprint_ids: List[int]
    overlap: int


@dataclass
class Unrecognized:
    sighting: TxSighting


@dataclass
class SessionCluster:
    ip: NetAddress
    session_id: int
    txs: List[TxId]
    pseudonyms: List[Optional[int]]


@dataclass
class AttackerLinkSet:
    """Per-server observer links: announce[s] carries rebroadcasts, listeners[s] only listen."""

    announce: Dict[NodeId, Connection] = field(default_factory=dict)
    listeners: Dict[NodeId, List[Connection]] = field(default_factory=dict)
    achieved: Dict[NodeId, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.achieved.values())

    def open_count(self, server: NodeId) -> int:
        announce = self.announce.get(server)
        live = [c for c in self.listeners.get(server, []) if c.open]
        return len(live) + (1 if announce is not None and announce.open else 0)


#####################################
# Define Tuple Matching
#####################################


class TupleIndex:
    """All 1-, 2- and 3-subsets of every learned entry set, mapped to fingerprint positions."""

    def __init__(self, fingerprints: Sequence[LearnedFingerprint]):
        self.fingerprints = list(fingerprints)
        self._index: Dict[Tuple[NodeId, ...], List[int]] = {}
        for position, fp in enumerate(self.fingerprints):
            entries = sorted(fp.observed_entries)
            for size in (1, 2, 3):
                for combo in combinations(entries, size):
                    self._index.setdefault(combo, []).append(position)

    def lookup(self, combo: Tuple[NodeId, ...]) -> List[int]:
        return self._index.get(combo, [])

    def hits(self, top: Set[NodeId], size: int) -> Set[int]:
        found: Set[int] = set()
        for combo in combinations(sorted(top), size):
            found.update(self.lookup(combo))
        return found


def match(
    sighting: TxSighting,
    fingerprints: Sequence[LearnedFingerprint],
    index: Optional[TupleIndex] = None,
    gap_s: float = 30.0,
    idle_s: float = 7200.0,
) -> Union[DeanonRecord, Unrecognized]:
    """
    Match a sighting against learned fingerprints, trying 3-subsets first.

    Candidates at the winning level are ranked by overlap with the top-q set, then by
    recency of the fingerprint. Fingerprints inactive at the sighting time are skipped.
    """
    if index is None or index.fingerprints is not fingerprints:
        index = TupleIndex(fingerprints)
    top = set(sighting.top_q)
    t_s = sighting.first_ms / 1000.0
    for level in (TupleLevel.THREE, TupleLevel.TWO, TupleLevel.ONE):
        hits = [
            index.fingerprints[i]
            for i in index.hits(top, level.size)
            if index.fingerprints[i].active_at(t_s, gap_s, idle_s)
        ]
        if not hits:
            continue
        hits.sort(key=lambda fp: (-len(fp.observed_entries & top), -fp.last_seen, fp.fingerprint_id))
        best = hits[0]
        return DeanonRecord(
            tx=sighting.tx,
            ip=best.client_addr,
            session_id=best.fingerprint_id,
            pseudonym=sighting.pseudonym,
            tuple_level=level,
            candidates=[fp.client_addr for fp in hits],
            fingerprint_ids=[fp.fingerprint_id for fp in hits],
            overlap=len(best.observed_entries & top),
        )
    return Unrecognized(sighting)


def link_sessions(records: Iterable[DeanonRecord]) -> List[SessionCluster]:
    """Group Three-level records by (address, session); records with distinct sessions stay apart."""
    clusters: Dict[Tuple[NodeId, int], SessionCluster] = {}
    for record in records:
        if record.tuple_level != TupleLevel.THREE:
            continue
        key = (record.ip.owner, record.session_id)
        cluster = clusters.get(key)
        if cluster is None:
            cluster = clusters[key] = SessionCluster(record.ip, record.session_id, [], [])
        cluster.txs.append(record.tx)
        cluster.pseudonyms.append(record.pseudonym)
    return [clusters[key] for key in sorted(clusters)]


#####################################
# Define the Attacker
#####################################


class Attacker(ObservationTap):
    def __init__(self, world: World, cfg: AttackerConfig):
        problems = cfg.validate()
        if problems:
            raise ValueError("; ".join(problems))
        self.world = world
        self.cfg = cfg
        self.prune_server_duplicates = not cfg.per_connection_sightings
        self.endpoints: List[NodeId] = [world.allocate_id() for _ in range(cfg.stealth_ip_count)]
        self._next_endpoint = 0
        self.links = AttackerLinkSet()
        self.candidates: Dict[NodeId, NetAddress] = {a.owner: a for a in cfg.candidate_addresses}
        self._own_stamps: Dict[NodeId, Set[float]] = {}
        self.fingerprints: List[LearnedFingerprint] = []
        self._by_owner: Dict[NodeId, List[LearnedFingerprint]] = {}
        self._arrivals: Dict[TxId, Dict[Tuple, int]] = {}
        self.rebroadcasts = 0
        self.unrecognized: List[Unrecognized] = []

    #####################################
    # Step 1: servers
    #####################################

    def enumerate_servers(self, seeds: Iterable[NodeId], quiet_polls: int = 3) -> List[NodeId]:
        """
        Breadth-first closure over GETADDR replies, keeping owners that pass the liveness probe.

        Each server is polled until `quiet_polls` consecutive replies bring no new address.
        """
        logger.info(f"FUNCTION START: enumerate_servers with quiet_polls={quiet_polls}")
        seen: Set[NodeId] = set()
        found: List[NodeId] = []
        queue = deque()
        for seed in seeds:
            if seed not in seen and self.world.accepts_inbound(seed):
                seen.add(seed)
                found.append(seed)
                queue.append(seed)
        polls = 0
        while queue:
            server = queue.popleft()
            quiet = 0
            while quiet < quiet_polls:
                reply = self.world.getaddr(server)
                polls += 1
                fresh = [a.owner for a in reply if a.owner not in seen]
                if not fresh:
                    quiet += 1
                    continue
                quiet = 0
                for owner in fresh:
                    seen.add(owner)
                    if self.world.accepts_inbound(owner):
                        found.append(owner)
                        queue.append(owner)
        logger.info(f"Enumerated {len(found)} servers with {polls} GETADDR polls")
        return sorted(found)

    #####################################
    # Step 2: connections
    #####################################

    def _endpoint(self) -> NodeId:
        endpoint = self.endpoints[self._next_endpoint % len(self.endpoints)]
        self._next_endpoint += 1
        return endpoint

    def establish_listeners(self, servers: Iterable[NodeId], m: Optional[int] = None) -> AttackerLinkSet:
        """Open up to m links per server, limited by its free slots; m_i is recorded per server."""
        m = self.cfg.m if m is None else m
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        for server in servers:
            m_i = min(m, self.world.free_slots(server))
            opened = []
            for _ in range(m_i):
                conn = self.world.open_observer_link(server, self, self._endpoint())
                if conn is None:
                    break
                opened.append(conn)
            self.links.achieved[server] = len(opened)
            if opened:
                self.links.announce[server] = opened[0]
                self.links.listeners[server] = opened[1:]
        logger.info(
            f"Established {self.links.total} attacker connections to {len(self.links.achieved)} servers "
            f"(m={m})"
        )
        return self.links

    def _close_listeners(self) -> None:
        for server, conns in self.links.listeners.items():
            for conn in conns:
                self.world.close_link(conn, replace=False)
            self.links.listeners[server] = []

    def _reopen_listeners(self) -> None:
        for server, achieved in self.links.achieved.items():
            if not self.world.accepts_inbound(server):
                continue
            want = max(achieved - 1, 0) - len(self.links.listeners.get(server, []))
            for _ in range(max(min(want, self.world.free_slots(server)), 0)):
                conn = self.world.open_observer_link(server, self, self._endpoint())
                if conn is None:
                    break
                self.links.listeners.setdefault(server, []).append(conn)

    #####################################
    # Step 3: entry nodes
    #####################################

    def _announce_stamp(self, conn: Connection, now_s: float) -> float:
        if self.cfg.near_expiry_age_s is None:
            return self.world.near_expiry_timestamp(conn)
        return max(now_s - self.cfg.near_expiry_age_s, 0.0)

    def rebroadcast_candidates(self, now: Optional[float] = None) -> int:
        """
        Send every candidate to every server over its announce link, 10 per ADDR message.

        Timestamps are set near expiry so servers relay them one hop only. Listener links are
        closed during the announce and reopened after announce_settle_ms.

        Returns:
            int: number of ADDR messages sent.
        """
        now_s = self.world.now_s if now is None else now
        if self.cfg.recycle_listeners:
            self._close_listeners()
        sent = 0
        for server in sorted(self.links.announce):
            conn = self.links.announce[server]
            if not conn.open:
                continue
            stamp = self._announce_stamp(conn, now_s)
            batch = [a.restamped(stamp) for a in self.candidates.values()]
            for addr in batch:
                self._own_stamps.setdefault(addr.owner, set()).add(stamp)
            for start in range(0, len(batch), ADDR_RELAY_MAX_COUNT):
                self.world.send_from_observer(conn, batch[start:start + ADDR_RELAY_MAX_COUNT])
                sent += 1
        if self.cfg.recycle_listeners:
            self.world.after(self.cfg.announce_settle_ms, self._reopen_listeners)
        self.rebroadcasts += 1
        self.world.log_event("attacker", None, None, f"rebroadcast:{sent}")
        return sent

    def schedule_rebroadcasts(self, start_ms: int, stop_ms: Optional[int] = None) -> None:
        """Run rebroadcast_candidates every rebroadcast_period_s from start_ms until stop_ms."""
        self.world.env.process(self._rebroadcast_loop(start_ms, stop_ms))

    def _rebroadcast_loop(self, start_ms: int, stop_ms: Optional[int]):
        env = self.world.env
        if start_ms > env.now:
            yield env.timeout(start_ms - env.now)
        period_ms = int(self.cfg.rebroadcast_period_s * 1000)
        while stop_ms is None or env.now < stop_ms:
            self.rebroadcast_candidates()
            yield env.timeout(period_ms)

    def on_addr(self, server: NodeId, conn: Connection, addrs: List[NetAddress], at_ms: int) -> None:
        at_s = at_ms / 1000.0
        for addr in addrs:
            if addr.owner not in self.candidates:
                continue
            if addr.timestamp in self._own_stamps.get(addr.owner, ()):
                continue
            self._record_entry(addr, server, at_s)

    def _record_entry(self, addr: NetAddress, server: NodeId, at_s: float) -> None:
        for fp in self._by_owner.get(addr.owner, []):
            if abs(fp.client_addr.timestamp - addr.timestamp) <= self.cfg.session_gap_s:
                if at_s <= fp.last_seen + self.cfg.idle_timeout_s:
                    fp.observed_entries.add(server)
                    fp.first_seen = min(fp.first_seen, at_s)
                    fp.last_seen = max(fp.last_seen, at_s)
                    return
        fp = LearnedFingerprint(len(self.fingerprints) + 1, addr, {server}, at_s, at_s)
        self.fingerprints.append(fp)
        self._by_owner.setdefault(addr.owner, []).append(fp)

    def learn_entry_nodes(self, window: Optional[Tuple[float, float]] = None) -> List[LearnedFingerprint]:
        """Fingerprints learned so far, optionally those first seen inside (start_s, end_s)."""
        if window is None:
            return list(self.fingerprints)
        start_s, end_s = window
        return [fp for fp in self.fingerprints if start_s <= fp.first_seen <= end_s]

    #####################################
    # Step 4: transactions
    #####################################

    def on_inv(self, server: NodeId, conn: Connection, txs: List[TxId], at_ms: int) -> None:
        key = (server, conn.nonce) if self.cfg.per_connection_sightings else (server,)
        for tx in txs:
            arrivals = self._arrivals.setdefault(tx, {})
            known = arrivals.get(key)
            if known is None or at_ms < known:
                arrivals[key] = at_ms

    def sight_transactions(self) -> List[TxSighting]:
        """One sighting per transaction with its first q relaying servers, ordered by first arrival."""
        sightings = []
        for tx, arrivals in self._arrivals.items():
            ordered = sorted(arrivals.items(), key=lambda item: (item[1], item[0]))[: self.cfg.q]
            sightings.append(
                TxSighting(
                    tx=tx,
                    top_q=[key[0] for key, _ in ordered],
                    arrival_ms=[at for _, at in ordered],
                    pseudonym=self.world.tx_pseudonym.get(tx),
                )
            )
        sightings.sort(key=lambda s: (s.first_ms, s.tx))
        return sightings

    def deanonymize(self) -> Tuple[List[DeanonRecord], List[Unrecognized]]:
        """Match every sighting in time order; Three-level hits keep their fingerprint active."""
        logger.info(
            f"FUNCTION START: deanonymize with {len(self.fingerprints)} fingerprints, "
            f"{len(self._arrivals)} transactions"
        )
        index = TupleIndex(self.fingerprints)
        by_id = {fp.fingerprint_id: fp for fp in index.fingerprints}
        records: List[DeanonRecord] = []
        self.unrecognized = []
        for sighting in self.sight_transactions():
            result = match(sighting, index.fingerprints, index, self.cfg.session_gap_s, self.cfg.idle_timeout_s)
            if isinstance(result, Unrecognized):
                self.unrecognized.append(result)
                continue
            if result.tuple_level == TupleLevel.THREE:
                winner = by_id[result.session_id]
                winner.last_seen = max(winner.last_seen, sighting.first_ms / 1000.0)
            records.append(result)
        logger.info(f"Matched {len(records)} transactions, {len(self.unrecognized)} unrecognized")
        return records, list(self.unrecognized)


#####################################
# Define Scoring and Export
#####################################


def _true_owners(world: World, session_id: Optional[int]) -> Set[NodeId]:
    if session_id is None or session_id not in world.sessions:
        return set()
    record = world.sessions[session_id]
    owners = {record.owner}
    if record.exposed:
        owners.add(world.nodes[record.client].public_owner)
    return owners


def fingerprint_session(world: World, fp: LearnedFingerprint) -> Optional[int]:
    """Ground-truth session behind a learned fingerprint (joined on advertised address and time)."""
    return world.session_by_advert.get((fp.client_addr.owner, fp.client_addr.timestamp))


def score_records(records: Sequence[DeanonRecord], world: World, fingerprints: Sequence[LearnedFingerprint]) -> List[Dict]:
    """
    Join records with ground truth.

    A candidate is right when its address is the one the origin advertised in that session
    and at least half of its learned entries are true entries of the session.
    """
    by_id = {fp.fingerprint_id: fp for fp in fingerprints}
    rows = []
    for record in records:
        session_id = world.tx_session.get(record.tx)
        owners = _true_owners(world, session_id)
        entries = world.sessions[session_id].entries if session_id in world.sessions else frozenset()

        def is_right(fp_id: int) -> bool:
            fp = by_id[fp_id]
            if fp.client_addr.owner not in owners or not fp.observed_entries:
                return False
            return 2 * len(fp.observed_entries & entries) >= len(fp.observed_entries)

        rows.append(
            {
                "tx_id": record.tx,
                "ip": record.ip.owner,
                "session_id": record.session_id,
                "tuple_level": record.tuple_level.value,
                "n_candidates": len(record.candidates),
                "overlap": record.overlap,
                "correct": is_right(record.session_id),
                "right_among_candidates": any(is_right(i) for i in record.fingerprint_ids),
                "immediate": bool(world.tx_immediate.get(record.tx, False)),
            }
        )
    return rows


def records_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=RECORD_COLUMNS)


def clusters_frame(clusters: Sequence[SessionCluster]) -> pd.DataFrame:
    rows = [
        {"ip": c.ip.owner, "session_id": c.session_id, "n_transactions": len(c.txs), "txs": " ".join(map(str, c.txs))}
        for c in clusters
    ]
    return pd.DataFrame(rows, columns=["ip", "session_id", "n_transactions", "txs"])


def entries_in_top(world: World, sighting: TxSighting) -> int:
    """True entry nodes of the origin session among the sighting's top-q servers."""
    session_id = world.tx_session.get(sighting.tx)
    if session_id not in world.sessions:
        return 0
    return len(set(sighting.top_q) & world.sessions[session_id].entries)


#####################################
# Define Module-Level Operations
#####################################


def enumerate_servers(attacker: Attacker, seeds: Iterable[NodeId]) -> List[NodeId]:
    return attacker.enumerate_servers(seeds)


def establish_listeners(attacker: Attacker, servers: Iterable[NodeId], m: Optional[int] = None) -> AttackerLinkSet:
    return attacker.establish_listeners(servers, m)


def rebroadcast_candidates(attacker: Attacker, now: Optional[float] = None) -> int:
    return attacker.rebroadcast_candidates(now)


def learn_entry_nodes(attacker: Attacker, window: Optional[Tuple[float, float]] = None) -> List[LearnedFingerprint]:
    return attacker.learn_entry_nodes(window)


def sight_transactions(attacker: Attacker) -> List[TxSighting]:
    return attacker.sight_transactions()

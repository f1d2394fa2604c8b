"""
gossiplab/netsim.py

Seeded discrete-event simulator of the Bitcoin gossip network.

A World holds servers (accept inbound connections) and clients (outgoing only). Each
TCP link is a pair of directed Connection objects. The simpy Environment is the event
kernel; world time is integer milliseconds and ties are processed first in, first out.

Message flow:
- ADDR: inserted into the receiver's AddrDb, relayed to responsible connections through
  the per-connection queues, flushed on trickle rounds.
- Transactions: INV, GETDATA and TX legs, each the link latency plus processing time. A
  quarter of (node, tx) pairs flush their INVs at once, the rest wait for trickle rounds.
- Observer links: connections to an attacker endpoint. Messages sent on them are handed to
  an ObservationTap with their arrival time instead of being scheduled.

Example:
    from gossiplab.netsim import WorldConfig, build_world, run_until
    world = build_world(WorldConfig(n_servers=50, n_clients=10, seed=7))
    fp = world.client_connect(50)
    run_until(world, world.now_ms + 5_000)

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import hashlib
import json
import pathlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

# Import from external packages (requires a virtual environment)
import networkx as nx
import numpy as np
import pandas as pd
import simpy

# Import local modules
from gossiplab.protocol_model import (
    ADDR_MAX_AGE_S,
    ADDR_MSG_MAX_ENTRIES,
    ADDR_RELAY_MAX_COUNT,
    ADDRDB_CAPACITY,
    BAN_DURATION_S,
    BAN_SCORE_THRESHOLD,
    TRICKLE_INTERVAL_MS,
    AddrDb,
    Connection,
    NetAddress,
    NodeId,
    NodeRole,
    Reachability,
    TxId,
    day_index,
    getaddr_response,
    misbehave,
    relay_targets,
    schedule_tx_forwarding,
    trickle_pick,
)
from utils.logger import logger
from utils.table_exporter import TableExporter

#####################################
# Define Errors and Constants
#####################################

EVENT_COLUMNS = ["t", "kind", "from", "to", "payload_id"]
CONTROL_KINDS = frozenset(
    {"connect", "disconnect", "client_connect", "client_disconnect", "server_offline", "generate_tx", "ban", "attacker"}
)
RECORD_LEVELS = ("all", "control", "none")
DELAY_KINDS = ("lognormal", "empirical", "fixed")


class InfeasibleWorldError(ValueError):
    """Raised when a WorldConfig cannot produce the requested topology."""


#####################################
# Define Configuration Types
#####################################


@dataclass
class DelayModel:
    """
    One-way link latency in milliseconds plus a per-message processing delay.

    The latency is drawn once when a link opens and every message on that link takes
    latency + processing_ms.
    """

    kind: str = "lognormal"
    median_ms: float = 150.0
    sigma: float = 0.5
    fixed_ms: int = 150
    histogram_edges_ms: List[float] = field(default_factory=list)
    histogram_weights: List[float] = field(default_factory=list)
    processing_ms: int = 5

    def validate(self, prefix: str = "delay_model") -> List[str]:
        problems = []
        if self.kind not in DELAY_KINDS:
            problems.append(f"{prefix}.kind: must be one of {', '.join(DELAY_KINDS)}")
        if self.kind == "lognormal" and (self.median_ms <= 0 or self.sigma < 0):
            problems.append(f"{prefix}.median_ms: must be > 0 with sigma >= 0")
        if self.kind == "fixed" and self.fixed_ms < 0:
            problems.append(f"{prefix}.fixed_ms: must be >= 0")
        if self.kind == "empirical":
            edges, weights = self.histogram_edges_ms, self.histogram_weights
            if len(edges) < 2 or len(weights) != len(edges) - 1:
                problems.append(f"{prefix}.histogram_edges_ms: need len(weights) + 1 edges")
            elif edges[0] <= 0 or any(b <= a for a, b in zip(edges, edges[1:])):
                problems.append(f"{prefix}.histogram_edges_ms: must be positive and increasing")
            elif any(w < 0 for w in weights) or sum(weights) <= 0:
                problems.append(f"{prefix}.histogram_weights: must be non-negative with a positive sum")
        if self.processing_ms < 0:
            problems.append(f"{prefix}.processing_ms: must be >= 0")
        return problems

    def min_transit_ms(self) -> int:
        """Shortest time any message can spend between two peers."""
        if self.kind == "fixed":
            return int(self.fixed_ms) + self.processing_ms
        if self.kind == "empirical":
            return max(int(np.rint(self.histogram_edges_ms[0])), 1) + self.processing_ms
        return 1 + self.processing_ms


class DelaySampler:
    """Buffered sampler of link latencies for a DelayModel, in whole ms."""

    BLOCK = 4096

    def __init__(self, model: DelayModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self._buffer: List[int] = []

    def __call__(self) -> int:
        if not self._buffer:
            self._buffer = self._draw(self.BLOCK).tolist()
            self._buffer.reverse()
        return self._buffer.pop()

    def _draw(self, n: int) -> np.ndarray:
        m = self.model
        if m.kind == "fixed":
            return np.full(n, int(m.fixed_ms), dtype=np.int64)
        if m.kind == "lognormal":
            raw = self.rng.lognormal(mean=np.log(m.median_ms), sigma=m.sigma, size=n)
        else:
            edges = np.asarray(m.histogram_edges_ms, dtype=float)
            weights = np.asarray(m.histogram_weights, dtype=float)
            bins = self.rng.choice(len(weights), size=n, p=weights / weights.sum())
            raw = self.rng.uniform(edges[bins], edges[bins + 1])
        return np.maximum(np.rint(raw), 1).astype(np.int64)


@dataclass
class ChurnModel:
    enabled: bool = False
    client_arrival_rate_per_hour: float = 0.0
    session_median_s: float = 3600.0
    session_sigma: float = 1.0
    # (seconds online, cumulative probability of having disconnected)
    server_disconnect_curve: List[Tuple[float, float]] = field(default_factory=list)

    def validate(self, prefix: str = "churn_model") -> List[str]:
        problems = []
        if self.client_arrival_rate_per_hour < 0:
            problems.append(f"{prefix}.client_arrival_rate_per_hour: must be >= 0")
        if self.session_median_s <= 0 or self.session_sigma < 0:
            problems.append(f"{prefix}.session_median_s: must be > 0 with session_sigma >= 0")
        curve = self.server_disconnect_curve
        for dt, p in curve:
            if dt < 0 or not 0.0 <= p <= 1.0:
                problems.append(f"{prefix}.server_disconnect_curve: points need dt >= 0 and p in [0, 1]")
                break
        if any(b[0] < a[0] or b[1] < a[1] for a, b in zip(curve, curve[1:])):
            problems.append(f"{prefix}.server_disconnect_curve: must be non-decreasing in dt and p")
        return problems

    def sample_server_lifetime_s(self, rng: np.random.Generator) -> Optional[float]:
        """Inverse-CDF draw from the disconnect curve; None means the server stays online."""
        if not self.server_disconnect_curve:
            return None
        dts = np.array([0.0] + [float(dt) for dt, _ in self.server_disconnect_curve])
        ps = np.array([0.0] + [float(p) for _, p in self.server_disconnect_curve])
        u = rng.uniform()
        if u >= ps[-1]:
            return None
        return float(np.interp(u, ps, dts))

    def sample_session_s(self, rng: np.random.Generator) -> float:
        return float(rng.lognormal(np.log(self.session_median_s), self.session_sigma))


@dataclass
class Countermeasures:
    randomize_entry_nodes: bool = False
    no_addr_advertise: bool = False


@dataclass
class WorldConfig:
    n_servers: int = 100
    n_clients: int = 0
    outgoing_per_peer: int = 8
    max_connections_per_server: int = 125
    delay_model: DelayModel = field(default_factory=DelayModel)
    churn_model: ChurnModel = field(default_factory=ChurnModel)
    seed: int = 1
    tor_ban_enabled: bool = False
    edges: Optional[List[Tuple[int, int]]] = None
    target_mean_degree: Optional[float] = None
    nat_groups: List[int] = field(default_factory=list)
    proxy_client_fraction: float = 0.0
    n_proxy_exits: int = 0
    trickle_phase_jitter: bool = True
    addrdb_seed_size: int = 64
    addrdb_capacity: int = ADDRDB_CAPACITY
    record_events: str = "all"
    countermeasures: Countermeasures = field(default_factory=Countermeasures)
    start_ms: int = 3_600_000

    def validate(self, prefix: str = "world") -> List[str]:
        """Field-level diagnostics; an empty list means the config is usable."""
        problems = []
        if self.n_servers < 1:
            problems.append(f"{prefix}.n_servers: must be >= 1")
        if self.n_clients < 0:
            problems.append(f"{prefix}.n_clients: must be >= 0")
        if self.outgoing_per_peer < 1:
            problems.append(f"{prefix}.outgoing_per_peer: must be >= 1")
        if self.max_connections_per_server < self.outgoing_per_peer:
            problems.append(f"{prefix}.max_connections_per_server: must be >= outgoing_per_peer")
        if self.target_mean_degree is not None and self.target_mean_degree < 0:
            problems.append(f"{prefix}.target_mean_degree: must be >= 0")
        if any(size < 1 for size in self.nat_groups) or sum(self.nat_groups) > self.n_clients:
            problems.append(f"{prefix}.nat_groups: sizes must be >= 1 and sum to at most n_clients")
        if not 0.0 <= self.proxy_client_fraction <= 1.0:
            problems.append(f"{prefix}.proxy_client_fraction: must be in [0, 1]")
        if self.proxy_client_fraction > 0 and self.n_proxy_exits < 1:
            problems.append(f"{prefix}.n_proxy_exits: must be >= 1 when proxy_client_fraction > 0")
        if self.addrdb_seed_size < 0 or self.addrdb_capacity < 1:
            problems.append(f"{prefix}.addrdb_seed_size: must be >= 0 with addrdb_capacity >= 1")
        if self.record_events not in RECORD_LEVELS:
            problems.append(f"{prefix}.record_events: must be one of {', '.join(RECORD_LEVELS)}")
        if self.start_ms < 0:
            problems.append(f"{prefix}.start_ms: must be >= 0")
        if self.edges is not None:
            for a, b in self.edges:
                if a == b or not (0 <= a < self.n_servers and 0 <= b < self.n_servers):
                    problems.append(f"{prefix}.edges: ({a}, {b}) is not a pair of distinct server ids")
                    break
        problems.extend(self.delay_model.validate(f"{prefix}.delay_model"))
        problems.extend(self.churn_model.validate(f"{prefix}.churn_model"))
        return problems


#####################################
# Define World State Types
#####################################


@dataclass(frozen=True)
class EntryFingerprint:
    client: NodeId
    entries: FrozenSet[NodeId]
    session_start: float
    session_id: int = 0
    advertised: Optional[NodeId] = None
    degraded: bool = False


@dataclass
class SessionRecord:
    """Ground truth for one client session, used to score the attacker."""

    session_id: int
    client: NodeId
    owner: NodeId
    advertised_ts: float
    entries: FrozenSet[NodeId]
    start_s: float
    end_s: Optional[float] = None
    via_proxy: bool = False
    exposed: bool = False
    degraded: bool = False


@dataclass(eq=False)
class Node:
    id: NodeId
    role: NodeRole
    salt: int
    addrdb: AddrDb
    phase: int
    online: bool = True
    links: List[Connection] = field(default_factory=list)
    observer_links: List[Connection] = field(default_factory=list)
    pending: int = 0
    ticking: bool = False
    known_txs: Set[TxId] = field(default_factory=set)
    inflight: Dict[TxId, Connection] = field(default_factory=dict)
    announcers: Dict[TxId, List[Connection]] = field(default_factory=dict)
    # clients
    public_owner: Optional[NodeId] = None
    proxied: bool = False
    session_id: Optional[int] = None
    pseudonym: int = 0
    # servers
    exit_scores: Dict[NodeId, int] = field(default_factory=dict)
    banned_exits: Dict[NodeId, float] = field(default_factory=dict)

    @property
    def is_server(self) -> bool:
        return self.role == NodeRole.SERVER

    def neighbor_ids(self) -> Set[NodeId]:
        return {c.to_id for c in self.links}


class ObservationTap:
    """Receiver for messages a server sends over an observer link."""

    prune_server_duplicates: bool = True

    def on_addr(self, server: NodeId, conn: Connection, addrs: List[NetAddress], at_ms: int) -> None:
        pass

    def on_inv(self, server: NodeId, conn: Connection, txs: List[TxId], at_ms: int) -> None:
        pass


def fingerprint_overlap(initial: Iterable[NodeId], current: Iterable[NodeId]) -> float:
    """Share of the initial entry set still present in the current one."""
    initial = set(initial)
    if not initial:
        return 0.0
    return len(initial & set(current)) / len(initial)


#####################################
# Define the World
#####################################


class World:
    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.env = simpy.Environment(initial_time=cfg.start_ms)
        streams = np.random.SeedSequence(cfg.seed).spawn(8)
        (
            self._topo_rng,
            self._delay_rng,
            self._trickle_rng,
            self._churn_rng,
            self._db_rng,
            self._probe_rng,
            self._nonce_rng,
            self._client_rng,
        ) = [np.random.default_rng(s) for s in streams]
        self._delay = DelaySampler(cfg.delay_model, self._delay_rng)
        self.nodes: Dict[NodeId, Node] = {}
        self.server_ids: List[NodeId] = list(range(cfg.n_servers))
        self.client_ids: List[NodeId] = list(range(cfg.n_servers, cfg.n_servers + cfg.n_clients))
        self._next_id = cfg.n_servers + cfg.n_clients
        self._next_tx = 1
        self._next_session = 1
        self._taps: Dict[Connection, ObservationTap] = {}
        self.proxy_exits: List[NodeId] = []
        self.client_exit: Dict[NodeId, NodeId] = {}
        self.tx_origin: Dict[TxId, NodeId] = {}
        self.tx_session: Dict[TxId, Optional[int]] = {}
        self.tx_immediate: Dict[TxId, bool] = {}
        self.tx_created_ms: Dict[TxId, int] = {}
        self.tx_pseudonym: Dict[TxId, int] = {}
        self.sessions: Dict[int, SessionRecord] = {}
        self.session_by_advert: Dict[Tuple[NodeId, float], int] = {}
        self.events: List[Dict] = []
        self._digest = hashlib.sha256()
        self._server_lifetimes: Dict[NodeId, float] = {}

    #####################################
    # Time and identifiers
    #####################################

    @property
    def now_ms(self) -> int:
        return int(self.env.now)

    @property
    def now_s(self) -> float:
        return self.env.now / 1000.0

    @property
    def day(self) -> int:
        return day_index(self.now_s)

    def allocate_id(self) -> NodeId:
        """Fresh identifier outside every node id (NAT addresses, proxy exits, attacker endpoints, markers)."""
        value = self._next_id
        self._next_id += 1
        return value

    def new_tx_id(self) -> TxId:
        value = self._next_tx
        self._next_tx += 1
        return value

    def after(self, delay_ms: int, callback: Callable, *args) -> None:
        """Run callback(*args) once delay_ms have elapsed."""
        event = self.env.timeout(max(int(delay_ms), 0))
        event.callbacks.append(lambda _event: callback(*args))

    def run_until(self, t_end: int) -> "World":
        """Process every event scheduled at or before t_end (milliseconds)."""
        if t_end < self.env.now:
            raise ValueError(f"t_end {t_end} is before the current time {self.env.now}")
        if t_end > self.env.now:
            self.env.run(until=t_end)
        while self.env.peek() <= t_end:
            self.env.step()
        return self

    #####################################
    # Event log
    #####################################

    def log_event(self, kind: str, frm, to, payload_id) -> None:
        record = (self.now_ms, kind, frm, to, payload_id)
        self._digest.update(repr(record).encode())
        level = self.cfg.record_events
        if level == "all" or (level == "control" and kind in CONTROL_KINDS):
            self.events.append(dict(zip(EVENT_COLUMNS, record)))

    def event_log_digest(self) -> str:
        return self._digest.hexdigest()

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.events, columns=EVENT_COLUMNS)

    def write_events(self, path: pathlib.Path) -> pathlib.Path:
        return TableExporter(self.events_frame()).write_ndjson(path)

    #####################################
    # Links
    #####################################

    def _new_pair(self, a: NodeId, b: NodeId, observer: bool = False) -> Tuple[Connection, Connection]:
        now_s, day = self.now_s, self.day
        nonces = self._nonce_rng.integers(0, 2**63, size=2)
        ab = Connection(a, b, int(nonces[0]), now_s, day, observer=observer, outbound=True)
        ba = Connection(b, a, int(nonces[1]), now_s, day, observer=observer, outbound=False)
        ab.peer, ba.peer = ba, ab
        ab.latency_ms = ba.latency_ms = self._delay()
        return ab, ba

    def connect(self, a: NodeId, b: NodeId) -> Connection:
        """Open a link initiated by a towards server b; returns a's side."""
        ab, ba = self._new_pair(a, b)
        self.nodes[a].links.append(ab)
        self.nodes[b].links.append(ba)
        self.log_event("connect", a, b, None)
        return ab

    def free_slots(self, server: NodeId) -> int:
        node = self.nodes[server]
        if not node.is_server or not node.online:
            return 0
        return max(self.cfg.max_connections_per_server - len(node.links), 0)

    def is_online(self, node_id: NodeId) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and node.online

    def accepts_inbound(self, node_id: NodeId) -> bool:
        """Liveness probe: true for online servers only."""
        node = self.nodes.get(node_id)
        return node is not None and node.online and node.is_server

    def transit_ms(self, conn: Connection) -> int:
        """Time a message sent now over conn takes to arrive."""
        return conn.latency_ms + self.cfg.delay_model.processing_ms

    def near_expiry_timestamp(self, server_conn: Connection) -> float:
        """
        Timestamp for an address sent now to a server over an observer link.

        The server receives it still fresh, with less than one minimal transit left
        before it turns ADDR_MAX_AGE_S old, so every copy the server relays arrives expired.
        """
        margin = max(self.cfg.delay_model.min_transit_ms() - 1, 0)
        fresh_until_ms = self.now_ms + self.transit_ms(server_conn) + margin
        return max((fresh_until_ms - ADDR_MAX_AGE_S * 1000) / 1000.0, 0.0)

    def open_observer_link(self, server: NodeId, tap: ObservationTap, endpoint: NodeId) -> Optional[Connection]:
        """Attach an observer link to server; returns the server-side Connection or None when full."""
        if self.free_slots(server) <= 0:
            return None
        theirs, ours = self._new_pair(endpoint, server, observer=True)
        node = self.nodes[server]
        node.links.append(ours)
        node.observer_links.append(ours)
        self._taps[ours] = tap
        return ours

    def _detach(self, conn: Connection) -> None:
        conn.open = False
        node = self.nodes.get(conn.from_id)
        if node is None or conn not in self._membership(node, conn):
            return
        node.pending -= conn.queued
        conn.addr_queue.clear()
        conn.tx_queue.clear()
        node.links.remove(conn)
        if conn.observer:
            node.observer_links.remove(conn)
            self._taps.pop(conn, None)

    @staticmethod
    def _membership(node: Node, conn: Connection) -> List[Connection]:
        return node.observer_links if conn.observer else node.links

    def close_link(self, conn: Connection, replace: bool = True) -> None:
        """Close both directions; the initiating side of a lost link looks for a replacement."""
        if not conn.open:
            return
        sides = [conn, conn.peer] if conn.peer is not None else [conn]
        for side in sides:
            self._detach(side)
        if not conn.observer:
            self.log_event("disconnect", conn.from_id, conn.to_id, None)
        if replace:
            for side in sides:
                if side.outbound and not side.observer:
                    self._replace_outbound(side.from_id, side.to_id)

    def disconnect(self, conn: Connection) -> None:
        self.close_link(conn, replace=True)

    def _replace_outbound(self, node_id: NodeId, lost: NodeId) -> None:
        node = self.nodes.get(node_id)
        if node is None or not node.online:
            return
        exclude = node.neighbor_ids() | {node_id, lost}
        picks = self._pick_servers(1, exclude, self._churn_rng)
        if not picks:
            return
        conn = self.connect(node_id, picks[0])
        if not node.is_server and node.session_id is not None:
            record = self.sessions[node.session_id]
            owner = record.owner
            if record.via_proxy and self._exit_banned(picks[0], record.owner):
                owner = node.public_owner
                record.exposed = True
            if self._advertise(node, conn, owner, self.now_s) is not None:
                self.session_by_advert[(owner, self.now_s)] = record.session_id

    def _pick_servers(self, k: int, exclude: Set[NodeId], rng: np.random.Generator) -> List[NodeId]:
        open_servers = [s for s in self.server_ids if s not in exclude and self.free_slots(s) > 0]
        if not open_servers:
            return []
        k = min(k, len(open_servers))
        picks = rng.choice(len(open_servers), size=k, replace=False)
        return [open_servers[int(i)] for i in picks]

    #####################################
    # Trickling
    #####################################

    def _ensure_ticking(self, node: Node) -> None:
        if node.ticking or node.pending <= 0 or not node.online:
            return
        node.ticking = True
        now = self.now_ms
        wait = TRICKLE_INTERVAL_MS - ((now - node.phase) % TRICKLE_INTERVAL_MS)
        self.after(wait, self._tick, node)

    def _tick(self, node: Node) -> None:
        if not node.online or not node.links or node.pending <= 0:
            node.ticking = False
            return
        conn = trickle_pick(node.links, self._trickle_rng)
        self._flush(node, conn)
        if node.pending > 0:
            self.after(TRICKLE_INTERVAL_MS, self._tick, node)
        else:
            node.ticking = False

    def _flush(self, node: Node, conn: Connection) -> None:
        if not conn.queued:
            return
        node.pending -= conn.queued
        conn.ensure_epoch(self.day)
        addrs = [a for owner, a in conn.addr_queue.items() if owner not in conn.addr_history]
        txs = [tx for tx in conn.tx_queue if tx not in conn.tx_history]
        conn.addr_queue.clear()
        conn.tx_queue.clear()
        for start in range(0, len(addrs), ADDR_MSG_MAX_ENTRIES):
            self._send_addr(node, conn, addrs[start:start + ADDR_MSG_MAX_ENTRIES])
        if txs:
            self._send_inv(node, conn, txs)

    #####################################
    # ADDR handling
    #####################################

    def _send_addr(self, node: Node, conn: Connection, addrs: List[NetAddress]) -> None:
        for addr in addrs:
            conn.mark_addr_sent(addr.owner)
        if conn.observer:
            tap = self._taps.get(conn)
            if tap is not None:
                tap.on_addr(node.id, conn, addrs, self.now_ms + self.transit_ms(conn))
            return
        self.after(self.transit_ms(conn), self._deliver_addr, conn, addrs)

    def _deliver_addr(self, conn: Connection, addrs: List[NetAddress]) -> None:
        if not conn.open:
            return
        for addr in addrs:
            self.log_event("addr", conn.from_id, conn.to_id, addr.owner)
        self.receive_addr(self.nodes[conn.to_id], conn.peer, addrs)

    def receive_addr(self, node: Node, recv_conn: Connection, addrs: List[NetAddress]) -> None:
        """Handle an ADDR message arriving at node over recv_conn (node's side of the link)."""
        if not node.online:
            return
        now_s = self.now_s
        count = len(addrs)
        recv_conn.ensure_epoch(day_index(now_s))
        queued_any = False
        for addr in addrs:
            recv_conn.mark_addr_sent(addr.owner)
            if recv_conn.addr_queue.pop(addr.owner, None) is not None:
                node.pending -= 1
            node.addrdb.insert(addr, self._db_rng)
            if count > ADDR_RELAY_MAX_COUNT:
                continue
            for conn in relay_targets(addr, count, now_s, node.links, node.salt):
                if addr.owner in conn.addr_queue:
                    continue
                conn.addr_queue[addr.owner] = addr
                node.pending += 1
                queued_any = True
        if queued_any:
            self._ensure_ticking(node)

    def send_from_observer(self, server_conn: Connection, addrs: List[NetAddress]) -> None:
        """Attacker-originated ADDR over an observer link, delivered after one link delay."""
        self.after(self.transit_ms(server_conn), self._deliver_from_observer, server_conn, addrs)

    def _deliver_from_observer(self, server_conn: Connection, addrs: List[NetAddress]) -> None:
        if not server_conn.open:
            return
        for addr in addrs:
            self.log_event("addr", server_conn.to_id, server_conn.from_id, addr.owner)
        self.receive_addr(self.nodes[server_conn.from_id], server_conn, addrs)

    def _advertise(self, node: Node, conn: Connection, owner: NodeId, ts: float) -> Optional[NetAddress]:
        """Client self-advertisement on one fresh link."""
        if self.cfg.countermeasures.no_addr_advertise:
            return None
        addr = NetAddress(owner, Reachability.REACHABLE, ts)
        conn.mark_addr_sent(owner)
        self.after(self.transit_ms(conn), self._deliver_addr, conn, [addr])
        return addr

    def getaddr(self, server: NodeId) -> List[NetAddress]:
        """GETADDR reply from server; empty when it is offline."""
        node = self.nodes.get(server)
        if node is None or not node.online:
            return []
        self.log_event("getaddr", None, server, None)
        return getaddr_response(node.addrdb, self._probe_rng)

    #####################################
    # Transaction handling
    #####################################

    def generate_tx(self, node_id: NodeId, tx: Optional[TxId] = None) -> TxId:
        """Create a transaction at node_id and start relaying it."""
        node = self.nodes[node_id]
        if not node.online:
            raise ValueError(f"Node {node_id} is offline and cannot send a transaction.")
        if not node.is_server and self.cfg.countermeasures.randomize_entry_nodes:
            self.client_disconnect(node_id)
            self.client_connect(node_id)
        if not node.links:
            raise ValueError(f"Node {node_id} has no connections.")
        tx = self.new_tx_id() if tx is None else tx
        if tx in self.tx_origin:
            raise ValueError(f"Transaction id {tx} already exists.")
        self.tx_origin[tx] = node_id
        self.tx_session[tx] = node.session_id
        self.tx_created_ms[tx] = self.now_ms
        self.tx_pseudonym[tx] = node.pseudonym
        self.log_event("generate_tx", node_id, None, tx)
        node.known_txs.add(tx)
        self.tx_immediate[tx] = self._forward_tx(node, tx)
        return tx

    def _forward_tx(self, node: Node, tx: TxId) -> bool:
        for conn in node.links:
            conn.ensure_epoch(self.day)
        schedule = schedule_tx_forwarding(tx, node.links, node.salt)
        node.pending += len(schedule.queued_to)
        if schedule.immediate:
            for conn in schedule.queued_to:
                if self._unqueue_tx(node, conn, tx):
                    self._send_inv(node, conn, [tx])
        else:
            self._ensure_ticking(node)
        return schedule.immediate

    @staticmethod
    def _unqueue_tx(node: Node, conn: Connection, tx: TxId) -> bool:
        if tx not in conn.tx_queue:
            return False
        del conn.tx_queue[tx]
        node.pending -= 1
        return True

    def _send_inv(self, node: Node, conn: Connection, txs: List[TxId]) -> None:
        for tx in txs:
            conn.mark_tx_sent(tx)
        if not conn.observer:
            self.after(self.transit_ms(conn), self._deliver_inv, conn, txs)
            return
        tap = self._taps.get(conn)
        if tap is None:
            return
        tap.on_inv(node.id, conn, txs, self.now_ms + self.transit_ms(conn))
        if tap.prune_server_duplicates:
            for other in node.observer_links:
                if other is conn:
                    continue
                for tx in txs:
                    self._unqueue_tx(node, other, tx)
                    other.mark_tx_sent(tx)

    def _deliver_inv(self, conn: Connection, txs: List[TxId]) -> None:
        if not conn.open:
            return
        node = self.nodes[conn.to_id]
        if not node.online:
            return
        recv = conn.peer
        recv.ensure_epoch(self.day)
        for tx in txs:
            self.log_event("inv", conn.from_id, conn.to_id, tx)
            recv.mark_tx_sent(tx)
            self._unqueue_tx(node, recv, tx)
            if tx in node.known_txs:
                continue
            if tx in node.inflight:
                node.announcers.setdefault(tx, []).append(recv)
                continue
            node.inflight[tx] = recv
            self.after(self.transit_ms(recv), self._deliver_getdata, recv, tx)

    def _deliver_getdata(self, conn: Connection, tx: TxId) -> None:
        if not conn.open:
            self._request_failed(conn.from_id, tx)
            return
        self.log_event("getdata", conn.from_id, conn.to_id, tx)
        self.after(self.transit_ms(conn), self._deliver_tx, conn.peer, tx)

    def _deliver_tx(self, conn: Connection, tx: TxId) -> None:
        if not conn.open:
            self._request_failed(conn.to_id, tx)
            return
        node = self.nodes[conn.to_id]
        self.log_event("tx", conn.from_id, conn.to_id, tx)
        node.inflight.pop(tx, None)
        node.announcers.pop(tx, None)
        if tx in node.known_txs or not node.online:
            return
        node.known_txs.add(tx)
        self._forward_tx(node, tx)

    def _request_failed(self, node_id: NodeId, tx: TxId) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        node.inflight.pop(tx, None)
        waiting = node.announcers.get(tx, [])
        while waiting:
            conn = waiting.pop(0)
            if conn.open:
                node.inflight[tx] = conn
                self.after(self.transit_ms(conn), self._deliver_getdata, conn, tx)
                return
        node.announcers.pop(tx, None)

    #####################################
    # Clients, churn and bans
    #####################################

    def client_connect(
        self, client: NodeId, now: Optional[float] = None, servers: Optional[List[NodeId]] = None
    ) -> EntryFingerprint:
        """
        Open the client's outgoing connections and advertise its address on each.

        Parameters:
            client (NodeId): an offline client.
            now (float, optional): must equal the world clock in seconds when given.
            servers (list, optional): fixed entry servers instead of a random pick.

        Returns:
            EntryFingerprint: flagged degraded when fewer than outgoing_per_peer servers had free slots.
        """
        node = self.nodes.get(client)
        if node is None or node.is_server:
            raise ValueError(f"Node {client} is not a client.")
        if node.online:
            raise ValueError(f"Client {client} is already online.")
        if now is not None and abs(now - self.now_s) > 1e-9:
            raise ValueError(f"client_connect now={now} does not match world time {self.now_s}")
        want = self.cfg.outgoing_per_peer
        if servers is None:
            entries = self._pick_servers(want, {client}, self._client_rng)
        else:
            entries = [s for s in dict.fromkeys(servers) if self.free_slots(s) > 0][:want]
            want = min(want, len(set(servers)))
        degraded = len(entries) < want
        node.online = True
        session_id = self._next_session
        self._next_session += 1
        node.session_id = session_id
        now_s = self.now_s
        exit_id = self._exit_for(node)
        exposed = False
        record = SessionRecord(
            session_id=session_id,
            client=client,
            owner=node.public_owner if exit_id is None else exit_id,
            advertised_ts=now_s,
            entries=frozenset(entries),
            start_s=now_s,
            via_proxy=exit_id is not None,
            degraded=degraded,
        )
        self.sessions[session_id] = record
        for server in entries:
            conn = self.connect(client, server)
            owner = record.owner
            if exit_id is not None and self._exit_banned(server, exit_id):
                owner = node.public_owner
                exposed = True
            self._advertise(node, conn, owner, now_s)
        record.exposed = exposed
        if not self.cfg.countermeasures.no_addr_advertise:
            self.session_by_advert[(record.owner, now_s)] = session_id
            if exposed:
                self.session_by_advert[(node.public_owner, now_s)] = session_id
        self.log_event("client_connect", client, None, session_id)
        return EntryFingerprint(client, frozenset(entries), now_s, session_id, record.owner, degraded)

    def client_disconnect(self, client: NodeId) -> None:
        node = self.nodes[client]
        if not node.online:
            return
        for conn in list(node.links):
            self.close_link(conn, replace=False)
        node.online = False
        if node.session_id is not None:
            self.sessions[node.session_id].end_s = self.now_s
        node.session_id = None
        self.log_event("client_disconnect", client, None, None)

    def server_offline(self, server: NodeId) -> None:
        node = self.nodes[server]
        if not node.online:
            return
        node.online = False
        for conn in list(node.links):
            self.close_link(conn, replace=True)
        self.log_event("server_offline", server, None, None)

    def fingerprint(self, client: NodeId) -> FrozenSet[NodeId]:
        """Current entry set of client."""
        return frozenset(c.to_id for c in self.nodes[client].links if c.outbound)

    def client_public_addr(self, client: NodeId) -> NodeId:
        """Address the entry servers see: the session's proxy exit when proxied, else the public address."""
        node = self.nodes[client]
        if node.session_id is not None:
            return self.sessions[node.session_id].owner
        return node.public_owner

    def _exit_for(self, node: Node) -> Optional[NodeId]:
        if not node.proxied or not self.proxy_exits:
            return None
        exit_id = self.proxy_exits[int(self._client_rng.integers(len(self.proxy_exits)))]
        self.client_exit[node.id] = exit_id
        return exit_id

    def _exit_banned(self, server: NodeId, exit_id: NodeId) -> bool:
        until = self.nodes[server].banned_exits.get(exit_id)
        return until is not None and until > self.now_s

    def _penalize(self, server: NodeId, exit_id: NodeId, penalty: int) -> None:
        node = self.nodes[server]
        score, banned = misbehave(node.exit_scores.get(exit_id, 0), penalty)
        if banned:
            node.banned_exits[exit_id] = self.now_s + BAN_DURATION_S
            node.exit_scores[exit_id] = 0
            self.log_event("ban", server, exit_id, None)
        else:
            node.exit_scores[exit_id] = score

    def apply_tor_ban(self, targets: Iterable[NodeId]) -> "World":
        """
        Make target servers ban every proxy exit (or ban a target exit at every server).

        Bans last 86400 simulated seconds; proxied clients connecting to a banning server
        advertise their true address on that connection.
        """
        if not self.cfg.tor_ban_enabled:
            raise ValueError("apply_tor_ban requires tor_ban_enabled in the world config.")
        exits = set(self.proxy_exits)
        for target in sorted(set(targets)):
            if target in exits:
                for server in self.server_ids:
                    if self.nodes[server].online:
                        self._penalize(server, target, BAN_SCORE_THRESHOLD)
            elif target in self.nodes and self.nodes[target].is_server:
                for exit_id in self.proxy_exits:
                    self._penalize(target, exit_id, BAN_SCORE_THRESHOLD)
            else:
                raise ValueError(f"Ban target {target} is neither a server nor a proxy exit.")
        return self

    def start_churn(self) -> None:
        """Install client arrival and server departure processes."""
        churn = self.cfg.churn_model
        if not churn.enabled:
            return
        if churn.client_arrival_rate_per_hour > 0 and self.client_ids:
            self.env.process(self._client_arrivals())
        for server, lifetime_s in self._server_lifetimes.items():
            self.after(int(lifetime_s * 1000), self.server_offline, server)

    def _client_arrivals(self):
        churn = self.cfg.churn_model
        mean_gap_ms = 3_600_000.0 / churn.client_arrival_rate_per_hour
        while True:
            yield self.env.timeout(max(int(self._churn_rng.exponential(mean_gap_ms)), 1))
            offline = [c for c in self.client_ids if not self.nodes[c].online]
            if not offline:
                continue
            client = offline[int(self._churn_rng.integers(len(offline)))]
            self.client_connect(client)
            session_ms = int(churn.sample_session_s(self._churn_rng) * 1000)
            self.after(session_ms, self._end_session, client, self.nodes[client].session_id)

    def _end_session(self, client: NodeId, session_id: Optional[int]) -> None:
        if self.nodes[client].session_id == session_id:
            self.client_disconnect(client)

    #####################################
    # Inspection
    #####################################

    def graph(self, include_clients: bool = False) -> nx.Graph:
        g = nx.Graph()
        for node_id, node in self.nodes.items():
            if not node.online or (not include_clients and not node.is_server):
                continue
            g.add_node(node_id, role=node.role.value)
            for conn in node.links:
                if conn.observer:
                    continue
                if include_clients or self.nodes[conn.to_id].is_server:
                    g.add_edge(node_id, conn.to_id)
        return g

    def snapshot(self) -> Dict:
        nodes = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            nodes.append(
                {
                    "id": node_id,
                    "role": node.role.value,
                    "online": node.online,
                    "salt": node.salt,
                    "neighbors": sorted(c.to_id for c in node.links),
                    "nonces": sorted(c.nonce for c in node.links),
                    "addrdb": sorted(a.owner for a in node.addrdb.entries),
                    "public_owner": node.public_owner,
                    "proxied": node.proxied,
                }
            )
        return {"t": self.now_ms, "nodes": nodes, "proxy_exits": list(self.proxy_exits)}

    def snapshot_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()

    def check_invariants(self) -> List[str]:
        """Connection conservation, slot limits and queue accounting; empty list when all hold."""
        problems = []
        link_ends = 0
        for node_id, node in self.nodes.items():
            if node.is_server and len(node.links) > self.cfg.max_connections_per_server:
                problems.append(f"server {node_id} has {len(node.links)} connections")
            if node.pending != sum(c.queued for c in node.links):
                problems.append(f"node {node_id} pending counter out of sync")
            for conn in node.links:
                if not conn.open or conn.from_id != node_id:
                    problems.append(f"node {node_id} holds a stale connection {conn!r}")
                if conn.observer:
                    continue
                link_ends += 1
                peer = conn.peer
                if peer is None or peer.peer is not conn or peer not in self.nodes[conn.to_id].links:
                    problems.append(f"connection {conn!r} has no matching reverse side")
            if not node.is_server and len([c for c in node.links if c.outbound]) > self.cfg.outgoing_per_peer:
                problems.append(f"client {node_id} exceeds outgoing_per_peer")
        if link_ends % 2:
            problems.append("odd number of link ends")
        return problems

    def undelivered_transactions(self) -> Dict[TxId, List[NodeId]]:
        """Online servers that have not received each generated transaction."""
        missing = {}
        online = [s for s in self.server_ids if self.nodes[s].online]
        for tx in self.tx_origin:
            lacking = [s for s in online if tx not in self.nodes[s].known_txs]
            if lacking:
                missing[tx] = lacking
        return missing

    def summary(self) -> Dict:
        degrees = [len([c for c in self.nodes[s].links if not c.observer]) for s in self.server_ids]
        return {
            "t_ms": self.now_ms,
            "servers_online": sum(1 for s in self.server_ids if self.nodes[s].online),
            "clients_online": sum(1 for c in self.client_ids if self.nodes[c].online),
            "mean_server_degree": float(np.mean(degrees)) if degrees else 0.0,
            "transactions": len(self.tx_origin),
            "event_log_digest": self.event_log_digest(),
        }


#####################################
# Define World Construction
#####################################


def _build_server_links(world: World) -> None:
    cfg = world.cfg
    rng = world._topo_rng
    if cfg.edges is not None:
        for a, b in cfg.edges:
            if b in world.nodes[a].neighbor_ids():
                continue
            world.connect(a, b)
        return
    for server in world.server_ids:
        node = world.nodes[server]
        need = cfg.outgoing_per_peer - len([c for c in node.links if c.outbound])
        if need <= 0:
            continue
        picks = world._pick_servers(need, node.neighbor_ids() | {server}, rng)
        for peer in picks:
            world.connect(server, peer)
    if cfg.target_mean_degree:
        target_links = int(np.ceil(cfg.target_mean_degree * cfg.n_servers / 2))
        g = world.graph()
        attempts = 0
        while g.number_of_edges() < target_links and attempts < 50 * target_links:
            attempts += 1
            a, b = (int(x) for x in rng.choice(cfg.n_servers, size=2, replace=False))
            if g.has_edge(a, b) or world.free_slots(a) <= 0 or world.free_slots(b) <= 0:
                continue
            world.connect(a, b)
            g.add_edge(a, b)
    components = [sorted(c) for c in nx.connected_components(world.graph())]
    components.sort(key=lambda c: c[0])
    for left, right in zip(components, components[1:]):
        a = left[int(rng.integers(len(left)))]
        b = right[int(rng.integers(len(right)))]
        world.connect(a, b)


def _seed_addrdbs(world: World) -> None:
    cfg = world.cfg
    rng = world._db_rng
    now_s = world.now_s
    component_of = {}
    for component in nx.connected_components(world.graph()):
        members = sorted(component)
        for member in members:
            component_of[member] = members
    for server in world.server_ids:
        node = world.nodes[server]
        known = sorted(node.neighbor_ids())
        members = component_of.get(server, [server])
        if cfg.addrdb_seed_size and len(members) > 1:
            k = min(cfg.addrdb_seed_size, len(members))
            known += [members[int(i)] for i in rng.choice(len(members), size=k, replace=False)]
        for peer in known:
            if peer == server:
                continue
            ts = max(now_s - float(rng.uniform(0, 3 * 3600)), 0.0)
            node.addrdb.insert(NetAddress(peer, Reachability.REACHABLE, ts), rng)


def build_world(cfg: WorldConfig) -> World:
    """
    Build the server topology and the (offline) client population.

    Raises:
        ValueError: If the config has field-level problems.
        InfeasibleWorldError: If servers cannot each pick outgoing_per_peer distinct peers.
    """
    logger.info(f"FUNCTION START: build_world with n_servers={cfg.n_servers}, n_clients={cfg.n_clients}, seed={cfg.seed}")
    problems = cfg.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if cfg.edges is None and cfg.n_servers < cfg.outgoing_per_peer + 1:
        raise InfeasibleWorldError(
            f"n_servers={cfg.n_servers} cannot give each server {cfg.outgoing_per_peer} distinct peers"
        )
    world = World(cfg)
    rng = world._topo_rng
    phases = rng.integers(0, TRICKLE_INTERVAL_MS, size=cfg.n_servers + cfg.n_clients)
    salts = rng.integers(0, 2**63, size=cfg.n_servers + cfg.n_clients)
    for i, node_id in enumerate(world.server_ids + world.client_ids):
        role = NodeRole.SERVER if node_id < cfg.n_servers else NodeRole.CLIENT
        world.nodes[node_id] = Node(
            id=node_id,
            role=role,
            salt=int(salts[i]),
            addrdb=AddrDb(int(salts[i]), cfg.addrdb_capacity),
            phase=int(phases[i]) if cfg.trickle_phase_jitter else 0,
            online=role == NodeRole.SERVER,
        )

    # Public addresses: NAT groups share one, every other client has its own
    client_rng = world._client_rng
    position = 0
    for size in cfg.nat_groups:
        shared = world.allocate_id()
        for client in world.client_ids[position:position + size]:
            world.nodes[client].public_owner = shared
        position += size
    for client in world.client_ids[position:]:
        world.nodes[client].public_owner = world.allocate_id()
    for client in world.client_ids:
        node = world.nodes[client]
        node.pseudonym = int(client_rng.integers(0, 2**63))
        node.proxied = bool(client_rng.uniform() < cfg.proxy_client_fraction)
    world.proxy_exits = [world.allocate_id() for _ in range(cfg.n_proxy_exits)]

    _build_server_links(world)
    _seed_addrdbs(world)
    if cfg.churn_model.enabled:
        for server in world.server_ids:
            lifetime = cfg.churn_model.sample_server_lifetime_s(world._churn_rng)
            if lifetime is not None:
                world._server_lifetimes[server] = lifetime
    g = world.graph()
    logger.info(
        f"World built: {g.number_of_nodes()} servers, {g.number_of_edges()} links, "
        f"{nx.number_connected_components(g)} component(s)"
    )
    return world


#####################################
# Define Module-Level Operations
#####################################


def client_connect(world: World, client: NodeId, now: Optional[float] = None) -> EntryFingerprint:
    return world.client_connect(client, now)


def run_until(world: World, t_end: int) -> World:
    return world.run_until(t_end)


def apply_tor_ban(world: World, target: Iterable[NodeId]) -> World:
    return world.apply_tor_ban(target)


def config_to_dict(cfg: WorldConfig) -> Dict:
    """Plain-data view of a WorldConfig (used by --dry-run and summaries)."""
    return asdict(cfg)

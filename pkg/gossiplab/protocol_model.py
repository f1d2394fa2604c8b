"""
gossiplab/protocol_model.py

Pure implementation of the gossip rules a Bitcoin peer applies when it relays
addresses and transactions:

- responsible-node selection for ADDR relay (keyed hash, stable for a day)
- the ADDR forwarding check (message size, freshness, per-connection history)
- trickling: one random neighbour per 100 ms round gets its queues flushed
- the 1/4 immediate-forward rule for transactions
- GETADDR sampling from the address database

Nothing here owns an event loop. The simulator in gossiplab/netsim.py calls these
functions and owns all mutation of the objects defined below.

Example:
    from gossiplab.protocol_model import NetAddress, responsible_nodes
    targets = responsible_nodes(addr, node.links, node.salt, day_index(now))

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

# Import from external packages (requires a virtual environment)
import numpy as np

#####################################
# Define Protocol Constants
#####################################

NodeId = int
TxId = int

TRICKLE_INTERVAL_MS: int = 100
ADDR_RELAY_MAX_COUNT: int = 10
ADDR_MAX_AGE_S: float = 600.0
ADDR_MSG_MAX_ENTRIES: int = 1000
ADDRDB_CAPACITY: int = 20480
GETADDR_FRACTION: float = 0.23
GETADDR_MAX: int = 2500
DAY_S: int = 86400
BAN_DURATION_S: int = 86400
BAN_SCORE_THRESHOLD: int = 100

_MASK64 = (1 << 64) - 1


class NoNeighborsError(ValueError):
    """Raised when a trickle round is requested for a node without neighbours."""


class NodeRole(str, enum.Enum):
    SERVER = "server"
    CLIENT = "client"


class Reachability(str, enum.Enum):
    REACHABLE = "reachable"
    UNREACHABLE = "unreachable"


#####################################
# Define Domain Types
#####################################


@dataclass(frozen=True)
class NetAddress:
    """An advertised peer address with its freshness timestamp (seconds)."""

    owner: NodeId
    reachability: Reachability = Reachability.REACHABLE
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"NetAddress timestamp must be finite and non-negative, got {self.timestamp}")

    @property
    def reachable(self) -> bool:
        return self.reachability == Reachability.REACHABLE

    def age(self, now: float) -> float:
        return now - self.timestamp

    def restamped(self, timestamp: float) -> "NetAddress":
        return NetAddress(self.owner, self.reachability, timestamp)


@dataclass(eq=False)
class Connection:
    """
    One direction of a link, as seen by the sending peer.

    A TCP link between two peers is represented by two Connection objects that point
    at each other through `peer`. The histories record what the sending side knows
    the receiving side already has: entries are added when something is sent over
    this connection and when the receiver announced it to us first.
    """

    from_id: NodeId
    to_id: NodeId
    nonce: int
    established_at: float
    history_epoch: int
    addr_history: Set[NodeId] = field(default_factory=set)
    tx_history: Set[TxId] = field(default_factory=set)
    addr_queue: Dict[NodeId, NetAddress] = field(default_factory=dict)
    tx_queue: Dict[TxId, None] = field(default_factory=dict)
    observer: bool = False
    outbound: bool = True
    open: bool = True
    peer: Optional["Connection"] = None
    # one-way latency in ms, set by the simulator when the link opens
    latency_ms: int = 0

    def ensure_epoch(self, day: int) -> None:
        """Empty both histories once the day index moves past the stored epoch."""
        if day != self.history_epoch:
            self.addr_history.clear()
            self.tx_history.clear()
            self.history_epoch = day

    def mark_addr_sent(self, owner: NodeId) -> None:
        self.addr_history.add(owner)

    def mark_tx_sent(self, tx: TxId) -> None:
        self.tx_history.add(tx)

    @property
    def queued(self) -> int:
        return len(self.addr_queue) + len(self.tx_queue)

    def __repr__(self) -> str:
        return f"Connection({self.from_id}->{self.to_id}, nonce={self.nonce:#x})"


class AddrDb:
    """
    Bounded address database of one peer.

    Entries are keyed by owner; a newer timestamp for a known owner replaces the
    stored one. When full, inserting a new owner evicts a uniformly random entry.
    """

    def __init__(self, salt: int, capacity: int = ADDRDB_CAPACITY):
        if capacity < 0:
            raise ValueError(f"AddrDb capacity must be non-negative, got {capacity}")
        self.salt = salt
        self.capacity = capacity
        self._entries: Dict[NodeId, NetAddress] = {}
        self._owners: List[NodeId] = []
        self._position: Dict[NodeId, int] = {}

    def __len__(self) -> int:
        return len(self._owners)

    def __contains__(self, owner: object) -> bool:
        return owner in self._entries

    @property
    def entries(self) -> Set[NetAddress]:
        return set(self._entries.values())

    def get(self, owner: NodeId) -> Optional[NetAddress]:
        return self._entries.get(owner)

    def insert(self, addr: NetAddress, rng: np.random.Generator) -> bool:
        """Store addr; returns True when the owner was not known before."""
        known = self._entries.get(addr.owner)
        if known is not None:
            if addr.timestamp > known.timestamp:
                self._entries[addr.owner] = addr
            return False
        if self.capacity == 0:
            return False
        if len(self._owners) >= self.capacity:
            self._evict(int(rng.integers(len(self._owners))))
        self._position[addr.owner] = len(self._owners)
        self._owners.append(addr.owner)
        self._entries[addr.owner] = addr
        return True

    def sample(self, k: int, rng: np.random.Generator) -> List[NetAddress]:
        """Uniform sample of k distinct entries."""
        k = min(k, len(self._owners))
        if k <= 0:
            return []
        picks = rng.choice(len(self._owners), size=k, replace=False)
        return [self._entries[self._owners[int(i)]] for i in picks]

    def _evict(self, position: int) -> None:
        owner = self._owners[position]
        last = self._owners.pop()
        if last != owner:
            self._owners[position] = last
            self._position[last] = position
        del self._position[owner]
        del self._entries[owner]


@dataclass
class TxSchedule:
    immediate: bool
    queued_to: List[Connection]


#####################################
# Define Functions
#####################################


def day_index(now: float) -> int:
    return int(now // DAY_S)


def keyed_hash(salt: int, *parts: int) -> int:
    """64-bit keyed hash over integer parts (blake2b in keyed mode)."""
    h = hashlib.blake2b(digest_size=8, key=(salt & _MASK64).to_bytes(8, "little"))
    for part in parts:
        h.update((part & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def responsible_connections(
    addr: NetAddress, neighbors: Sequence[Connection], salt: int, day: int
) -> List[Connection]:
    """
    The one or two connections a peer relays `addr` to.

    Neighbours are ranked by hash(salt, owner, day, connection nonce); reachable
    addresses go to the first two, unreachable ones to the first only.
    """
    if not neighbors:
        return []
    count = 2 if addr.reachable else 1
    ranked = sorted(
        range(len(neighbors)),
        key=lambda i: keyed_hash(salt, addr.owner, day, neighbors[i].nonce),
    )
    return [neighbors[i] for i in ranked[:count]]


def responsible_nodes(addr: NetAddress, neighbors: Sequence[Connection], salt: int, day: int) -> List[NodeId]:
    return [conn.to_id for conn in responsible_connections(addr, neighbors, salt, day)]


def should_forward_addr(msg_addr_count: int, addr: NetAddress, now: float, conn: Connection) -> bool:
    """
    Forwarding check for one address over one connection.

    The connection's history is rolled over lazily when `now` falls in a new day.
    """
    if msg_addr_count > ADDR_RELAY_MAX_COUNT:
        return False
    if now - addr.timestamp > ADDR_MAX_AGE_S:
        return False
    conn.ensure_epoch(day_index(now))
    return addr.owner not in conn.addr_history


def relay_targets(
    addr: NetAddress, msg_addr_count: int, now: float, neighbors: Sequence[Connection], salt: int
) -> List[Connection]:
    """Responsible connections for addr that still pass the forwarding check."""
    if msg_addr_count > ADDR_RELAY_MAX_COUNT or now - addr.timestamp > ADDR_MAX_AGE_S:
        return []
    chosen = responsible_connections(addr, neighbors, salt, day_index(now))
    return [conn for conn in chosen if should_forward_addr(msg_addr_count, addr, now, conn)]


def is_immediate(tx: TxId, salt: int) -> bool:
    """True when the keyed hash of tx has its two lowest bits clear."""
    return keyed_hash(salt, tx) & 3 == 0


def schedule_tx_forwarding(tx: TxId, neighbors: Sequence[Connection], salt: int) -> TxSchedule:
    """
    Queue tx on every connection whose history lacks it.

    The caller flushes all returned queues at once when `immediate` is set and
    otherwise leaves them to the trickle rounds.
    """
    queued: List[Connection] = []
    for conn in neighbors:
        if tx in conn.tx_history or tx in conn.tx_queue:
            continue
        conn.tx_queue[tx] = None
        queued.append(conn)
    return TxSchedule(immediate=is_immediate(tx, salt), queued_to=queued)


def trickle_pick(neighbors: Sequence[Connection], rng_state: np.random.Generator) -> Connection:
    if not neighbors:
        raise NoNeighborsError("no neighbors")
    return neighbors[int(rng_state.integers(len(neighbors)))]


def getaddr_reply_size(db_size: int) -> int:
    """23% of the database (rounded half up), capped at 2500."""
    return min(int(math.floor(GETADDR_FRACTION * db_size + 0.5)), GETADDR_MAX)


def getaddr_response(db: AddrDb, rng_state: np.random.Generator) -> List[NetAddress]:
    return db.sample(getaddr_reply_size(len(db)), rng_state)


def misbehave(score: int, penalty: int) -> Tuple[int, bool]:
    """Add a misbehaviour penalty; the second value says whether the peer is now banned."""
    if penalty < 0:
        raise ValueError(f"penalty must be non-negative, got {penalty}")
    new_score = score + penalty
    return new_score, new_score >= BAN_SCORE_THRESHOLD

"""
gossiplab/scenario.py

Scenario documents and the replica pipeline behind `gossiplab run`.

A scenario is a JSON object with the sections `world`, `attacker`, `schedule` and
`metrics`. load_scenario turns it into typed dataclasses and reports every problem as a
field-level diagnostic (`world.max_connections_per_server: must be >= outgoing_per_peer`).

One replica:
1. build the world from the scenario seed split for this replica
2. let the attacker enumerate servers, open its links and start the rebroadcasts
3. connect the clients, generate their transactions, apply scheduled bans
4. match sightings against the learned fingerprints and score them against ground truth

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import dataclasses
import json
import pathlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

# Import from external packages (requires a virtual environment)
import numpy as np
from scipy import stats

# Import local modules
from gossiplab.attacker import (
    RECORD_COLUMNS,
    Attacker,
    AttackerConfig,
    clusters_frame,
    entries_in_top,
    fingerprint_session,
    link_sessions,
    records_frame,
    score_records,
)
from gossiplab.netsim import (
    ChurnModel,
    Countermeasures,
    DelayModel,
    World,
    WorldConfig,
    build_world,
    fingerprint_overlap,
)
from gossiplab.protocol_model import NetAddress, NodeId, Reachability
from utils.logger import logger
from utils.settings import settings
from utils.table_exporter import SCHEMA_VERSION, TableExporter

#####################################
# Define Errors and Constants
#####################################

METRIC_TAPS = ("deanonymization", "top10_histogram", "fingerprint_decay", "exposure", "invariants")
CANDIDATE_SOURCES = ("clients", "none")
BAN_TARGETS = ("exits", "servers")


class ScenarioError(ValueError):
    """Invalid scenario; `diagnostics` holds one message per offending field."""

    def __init__(self, diagnostics: List[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


#####################################
# Define Scenario Types
#####################################


@dataclass
class SessionSpec:
    client: int
    start_s: float
    end_s: Optional[float] = None


@dataclass
class TxSpec:
    client: int
    at_s: float


@dataclass
class Schedule:
    duration_s: float = 3600.0
    warmup_s: float = 30.0
    clients: Union[str, int] = "all"
    connect_start_s: float = 60.0
    connect_spread_s: float = 300.0
    n_transactions: int = 0
    tx_start_s: float = 600.0
    tx_end_s: Optional[float] = None
    sessions: List[SessionSpec] = field(default_factory=list)
    transactions: List[TxSpec] = field(default_factory=list)
    tor_ban_at_s: Optional[float] = None
    tor_ban_targets: Union[str, List[int]] = "exits"
    decay_checkpoints_s: List[float] = field(default_factory=list)

    def validate(self, prefix: str = "schedule") -> List[str]:
        problems = []
        if self.duration_s <= 0:
            problems.append(f"{prefix}.duration_s: must be > 0")
        if self.warmup_s < 0 or self.connect_start_s < 0 or self.connect_spread_s < 0:
            problems.append(f"{prefix}.warmup_s: warmup, connect_start_s and connect_spread_s must be >= 0")
        if not (self.clients == "all" or (isinstance(self.clients, int) and self.clients >= 0)):
            problems.append(f"{prefix}.clients: must be 'all' or a non-negative integer")
        if self.n_transactions < 0:
            problems.append(f"{prefix}.n_transactions: must be >= 0")
        tx_end = self.duration_s if self.tx_end_s is None else self.tx_end_s
        if self.n_transactions and not 0 <= self.tx_start_s <= tx_end <= self.duration_s:
            problems.append(f"{prefix}.tx_start_s: need 0 <= tx_start_s <= tx_end_s <= duration_s")
        for i, tx in enumerate(self.transactions):
            if not 0 <= tx.at_s <= self.duration_s:
                problems.append(f"{prefix}.transactions[{i}].at_s: must be within [0, duration_s]")
        for i, session in enumerate(self.sessions):
            if session.start_s < 0 or (session.end_s is not None and session.end_s <= session.start_s):
                problems.append(f"{prefix}.sessions[{i}]: need start_s >= 0 and end_s > start_s")
        if isinstance(self.tor_ban_targets, str) and self.tor_ban_targets not in BAN_TARGETS:
            problems.append(f"{prefix}.tor_ban_targets: must be one of {', '.join(BAN_TARGETS)} or a list of ids")
        if any(t < 0 or t > self.duration_s for t in self.decay_checkpoints_s):
            problems.append(f"{prefix}.decay_checkpoints_s: must lie within [0, duration_s]")
        return problems


@dataclass
class Scenario:
    name: str
    world: WorldConfig
    attacker: AttackerConfig
    schedule: Schedule
    replicas: int = 1
    seed: Optional[int] = None
    candidates: str = "clients"
    metrics: List[str] = field(default_factory=lambda: ["deanonymization", "top10_histogram", "invariants"])
    output_dir: Optional[str] = None


@dataclass
class ReplicaResult:
    seed: int
    summary: Dict[str, Any]
    records: List[Dict]
    clusters: List[Dict]
    histogram: List[Dict]
    decay: List[Dict]
    invariant_problems: List[str]


#####################################
# Define Loading and Validation
#####################################

_NESTED = {
    "delay_model": DelayModel,
    "churn_model": ChurnModel,
    "countermeasures": Countermeasures,
}


def _build(cls, data: Any, prefix: str, problems: List[str], skip: tuple = ()):
    """Instantiate dataclass cls from a dict, collecting unknown-key problems; None when it cannot be built."""
    if not isinstance(data, dict):
        problems.append(f"{prefix}: must be an object")
        return None
    names = {f.name for f in dataclasses.fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            problems.append(f"{prefix}.{key}: unknown key")
        elif key in _NESTED:
            nested = _build(_NESTED[key], value, f"{prefix}.{key}", problems)
            if nested is not None:
                kwargs[key] = nested
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        problems.append(f"{prefix}: {e}")
        return None


def _type_problems(obj, prefix: str) -> List[str]:
    """Numbers and flags must keep the type of their default."""
    problems = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            problems.extend(_type_problems(value, f"{prefix}.{f.name}"))
            continue
        default = f.default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                problems.append(f"{prefix}.{f.name}: must be true or false")
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{prefix}.{f.name}: must be a number")
    return problems


def _checked(obj, prefix: str, problems: List[str]) -> None:
    """Type check, then the object's own validate() once the types are sound."""
    found = _type_problems(obj, prefix)
    if not found:
        try:
            found = obj.validate(prefix)
        except TypeError:
            found = [f"{prefix}: fields have the wrong type"]
    problems.extend(found)


def _parse_world(data: Any, problems: List[str]) -> WorldConfig:
    world = _build(WorldConfig, {} if data is None else data, "world", problems) or WorldConfig()
    if world.edges is not None:
        try:
            world.edges = [(int(a), int(b)) for a, b in world.edges]
        except (TypeError, ValueError):
            problems.append("world.edges: must be a list of [a, b] pairs")
            world.edges = None
    try:
        world.churn_model.server_disconnect_curve = [
            (float(dt), float(p)) for dt, p in world.churn_model.server_disconnect_curve
        ]
    except (TypeError, ValueError):
        problems.append("world.churn_model.server_disconnect_curve: must be a list of [seconds, probability] pairs")
        world.churn_model.server_disconnect_curve = []
    _checked(world, "world", problems)
    return world


def _parse_schedule(data: Any, problems: List[str]) -> Schedule:
    raw = dict(data) if isinstance(data, dict) else ({} if data is None else data)
    sessions = raw.pop("sessions", []) if isinstance(raw, dict) else []
    transactions = raw.pop("transactions", []) if isinstance(raw, dict) else []
    schedule = _build(Schedule, raw, "schedule", problems) or Schedule()
    for name, cls, items in (("sessions", SessionSpec, sessions), ("transactions", TxSpec, transactions)):
        parsed = []
        for i, item in enumerate(items if isinstance(items, list) else []):
            spec = _build(cls, item, f"schedule.{name}[{i}]", problems)
            if spec is not None:
                parsed.append(spec)
        setattr(schedule, name, parsed)
    _checked(schedule, "schedule", problems)
    return schedule


def parse_scenario(doc: Dict[str, Any], name: str = "scenario") -> Scenario:
    """
    Validate a scenario document.

    Raises:
        ScenarioError: With every field-level problem found.
    """
    problems: List[str] = []
    if not isinstance(doc, dict):
        raise ScenarioError(["scenario: must be a JSON object"])
    known = {"name", "world", "attacker", "schedule", "replicas", "seed", "candidates", "metrics", "output_dir"}
    for key in doc:
        if key not in known:
            problems.append(f"{key}: unknown key")
    world = _parse_world(doc.get("world"), problems)
    attacker_doc = doc.get("attacker", {})
    attacker = _build(AttackerConfig, attacker_doc, "attacker", problems, skip=("candidate_addresses",))
    attacker = attacker or AttackerConfig()
    _checked(attacker, "attacker", problems)
    schedule = _parse_schedule(doc.get("schedule"), problems)
    replicas = doc.get("replicas", 1)
    if not isinstance(replicas, int) or isinstance(replicas, bool) or replicas < 1:
        problems.append("replicas: must be an integer >= 1")
    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        problems.append("seed: must be a non-negative integer")
    candidates = doc.get("candidates", "clients")
    if candidates not in CANDIDATE_SOURCES:
        problems.append(f"candidates: must be one of {', '.join(CANDIDATE_SOURCES)}")
    metrics = doc.get("metrics", ["deanonymization", "top10_histogram", "invariants"])
    for tap in metrics if isinstance(metrics, list) else [metrics]:
        if tap not in METRIC_TAPS:
            problems.append(f"metrics: unknown tap '{tap}'")
    if problems:
        raise ScenarioError(problems)

    # cross-section checks assume every section is well typed
    if schedule.tor_ban_at_s is not None and not world.tor_ban_enabled:
        problems.append("schedule.tor_ban_at_s: requires world.tor_ban_enabled")
    if isinstance(schedule.clients, int) and schedule.clients > world.n_clients:
        problems.append("schedule.clients: exceeds world.n_clients")
    first_client, end_client = world.n_servers, world.n_servers + world.n_clients
    for label, specs in (("sessions", schedule.sessions), ("transactions", schedule.transactions)):
        for i, spec in enumerate(specs):
            if not isinstance(spec.client, int) or not first_client <= spec.client < end_client:
                problems.append(f"schedule.{label}[{i}].client: {spec.client} is not a client id")
    if isinstance(schedule.tor_ban_targets, list):
        for target in schedule.tor_ban_targets:
            if not isinstance(target, int) or target < 0:
                problems.append(f"schedule.tor_ban_targets: {target} is not a node id")
                break
    if problems:
        raise ScenarioError(problems)
    return Scenario(
        name=str(doc.get("name", name)),
        world=world,
        attacker=attacker,
        schedule=schedule,
        replicas=replicas,
        seed=seed,
        candidates=candidates,
        metrics=list(metrics),
        output_dir=doc.get("output_dir"),
    )


def load_scenario(path: pathlib.Path) -> Scenario:
    """Read and validate a scenario JSON file."""
    path = pathlib.Path(path)
    logger.info(f"FUNCTION START: load_scenario with path={path}")
    if not path.exists():
        raise ScenarioError([f"{path}: file not found"])
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError([f"{path}: invalid JSON ({e})"])
    return parse_scenario(doc, name=path.stem)


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    """Resolved, JSON-ready view (printed by --dry-run)."""
    doc = dataclasses.asdict(scenario)
    doc["attacker"].pop("candidate_addresses", None)
    return doc


def replica_seeds(base_seed: int, replicas: int) -> List[int]:
    """One child seed per replica, derived from the base seed only."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(base_seed).spawn(replicas)]


#####################################
# Define the Replica Pipeline
#####################################


def _candidate_addresses(world: World, source: str) -> List[NetAddress]:
    if source == "none":
        return []
    owners = {world.nodes[c].public_owner for c in world.client_ids}
    owners.update(world.proxy_exits)
    return [NetAddress(owner, Reachability.REACHABLE, 0.0) for owner in sorted(owners)]


def _ban_targets(world: World, targets: Union[str, List[int]]) -> List[NodeId]:
    if targets == "exits":
        return list(world.proxy_exits)
    if targets == "servers":
        return list(world.server_ids)
    return [int(t) for t in targets]


class _Driver:
    """Schedules the scripted client behaviour of one replica on the world clock."""

    def __init__(self, world: World, schedule: Schedule, rng: np.random.Generator):
        self.world = world
        self.schedule = schedule
        self.rng = rng
        self.t0 = world.now_ms
        self.client_txs: List[int] = []
        self.skipped_txs = 0
        self.decay: List[Dict] = []
        self.initial_entries: Dict[NodeId, frozenset] = {}

    def at(self, t_s: float, callback, *args) -> None:
        self.world.after(self.t0 + int(t_s * 1000) - self.world.now_ms, callback, *args)

    def install(self) -> None:
        s = self.schedule
        if s.sessions:
            for spec in s.sessions:
                self.at(spec.start_s, self._connect, spec.client)
                if spec.end_s is not None:
                    self.at(spec.end_s, self.world.client_disconnect, spec.client)
        else:
            clients = self.world.client_ids
            count = len(clients) if s.clients == "all" else int(s.clients)
            chosen = sorted(int(c) for c in self.rng.choice(clients, size=count, replace=False)) if count else []
            offsets = np.sort(self.rng.uniform(0, s.connect_spread_s, size=len(chosen)))
            for client, offset in zip(chosen, offsets):
                self.at(s.connect_start_s + float(offset), self._connect, client)
        for spec in s.transactions:
            self.at(spec.at_s, self._send_tx, spec.client)
        if s.n_transactions:
            tx_end = s.duration_s if s.tx_end_s is None else s.tx_end_s
            for t in np.sort(self.rng.uniform(s.tx_start_s, tx_end, size=s.n_transactions)):
                self.at(float(t), self._send_tx, None)
        if s.tor_ban_at_s is not None:
            self.at(s.tor_ban_at_s, self._ban)
        for t in s.decay_checkpoints_s:
            self.at(t, self._measure_decay, t)

    def _connect(self, client: NodeId) -> None:
        if self.world.nodes[client].online:
            return
        fp = self.world.client_connect(client)
        self.initial_entries.setdefault(client, fp.entries)

    def _send_tx(self, client: Optional[NodeId]) -> None:
        if client is None:
            online = [c for c in self.world.client_ids if self.world.nodes[c].online and self.world.nodes[c].links]
            if not online:
                self.skipped_txs += 1
                return
            client = online[int(self.rng.integers(len(online)))]
        node = self.world.nodes[client]
        if not node.online or not node.links:
            self.skipped_txs += 1
            return
        self.client_txs.append(self.world.generate_tx(client))

    def _ban(self) -> None:
        self.world.apply_tor_ban(_ban_targets(self.world, self.schedule.tor_ban_targets))

    def _measure_decay(self, t_s: float) -> None:
        overlaps = [
            fingerprint_overlap(initial, self.world.fingerprint(client))
            for client, initial in self.initial_entries.items()
            if self.world.nodes[client].online
        ]
        self.decay.append(
            {
                "t_s": t_s,
                "clients": len(overlaps),
                "mean_overlap": float(np.mean(overlaps)) if overlaps else float("nan"),
            }
        )


def _rate(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else float("nan")


def _summarize(world: World, attacker: Attacker, driver: _Driver, rows: List[Dict], sightings) -> Dict[str, Any]:
    n_tx = len(driver.client_txs)
    three = [r for r in rows if r["tuple_level"] == "three"]
    two = [r for r in rows if r["tuple_level"] == "two"]
    learned = [fp for fp in attacker.fingerprints if fingerprint_session(world, fp) is not None]
    false_entries = 0
    total_entries = 0
    for fp in learned:
        truth = world.sessions[fingerprint_session(world, fp)].entries
        total_entries += len(fp.observed_entries)
        false_entries += len(fp.observed_entries - truth)
    client_txs = set(driver.client_txs)
    immediate = [s for s in sightings if s.tx in client_txs and world.tx_immediate.get(s.tx)]
    trickled = [s for s in sightings if s.tx in client_txs and not world.tx_immediate.get(s.tx)]
    proxied = [r for r in world.sessions.values() if r.via_proxy]
    last_decay = driver.decay[-1]["mean_overlap"] if driver.decay else float("nan")
    return {
        "n_transactions": n_tx,
        "skipped_transactions": driver.skipped_txs,
        "n_fingerprints": len(attacker.fingerprints),
        "mean_entries_learned": float(np.mean([len(fp.observed_entries) for fp in learned])) if learned else float("nan"),
        "three_tuple_rate": _rate(sum(1 for r in three if r["correct"]), n_tx),
        "three_tuple_matched_rate": _rate(len(three), n_tx),
        "two_tuple_rate": _rate(len(two), n_tx),
        "two_tuple_correct_rate": _rate(sum(1 for r in two if r["right_among_candidates"]), len(two)),
        "unrecognized_rate": _rate(len(attacker.unrecognized), n_tx),
        "immediate_top10_ge3": _rate(sum(1 for s in immediate if entries_in_top(world, s) >= 3), len(immediate)),
        "trickled_top10_ge3": _rate(sum(1 for s in trickled if entries_in_top(world, s) >= 3), len(trickled)),
        "false_entry_rate": _rate(false_entries, total_entries),
        "fingerprint_retained": last_decay,
        "true_address_exposure": _rate(sum(1 for r in proxied if r.exposed), len(proxied)),
        "rebroadcasts": attacker.rebroadcasts,
        "attacker_links": attacker.links.total,
        "event_log_digest": world.event_log_digest(),
        "snapshot_digest": world.snapshot_digest(),
    }


def _histogram(world: World, sightings, client_txs: set) -> List[Dict]:
    counts: Dict[tuple, int] = {}
    for s in sightings:
        if s.tx not in client_txs:
            continue
        kind = "immediate" if world.tx_immediate.get(s.tx) else "trickled"
        key = (kind, entries_in_top(world, s))
        counts[key] = counts.get(key, 0) + 1
    return [
        {"forwarding": kind, "entries_in_top10": n, "transactions": counts.get((kind, n), 0)}
        for kind in ("immediate", "trickled")
        for n in range(world.cfg.outgoing_per_peer + 1)
    ]


def run_replica(scenario: Scenario, seed: int, out_dir: Optional[pathlib.Path] = None) -> ReplicaResult:
    """
    Run one seeded replica of the scenario.

    The event log is written to out_dir/events-<seed>.ndjson when out_dir is given.
    """
    logger.info(f"FUNCTION START: run_replica with scenario={scenario.name}, seed={seed}")
    cfg = dataclasses.replace(scenario.world, seed=seed)
    world = build_world(cfg)
    world.start_churn()
    driver_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    attacker_cfg = dataclasses.replace(
        scenario.attacker, candidate_addresses=_candidate_addresses(world, scenario.candidates)
    )
    attacker = Attacker(world, attacker_cfg)
    seeds = [s for s in world.server_ids if world.accepts_inbound(s)][:1]
    attacker.establish_listeners(attacker.enumerate_servers(seeds))
    schedule = scenario.schedule
    attacker.schedule_rebroadcasts(start_ms=world.now_ms + int(schedule.warmup_s * 1000))

    driver = _Driver(world, schedule, driver_rng)
    driver.install()
    world.run_until(driver.t0 + int(schedule.duration_s * 1000))

    records, _ = attacker.deanonymize()
    rows = score_records(records, world, attacker.fingerprints)
    sightings = attacker.sight_transactions()
    problems = world.check_invariants() if "invariants" in scenario.metrics else []
    summary = _summarize(world, attacker, driver, rows, sightings)
    summary["invariant_failures"] = len(problems)
    if out_dir is not None:
        world.write_events(pathlib.Path(out_dir) / f"events-{seed}.ndjson")
    clusters = clusters_frame(link_sessions(records)).to_dict("records")
    logger.info(
        f"Replica {seed}: {summary['n_transactions']} transactions, "
        f"three-tuple rate {summary['three_tuple_rate']:.3f}"
    )
    return ReplicaResult(
        seed=seed,
        summary=summary,
        records=records_frame(rows).to_dict("records"),
        clusters=clusters,
        histogram=_histogram(world, sightings, set(driver.client_txs)),
        decay=driver.decay,
        invariant_problems=problems,
    )


#####################################
# Define Scenario Runs
#####################################


@dataclass
class ScenarioRun:
    scenario: str
    seeds: List[int]
    summary: Dict[str, Any]
    out_dir: pathlib.Path
    invariant_problems: List[str]

    @property
    def invariants_ok(self) -> bool:
        return not self.invariant_problems


def _aggregate(replicas: List[ReplicaResult]) -> Dict[str, Dict[str, float]]:
    """Mean with a 95% Student-t interval for every numeric metric (NaN replicas dropped)."""
    metrics: Dict[str, Dict[str, float]] = {}
    for key, value in replicas[0].summary.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            continue
        values = np.array([r.summary[key] for r in replicas], dtype=float)
        values = values[~np.isnan(values)]
        if values.size == 0:
            metrics[key] = {"mean": None, "ci95_low": None, "ci95_high": None, "n": 0}
            continue
        mean = float(values.mean())
        if values.size > 1 and values.std(ddof=1) > 0:
            low, high = stats.t.interval(0.95, values.size - 1, loc=mean, scale=stats.sem(values))
        else:
            low = high = mean
        metrics[key] = {"mean": mean, "ci95_low": float(low), "ci95_high": float(high), "n": int(values.size)}
    return metrics


def _tagged(rows: List[Dict], seed: int) -> List[Dict]:
    return [{"seed": seed, **row} for row in rows]


def run_scenario(
    scenario: Scenario,
    out_dir: pathlib.Path,
    seed: Optional[int] = None,
    replicas: Optional[int] = None,
    workers: int = 1,
) -> ScenarioRun:
    """
    Run every replica of a scenario and write the result files into out_dir.

    Parameters:
        scenario (Scenario): validated scenario.
        out_dir (Path): receives events-<seed>.ndjson, records.csv, clusters.csv,
            top10_histogram.csv, decay.csv (fingerprint_decay tap) and summary.json.
        seed (int, optional): base seed; overrides the scenario seed.
        replicas (int, optional): overrides the scenario replica count.
        workers (int): replicas run in parallel processes when > 1.

    Returns:
        ScenarioRun: aggregate summary and any invariant violations.
    """
    base_seed = seed if seed is not None else (scenario.seed if scenario.seed is not None else settings.base_seed)
    count = replicas if replicas is not None else scenario.replicas
    if count < 1:
        raise ScenarioError([f"replicas: must be an integer >= 1, got {count}"])
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = replica_seeds(base_seed, count)
    logger.info(f"FUNCTION START: run_scenario {scenario.name} with {count} replicas, base seed {base_seed}")

    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replica, [scenario] * count, seeds, [out_dir] * count))
    else:
        results = [run_replica(scenario, s, out_dir) for s in seeds]
    # aggregation never depends on completion order
    results.sort(key=lambda r: r.seed)

    record_rows = [row for r in results for row in _tagged(r.records, r.seed)]
    TableExporter.from_records(record_rows, ["seed"] + RECORD_COLUMNS).with_schema_version().write_csv(
        out_dir / "records.csv"
    )
    cluster_rows = [row for r in results for row in _tagged(r.clusters, r.seed)]
    TableExporter.from_records(cluster_rows, ["seed", "ip", "session_id", "n_transactions", "txs"]).with_schema_version().write_csv(
        out_dir / "clusters.csv"
    )
    if "top10_histogram" in scenario.metrics:
        histogram_rows = [row for r in results for row in _tagged(r.histogram, r.seed)]
        TableExporter.from_records(
            histogram_rows, ["seed", "forwarding", "entries_in_top10", "transactions"]
        ).with_schema_version().write_csv(out_dir / "top10_histogram.csv")
    if "fingerprint_decay" in scenario.metrics:
        decay_rows = [row for r in results for row in _tagged(r.decay, r.seed)]
        TableExporter.from_records(decay_rows, ["seed", "t_s", "clients", "mean_overlap"]).with_schema_version().write_csv(
            out_dir / "decay.csv"
        )

    problems = [f"seed {r.seed}: {p}" for r in results for p in r.invariant_problems]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario.name,
        "base_seed": base_seed,
        "seeds": seeds,
        "metrics": _aggregate(results),
        "replicas": [{"seed": r.seed, **_finite(r.summary)} for r in results],
        "invariant_failures": problems,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    if problems:
        logger.error(f"{len(problems)} invariant violations in {scenario.name}; first: {problems[0]}")
    logger.info(f"Wrote scenario results for {scenario.name} to {out_dir}")
    return ScenarioRun(scenario.name, seeds, summary, out_dir, problems)


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return None if np.isnan(value) else float(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _finite(summary: Dict[str, Any]) -> Dict[str, Any]:
    """NaN rates (no denominator) become null in JSON."""
    return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in summary.items()}

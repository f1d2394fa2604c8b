"""
gossiplab/cli.py

Command-line entry point: `python -m gossiplab <command>` or scripts/run_gossiplab.py.

Commands:
    run <scenario.json>         simulate a scenario and write its result files
    analyze <model>             closed-form tables: success, cost, markov, altchain, churn
    probe degree|discover       topology probing experiments on generated worlds

Exit codes: 0 success, 1 runtime error, 2 invalid scenario or arguments,
3 a simulator invariant was violated.

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import argparse
import json
import pathlib
import sys
from typing import List, Optional

# Import from external packages (requires a virtual environment)
import numpy as np
import pandas as pd

# Import local modules
from gossiplab import __version__
from gossiplab.altchain import BlockMeta, CheckpointRule, DAY_S, build_plan_frame, plan_alternative_chain, plan_summary
from gossiplab.analysis import (
    P3_TESTNET,
    CostModelInput,
    churn_table,
    cost_table,
    default_churn_input,
    success_table,
)
from gossiplab.scenario import ScenarioError, load_scenario, run_scenario, scenario_to_dict
from gossiplab.topology_probe import (
    DEGREE_TABLE_ROWS,
    DISCOVERY_TABLE_ROWS,
    degree_table,
    discovery_table,
    markov_getaddr_expectation,
    residual_miss_probability,
    simulate_getaddr_rounds,
)
from utils.logger import logger, set_console_level
from utils.settings import TABLES_DIR, settings
from utils.table_exporter import TableExporter

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_INVARIANT = 3

EPILOG = """
Examples:
  python -m gossiplab run scenarios/smoke.json --seed 7
  python -m gossiplab run scenarios/testnet_repro.json --replicas 5 --workers 4
  python -m gossiplab analyze success --p-addr 0.64 0.86 0.34
  python -m gossiplab analyze markov --simulate 1000
  python -m gossiplab analyze altchain --now-day 134
  python -m gossiplab probe degree --runs 5
"""


#####################################
# Define Table Output
#####################################


def emit_table(df: pd.DataFrame, name: str, out_dir: pathlib.Path, digits: int = 6) -> pathlib.Path:
    """Print an aligned table and write <out_dir>/<name>.csv with the schema version column."""
    exporter = TableExporter(df).round_columns(digits).with_schema_version()
    print(exporter.to_text())
    path = exporter.write_csv(pathlib.Path(out_dir) / f"{name}.csv")
    logger.info(f"Wrote {path}")
    return path


#####################################
# Define Command Handlers
#####################################


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.replicas is not None:
        if args.replicas < 1:
            raise ScenarioError([f"--replicas: must be >= 1, got {args.replicas}"])
        scenario.replicas = args.replicas
    if args.seed is not None:
        scenario.seed = args.seed
    if args.dry_run:
        print(json.dumps(scenario_to_dict(scenario), indent=2, default=str))
        return EXIT_OK
    if args.out is not None:
        out_dir = pathlib.Path(args.out)
    elif scenario.output_dir is not None:
        out_dir = pathlib.Path(scenario.output_dir)
    else:
        out_dir = settings.output_dir / scenario.name
    run = run_scenario(scenario, out_dir, workers=args.workers or settings.workers)
    for key in ("three_tuple_rate", "two_tuple_rate", "unrecognized_rate", "mean_entries_learned"):
        stats = run.summary["metrics"].get(key)
        if stats and stats["mean"] is not None:
            print(f"{key:24s} {stats['mean']:.4f}  [{stats['ci95_low']:.4f}, {stats['ci95_high']:.4f}]")
    print(f"results: {out_dir}")
    if not run.invariants_ok:
        for problem in run.invariant_problems:
            print(f"invariant violated: {problem}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_success(args: argparse.Namespace) -> int:
    p3 = args.p3 if args.p3 is not None else P3_TESTNET
    emit_table(success_table(args.p_addr, p3, args.max_m), "success", args.out)
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    cost = CostModelInput(
        n_servers=args.servers,
        n_candidates=args.candidates,
        rebroadcast_period_s=args.period,
        attacker_servers=args.attacker_servers,
        month_days=args.month_days,
    )
    emit_table(cost_table(cost), "cost", args.out, digits=2)
    return EXIT_OK


def cmd_markov(args: argparse.Namespace) -> int:
    expected = markov_getaddr_expectation(args.db_size, args.per_reply, args.method)
    row = {
        "db_size": args.db_size,
        "per_reply": args.per_reply,
        "expected_rounds": expected,
        "rounds": args.rounds,
        "miss_probability": residual_miss_probability(args.db_size, args.per_reply, args.rounds),
    }
    if args.simulate:
        rng = np.random.default_rng(args.seed)
        rounds = simulate_getaddr_rounds(args.db_size, args.per_reply, args.simulate, rng, method="counts")
        row["simulated_mean"] = float(rounds.mean())
        row["simulated_runs"] = args.simulate
    emit_table(pd.DataFrame([row]), "markov", args.out, digits=10)
    return EXIT_OK


def cmd_altchain(args: argparse.Namespace) -> int:
    rule = CheckpointRule(T_c=args.checkpoint_day, Q_c=args.checkpoint_difficulty)
    fork = BlockMeta(args.fork_index, args.fork_day * DAY_S, args.fork_difficulty)
    plan = plan_alternative_chain(fork, args.n_blocks, now=args.now_day, rule=rule)
    reference = args.reference if args.reference is not None else args.fork_difficulty
    summary = plan_summary(plan, reference)
    TableExporter(build_plan_frame(plan)).with_schema_version().write_csv(args.out / "altchain_plan.csv")
    emit_table(pd.DataFrame([summary]), "altchain", args.out)
    return EXIT_OK


def cmd_churn(args: argparse.Namespace) -> int:
    churn = default_churn_input(args.m, args.n)
    emit_table(churn_table(churn, args.dt, args.runs, args.seed), "churn", args.out)
    return EXIT_OK


def cmd_probe_degree(args: argparse.Namespace) -> int:
    rows = DEGREE_TABLE_ROWS
    if args.markers is not None:
        rows = [(k, args.markers, listeners) for k, _, listeners in rows]
    emit_table(degree_table(rows, runs=args.runs, seed=args.seed), "degree", args.out, digits=2)
    return EXIT_OK


def cmd_probe_discover(args: argparse.Namespace) -> int:
    table = discovery_table(DISCOVERY_TABLE_ROWS, seed=args.seed, n_markers=args.markers or 1000, runs=args.runs)
    emit_table(table, "discovery", args.out)
    return EXIT_OK


#####################################
# Define the Parser
#####################################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gossiplab",
        description="Address-gossip simulator and client deanonymization toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: GOSSIPLAB_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="simulate a scenario")
    run.add_argument("scenario", type=pathlib.Path, help="scenario JSON file")
    run.add_argument("--seed", type=int, default=None, help="base seed (overrides the scenario)")
    run.add_argument("--replicas", type=int, default=None, help="replica count (overrides the scenario)")
    run.add_argument("--out", type=pathlib.Path, default=None, help="result directory")
    run.add_argument("--workers", type=int, default=None, help="parallel replica processes (default: GOSSIPLAB_WORKERS)")
    run.add_argument("--dry-run", action="store_true", help="validate and print the resolved scenario")
    run.set_defaults(handler=cmd_run)

    analyze = commands.add_parser("analyze", help="closed-form models")
    models = analyze.add_subparsers(dest="model", required=True)

    def table_parser(name: str, help_text: str, handler) -> argparse.ArgumentParser:
        sub = models.add_parser(name, help=help_text)
        sub.add_argument("--out", type=pathlib.Path, default=TABLES_DIR, help=f"table directory (default: {TABLES_DIR})")
        sub.set_defaults(handler=handler)
        return sub

    success = table_parser("success", "P(>= M entry nodes among the first announcers)", cmd_success)
    success.add_argument(
        "--p-addr", "--p", dest="p_addr", type=float, nargs="+", default=[0.64, 0.86, 0.34], help="average p_addr values"
    )
    success.add_argument("--p3", type=float, nargs="+", default=None, help="trickle pmf for L = 0..8")
    success.add_argument("--max-m", type=int, default=5)

    cost = table_parser("cost", "traffic and monthly cost of the rebroadcasts", cmd_cost)
    cost.add_argument("--servers", type=int, default=8000)
    cost.add_argument("--candidates", type=int, default=100_000)
    cost.add_argument("--period", type=float, default=600.0, help="rebroadcast period in seconds")
    cost.add_argument("--attacker-servers", type=int, default=50)
    cost.add_argument("--month-days", type=int, default=30)

    markov = table_parser("markov", "GETADDR replies needed to read a whole database", cmd_markov)
    markov.add_argument("--db-size", type=int, default=20480)
    markov.add_argument("--per-reply", type=int, default=2500)
    markov.add_argument("--method", choices=["recurrence", "fundamental"], default="recurrence")
    markov.add_argument("--rounds", type=int, default=80, help="rounds for the miss probability")
    markov.add_argument("--simulate", type=int, default=0, help="Monte-Carlo runs to add (0 = none)")
    markov.add_argument("--seed", type=int, default=settings.base_seed)

    altchain = table_parser("altchain", "plan a low-difficulty replacement chain", cmd_altchain)
    altchain.add_argument("--checkpoint-day", type=float, default=0.0)
    altchain.add_argument("--checkpoint-difficulty", type=float, default=1.0)
    altchain.add_argument("--fork-index", type=int, default=252_000)
    altchain.add_argument("--fork-day", type=float, default=14.0)
    altchain.add_argument("--fork-difficulty", type=float, default=1.0)
    altchain.add_argument("--n-blocks", type=int, default=27_032)
    altchain.add_argument("--now-day", type=float, default=134.0)
    altchain.add_argument("--reference", type=float, default=None, help="difficulty unit for the cost")

    churn = table_parser("churn", "false-positive rate from connection churn", cmd_churn)
    churn.add_argument("--m", type=int, default=50, help="attacker connections")
    churn.add_argument("--n", type=int, default=20, help="other connections")
    churn.add_argument("--dt", type=float, nargs="+", default=[0, 60, 300, 600], help="seconds after the rebroadcast")
    churn.add_argument("--runs", type=int, default=10_000)
    churn.add_argument("--seed", type=int, default=settings.base_seed)

    probe = commands.add_parser("probe", help="topology probing experiments")
    probes = probe.add_subparsers(dest="probe", required=True)
    for name, help_text, handler, runs in (
        ("degree", "marker-based degree estimates on star worlds", cmd_probe_degree, 5),
        ("discover", "neighbour discovery on worlds with client links", cmd_probe_discover, 1),
    ):
        sub = probes.add_parser(name, help=help_text)
        sub.add_argument("--runs", type=int, default=runs, help=f"seeded worlds per table row (default: {runs})")
        sub.add_argument("--seed", type=int, default=settings.base_seed)
        sub.add_argument("--markers", type=int, default=None, help="marker count (overrides the table rows)")
        sub.add_argument("--out", type=pathlib.Path, default=TABLES_DIR)
        sub.set_defaults(handler=handler)
    return parser


#####################################
# Define Main Function
#####################################


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    if args.log_level:
        set_console_level(args.log_level)
    logger.info(f"STARTING gossiplab {args.command}")
    try:
        code = args.handler(args)
    except ScenarioError as e:
        for diagnostic in e.diagnostics:
            print(diagnostic, file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"gossiplab {args.command} failed: {e}")
        return EXIT_ERROR
    logger.info(f"FINISHED gossiplab {args.command}")
    return code


if __name__ == "__main__":
    sys.exit(main())

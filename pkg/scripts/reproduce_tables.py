"""
scripts/reproduce_tables.py

Write every analysis table into data/tables (or --out):
- success.csv      predicted deanonymization success per average p_addr
- cost.csv         rebroadcast traffic and monthly cost
- markov.csv       GETADDR replies needed to read a full address database
- altchain.csv     cost of the low-difficulty replacement chain (plan in altchain_plan.csv)
- churn.csv        false-positive rate from connection churn after a rebroadcast

With --with-probes the degree and discovery experiments run too (several minutes).

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import argparse
import pathlib
import sys

# Ensure project root is in sys.path for local imports
sys.path.append(str(pathlib.Path(__file__).resolve().parent.parent))

# Import local modules
from gossiplab.cli import main as gossiplab_main  # noqa: E402
from utils.logger import logger  # noqa: E402
from utils.settings import TABLES_DIR  # noqa: E402

ANALYSES = ["success", "cost", "markov", "altchain", "churn"]
PROBES = ["degree", "discover"]


#####################################
# Define Main Function
#####################################


def main() -> int:
    parser = argparse.ArgumentParser(description="Reproduce the analysis tables")
    parser.add_argument("--out", default=str(TABLES_DIR), help=f"table directory (default: {TABLES_DIR})")
    parser.add_argument("--with-probes", action="store_true", help="also run the topology probe experiments")
    args = parser.parse_args()

    logger.info("==================================")
    logger.info("STARTING reproduce_tables.py")
    logger.info("==================================")

    failed = []
    for model in ANALYSES:
        if gossiplab_main(["analyze", model, "--out", args.out]) != 0:
            failed.append(model)
    if args.with_probes:
        for probe in PROBES:
            if gossiplab_main(["probe", probe, "--out", args.out]) != 0:
                failed.append(probe)

    logger.info("==================================")
    if failed:
        logger.error(f"Tables that failed: {', '.join(failed)}")
    logger.info(f"Tables written to {args.out}")
    logger.info("FINISHED reproduce_tables.py")
    logger.info("==================================")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())

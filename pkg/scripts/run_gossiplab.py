"""
scripts/run_gossiplab.py

Run the gossiplab command line from a checkout without installing the package.

Example:
    python scripts/run_gossiplab.py run scenarios/smoke.json --seed 7

"""

#####################################
# Import Modules at the Top
#####################################

# Import from Python Standard Library
import pathlib
import sys

# Ensure project root is in sys.path for local imports
sys.path.append(str(pathlib.Path(__file__).resolve().parent.parent))

# Import local modules
from gossiplab.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())

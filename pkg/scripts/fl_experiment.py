"""
Run the simulator from a checkout without installing it.

Usage: python scripts/fl_experiment.py run --config config/mnist_mlp_small.yaml --out results/mnist
"""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from flsim.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())

"""Spearman trends of the behavior sweep from a run directory.

Usage: python scripts/behavior_trends.py RUN_DIR
"""

import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from eftlab.harness import read_csv

STAT = {"1": "mean_velocity", "2": "mean_follower_gap", "3": "lane_changes"}


def main():
    _, rows = read_csv(Path(sys.argv[1]) / "behavior" / "behavior.csv")
    for comp, col in STAT.items():
        means = defaultdict(list)
        for r in rows:
            if r["component"] == comp:
                means[float(r["value"])].append(float(r[col]))
        xs = sorted(means)
        ys = [np.mean(means[x]) for x in xs]
        rho = spearmanr(xs, ys)[0]
        print(f"c{comp} vs {col}: rho={rho:+.3f}  " + " ".join(f"{y:.3g}" for y in ys))


if __name__ == "__main__":
    main()

"""Mean cosine per policy and budget, read back from a fidelity run.

    python3 scripts/budget_sweep.py out/fidelity/fidelity.csv
"""
import argparse
import csv
from collections import defaultdict

import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", help="fidelity.csv written by `laprox fidelity`")
    args = ap.parse_args()

    cos = defaultdict(list)
    with open(args.csv) as f:
        for row in csv.DictReader(f):
            cos[row["policy"], int(row["budget"])].append(float(row["cosine"]))
    policies = sorted({p for p, _ in cos})
    budgets = sorted({b for _, b in cos})

    print("policy".ljust(14) + "".join(f"B={b:<10}" for b in budgets))
    for p in policies:
        cells = [f"{np.mean(cos[p, b]):<12.4f}" if (p, b) in cos else " " * 12 for b in budgets]
        print(p.ljust(14) + "".join(cells))


if __name__ == "__main__":
    main()

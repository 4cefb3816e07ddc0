"""Export the fidelity prior mean and a 95% band on a stretch grid.

Usage: python3 scripts/prior_fidelity_band.py OUT.csv [--max-stretch 1.2]
"""

import argparse

import numpy as np

from tendonfit.dataio import write_table
from tendonfit.fidelity import prior_mean, sample_prior


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--max-stretch", type=float, default=1.2)
    ap.add_argument("--points", type=int, default=81)
    ap.add_argument("--draws", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    lam = np.round(np.linspace(1.0, args.max_stretch, args.points), 12)
    gamma = sample_prior(lam, args.draws, seed=args.seed)
    lo, med, hi = np.quantile(gamma, [0.025, 0.5, 0.975], axis=0)
    write_table(args.out, {"stretch": lam, "gamma_at_mean": 1 / (1 + np.exp(-prior_mean(lam))),
                           "q025": lo, "median": med, "q975": hi})


if __name__ == "__main__":
    main()

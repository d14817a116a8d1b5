"""Worst rhs/lhs ratio of the matrix Kato inequality per matrix size and parameter t."""
import argparse
import csv

from monocap.cone import kato_search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="kato_sweep.csv")
    args = ap.parse_args()
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "t", "trials", "violations", "random_worst", "sharp_worst"])
        for n in range(2, 7):
            for t in (0.1, 1.0, 10.0):
                out = kato_search([n], args.trials, [t], seed=args.seed)
                w.writerow([n, t, out["trials"], out["violations"], out["randomWorstRatio"], out["sharpWorstRatio"]])
                print(f"n={n} t={t:<4g} violations={out['violations']} random worst={out['randomWorstRatio']:.4f} "
                      f"sharp worst={out['sharpWorstRatio']:.6f}")


if __name__ == "__main__":
    main()

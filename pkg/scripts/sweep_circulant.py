"""Recovery-error-vs-sparsity curve for the partial Gaussian circulant.

Reproduces the classic compressed-sensing phase transition shape: near-exact
recovery below the transition, saturation above it.

Usage: python scripts/sweep_circulant.py [--n 128] [--m 64] [--trials 20]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from csoptics import bench  # noqa: E402
from csoptics.linop import GaussianCirculantSpec, make_gaussian_circulant  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--m", type=int, default=64)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/sweep_circulant")
    args = ap.parse_args()

    G = make_gaussian_circulant(GaussianCirculantSpec(seed=args.seed,
                                                      n=args.n, m=args.m))
    ks = (5, 10, 20, 40, 60)
    config = bench.SweepConfig(system=None,
                               sparsities=tuple(k / args.n for k in ks),
                               trials=args.trials,
                               noise_fraction=args.noise,
                               object_kind="unphysical",
                               seed=args.seed, threads=4)
    report = bench.compare_report([(f"circulant_m{args.m}", G)], config,
                                  out_dir=args.out)
    print(f"wrote {report.csv_path}")
    for row in report.rows:
        se = row["std"] / max(args.trials, 1) ** 0.5
        print(f"  sparsity {row['sparsity']:.4f}  "
              f"rel RMSE {row['mean_rel_rmse']:.4f} +- {se:.4f} (SE)")


if __name__ == "__main__":
    main()

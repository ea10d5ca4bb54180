"""Train the 16x16 toy imaging system end to end and dump its artifacts.

Usage: python scripts/train_2d_toy.py [--iterations N] [--seed S] [--out DIR]
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from csoptics import train  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/train_2d_toy")
    ap.add_argument("--threads", type=int, default=4)
    args = ap.parse_args()

    config = train.TrainConfig(iterations=args.iterations, seed=args.seed,
                               out_dir=args.out, threads=args.threads,
                               val_every=25, checkpoint_every=50)
    print(f"training {config.grid_n}x{config.grid_n} geometry, "
          f"{config.iterations} iterations, out -> {args.out}")
    state = train.run(config)
    print(f"final alpha {state.alpha:.4g}, beta {state.beta:.4g}")
    for it, err in state.val_history:
        print(f"  iter {it:4d}  validation rel RMSE {err:.4f}")
    np.save(os.path.join(args.out, "loss_history.npy"),
            np.array(state.loss_history))


if __name__ == "__main__":
    main()

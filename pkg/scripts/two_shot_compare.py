"""Train an 8-depth two-state geometry, then compare the trained two-shot
system against its own single-shot reduction across the sparsity transition.

Usage: python scripts/two_shot_compare.py [--iterations 60] [--trials 20]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from csoptics import bench, train  # noqa: E402
from csoptics.imaging import assemble_system  # noqa: E402
from csoptics.optics import (MetasurfaceGeometry, compute_psf_stack,  # noqa: E402
                             inverse_spaced_depths)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=60)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--out", default="out/two_shot_compare")
    args = ap.parse_args()

    config = train.TrainConfig(grid_n=32, object_shape=(16, 16),
                               sensor_shape=(16, 16),
                               depths=inverse_spaced_depths(6e-6, 2e-5, 8),
                               n_states=2, sparsity=0.05, noise_fraction=0.02,
                               iterations=args.iterations, batch_size=6,
                               seed=args.seed, val_size=8, val_every=20,
                               threads=4)
    print(f"training two-state geometry, {config.iterations} iterations")
    state = train.run(config)

    surrogate = config.build_surrogate()
    geometry = MetasurfaceGeometry(state.theta, config.w_min, config.w_max)
    psfs = compute_psf_stack(geometry, surrogate, config.grid())
    system = assemble_system(psfs, config.object_dims(), config.sensor_shape)

    sweep = bench.SweepConfig(system=None,
                              sparsities=(0.02, 0.03, 0.045, 0.06, 0.09),
                              trials=args.trials, noise_fraction=0.02,
                              object_kind="physical", seed=11, threads=4)
    report = bench.compare_report([("two_shot", system)], sweep,
                                  out_dir=args.out, include_single_shot=True)
    print(f"wrote {report.csv_path}")
    two = report.results["two_shot"].mean_rel_rmse
    one = report.results["two_shot_single"].mean_rel_rmse
    for s, a, b in zip(sweep.sparsities, two, one):
        print(f"  sparsity {s:.3f}  two-shot {a:.4f}  single-shot {b:.4f}")


if __name__ == "__main__":
    main()

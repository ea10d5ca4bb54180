"""Command-line front end: psf / train / eval / sweep / gap / gradcheck.

Every subcommand takes --config (TOML, strictly validated) plus override
flags, writes its artifacts into --out, and embeds a config echo there so
outputs are self-describing. Exit codes: 0 success, 1 runtime failure,
2 bad configuration or usage; failures print machine-readable JSON to
stderr. Set CS_E2E_LOG=debug|info|warning for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import bench, train
from .config import RunConfig, load_config
from .errors import ConfigurationError, SchemaError, ValidationError
from .fista import LassoProblem, SolverOptions, solve
from .imaging import ImagingSystem, assemble_system, relative_error, render
from .linop import GaussianCirculantSpec, IdentityOperator, make_gaussian_circulant
from .optics import MetasurfaceGeometry, compute_psf_stack
from .util import derive_seed

log = logging.getLogger("csoptics")

_GAP_BASELINE_TAG = 71


def _setup_logging() -> None:
    level = os.environ.get("CS_E2E_LOG", "warning").lower()
    numeric = {"debug": logging.DEBUG, "info": logging.INFO,
               "warning": logging.WARNING, "error": logging.ERROR}
    logging.basicConfig(level=numeric.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_png16(path: str, array: np.ndarray) -> None:
    """16-bit grayscale heatmap, min-max scaled; visualization only."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    unit = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    # uint16 input makes Pillow pick the 16-bit grayscale mode I;16
    Image.fromarray((unit * 65535.0 + 0.5).astype(np.uint16)).save(path)


def _write_echo(cfg: RunConfig, out_dir: str, command: str) -> None:
    payload = {"command": command, "config": cfg.echo()}
    with open(os.path.join(out_dir, "config_echo.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _ensure_out(cfg: RunConfig, command: str) -> str | None:
    out = cfg.out_dir
    if out is not None:
        os.makedirs(out, exist_ok=True)
        _write_echo(cfg, out, command)
    return out


def _load_theta(cfg: RunConfig, tc: train.TrainConfig) -> np.ndarray:
    path = cfg.data["geometry"].get("theta")
    if path is None:
        return train.initial_theta(tc)
    theta = np.load(path)
    if theta.shape != (tc.grid_n, tc.grid_n):
        raise ConfigurationError(
            f"theta file {path} has shape {theta.shape}, grid wants "
            f"({tc.grid_n}, {tc.grid_n})")
    return theta


def _build_optics_system(cfg: RunConfig):
    tc = cfg.train_config()
    surrogate = tc.build_surrogate()
    theta = _load_theta(cfg, tc)
    geometry = MetasurfaceGeometry(theta, tc.w_min, tc.w_max)
    psfs = compute_psf_stack(geometry, surrogate, tc.grid())
    system = assemble_system(psfs, tc.object_dims(), tc.sensor_shape)
    return system, psfs, geometry, tc


def _build_system(cfg: RunConfig):
    """(system-or-operator, system_id) for the configured measurement."""
    kind = cfg.system_kind
    if kind == "optics":
        system, _, _, _ = _build_optics_system(cfg)
        return system, "optics"
    n = int(np.prod(cfg.object_dims()))
    if kind == "identity":
        return IdentityOperator(n), "identity"
    if kind == "circulant":
        m = cfg.data["system"].get("circulant_m")
        if m is None:
            raise ConfigurationError("system.circulant_m is required for "
                                     "kind = 'circulant'")
        spec = GaussianCirculantSpec(seed=cfg.seed, n=n, m=int(m))
        return make_gaussian_circulant(spec), "circulant"
    raise ConfigurationError(f"unknown system kind {kind!r}")


def _as_imaging_system(op) -> ImagingSystem:
    if isinstance(op, ImagingSystem):
        return op
    return ImagingSystem(G=op, object_shape=op.in_dims,
                         sensor_shape=op.out_dims, shots=1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_psf(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "psf")
    system, psfs, geometry, tc = _build_optics_system(cfg)
    sums = psfs.data.sum(axis=(2, 3))
    if out:
        np.save(os.path.join(out, "psf_stack.npy"), psfs.data)
        np.save(os.path.join(out, "widths.npy"), geometry.widths)
        for di in range(psfs.n_depths):
            for si in range(psfs.n_states):
                _write_png16(os.path.join(out, f"psf_d{di}_s{si}.png"),
                             psfs.data[di, si])
        _write_png16(os.path.join(out, "geometry_widths.png"), geometry.widths)
        with open(os.path.join(out, "psf_meta.json"), "w") as fh:
            json.dump({"depths": list(psfs.depths), "scale": psfs.scale,
                       "n_states": psfs.n_states,
                       "channel_sums": sums.tolist()}, fh, indent=2)
    print(f"psf: {psfs.n_depths} depths x {psfs.n_states} states on "
          f"{tc.grid_n}x{tc.grid_n}; reference channel sum "
          f"{sums[0, 0]:.12f}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "train")
    tc = cfg.train_config()
    state = train.run(tc)
    summary = {
        "iterations": state.iteration,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "alpha": state.alpha,
        "beta": state.beta,
        "val_history": [[int(i), float(v)] for i, v in state.val_history],
    }
    if out:
        with open(os.path.join(out, "train_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    val = f", validation {state.val_history[-1][1]:.4f}" if state.val_history else ""
    print(f"train: {state.iteration} iterations, alpha {state.alpha:.4g}, "
          f"beta {state.beta:.4g}{val}")


def cmd_eval(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "eval")
    u = np.load(args.object).ravel()
    system, system_id = _build_system(cfg)
    op = system.G if isinstance(system, ImagingSystem) else system
    if u.size != op.in_size:
        raise ValidationError(
            f"object file has {u.size} values, system takes {op.in_size}")

    if args.estimate is not None:
        u_est = np.load(args.estimate).ravel()
        result = {"mode": "score", "alpha": None, "beta": None}
    else:
        img = render(_as_imaging_system(op), u,
                     cfg.data["noise"]["fraction"], cfg.seed)
        alpha = cfg.data["train"].get("alpha_init")
        if alpha is None:
            # same half-thresholding heuristic the trainer calibrates with
            alpha = float(np.median(np.abs(2.0 * op.adjoint(img.y))))
        beta = cfg.data["train"].get("beta_init") or 0.0
        opts = SolverOptions(max_iters=cfg.data["solver"]["max_iters"],
                             tol=cfg.data["solver"]["tol"])
        solution = solve(LassoProblem(G=op, y=img.y, alpha=float(alpha),
                                      beta=float(beta)), opts)
        u_est = solution.u_est
        result = {"mode": "solve", "alpha": float(alpha), "beta": float(beta),
                  "converged": solution.converged,
                  "iterations": solution.iterations,
                  "sigma": img.sigma}
        if out:
            np.save(os.path.join(out, "y.npy"), img.y)
    rmse = relative_error(u, u_est)
    result.update({"system": system_id, "rel_rmse": rmse})
    if out:
        np.save(os.path.join(out, "u_est.npy"), u_est)
        with open(os.path.join(out, "eval.json"), "w") as fh:
            json.dump(result, fh, indent=2)
    print(f"eval: relative RMSE {rmse:.6e} ({system_id}, {result['mode']})")


def _sweep_config(cfg: RunConfig, system, system_id: str) -> bench.SweepConfig:
    d = cfg.data
    return bench.SweepConfig(system=system,
                             sparsities=tuple(d["sweep"]["sparsities"]),
                             trials=d["sweep"]["trials"],
                             noise_fraction=d["noise"]["fraction"],
                             object_kind=d["object"]["kind"],
                             value_range=tuple(d["object"]["value_range"]),
                             seed=cfg.seed,
                             system_id=system_id,
                             alpha_search_iters=d["sweep"]["alpha_search_iters"],
                             solver_tol=d["solver"]["tol"],
                             solver_max_iters=d["solver"]["max_iters"],
                             threads=cfg.threads)


def cmd_sweep(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "sweep")
    system, system_id = _build_system(cfg)
    sweep_cfg = _sweep_config(cfg, None, system_id)
    report = bench.compare_report(
        [(system_id, system)], sweep_cfg, out_dir=out,
        include_single_shot=cfg.data["sweep"]["single_shot"])
    for row in report.rows:
        print(f"sweep: {row['system_id']} sparsity {row['sparsity']:.3f} "
              f"rmse {row['mean_rel_rmse']:.4f} +- {row['std']:.4f} "
              f"(alpha {row['alpha']:.3e})")


def cmd_gap(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "gap")
    system, system_id = _build_system(cfg)
    op = system.G if isinstance(system, ImagingSystem) else system
    baseline = make_gaussian_circulant(GaussianCirculantSpec(
        seed=derive_seed(cfg.seed, _GAP_BASELINE_TAG),
        n=op.in_size, m=op.out_size))
    sparsity = cfg.data["object"]["sparsity"]
    value_range = tuple(cfg.data["object"]["value_range"])
    phys = bench.ObjectDistribution(sparsity, "physical", value_range)
    unphys = bench.ObjectDistribution(sparsity, "unphysical", value_range)
    report = bench.image_mean_gap(op, baseline, phys, unphys,
                                  trials=cfg.data["sweep"]["trials"],
                                  seed=cfg.seed)
    payload = {
        "system": system_id,
        "gap": report.gap,
        "g_phys_mean": report.g_phys_mean,
        "g_unphys_mean": report.g_unphys_mean,
        "x_phys_mean": report.x_phys_mean,
        "x_unphys_mean": report.x_unphys_mean,
        "sparsity": sparsity,
        "trials": report.trials,
        "seed": report.seed,
    }
    if out:
        with open(os.path.join(out, "gap.json"), "w") as fh:
            json.dump(payload, fh, indent=2)
    print(f"gap: {report.gap:.6f} ({system_id}, {report.trials} trials)")


def cmd_gradcheck(cfg: RunConfig, args) -> None:
    out = _ensure_out(cfg, "gradcheck")
    tc = cfg.train_config()
    report = train.finite_diff_audit(tc, n_params=args.n_params,
                                     step=args.step)
    if out:
        with open(os.path.join(out, "gradcheck_report.csv"), "w",
                  newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "name", "analytic", "fd", "rel_error", "support_flipped"])
            writer.writeheader()
            writer.writerows(report.rows())
        with open(os.path.join(out, "gradcheck.json"), "w") as fh:
            json.dump({"pass_fraction": report.pass_fraction(),
                       "flip_count": report.flip_count,
                       "step": report.step,
                       "n_records": len(report.records)}, fh, indent=2)
    print(f"gradcheck: pass fraction {report.pass_fraction():.3f}, "
          f"{report.flip_count} support flips at step {report.step:g}")


_HANDLERS = {
    "psf": cmd_psf,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gap": cmd_gap,
    "gradcheck": cmd_gradcheck,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csoptics",
        description="Differentiable compressed-sensing imaging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override top-level seed")
        sp.add_argument("--threads", type=int,
                        help="worker threads; 1 is bitwise-deterministic")
        sp.add_argument("--alpha", type=float, help="l1 weight override")
        sp.add_argument("--beta", type=float, help="ridge weight override")
        sp.add_argument("--sparsity", type=float,
                        help="object sparsity override")
        sp.add_argument("--noise", type=float,
                        help="noise fraction override")

    common(sub.add_parser("psf", help="compute and dump the PSF stack"))
    common(sub.add_parser("train", help="run the design loop"))
    p_eval = sub.add_parser("eval", help="image and reconstruct one object")
    common(p_eval)
    p_eval.add_argument("--object", required=True,
                        help=".npy object to image")
    p_eval.add_argument("--estimate",
                        help=".npy estimate to score instead of solving")
    common(sub.add_parser("sweep", help="error-vs-sparsity sweep"))
    common(sub.add_parser("gap", help="image-mean-gap metric"))
    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p_gc)
    p_gc.add_argument("--n-params", type=int, default=8,
                      help="theta coordinates to audit")
    p_gc.add_argument("--step", type=float, default=1e-4,
                      help="central-difference step")
    return parser


def _error_json(kind: str, **fields) -> None:
    print(json.dumps({"error": kind, **fields}), file=sys.stderr)


def dispatch(argv) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    _setup_logging()
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        else:
            cfg = RunConfig.default()
    except SchemaError as exc:
        _error_json("schema", diagnostics=exc.diagnostics)
        return 2
    except FileNotFoundError as exc:
        _error_json("config", message=str(exc))
        return 2
    except Exception as exc:  # malformed TOML and friends
        _error_json("config", message=f"{type(exc).__name__}: {exc}")
        return 2
    cfg.apply_overrides(seed=args.seed, out=args.out, threads=args.threads,
                        alpha=args.alpha, beta=args.beta,
                        sparsity=args.sparsity, noise=args.noise)
    try:
        _HANDLERS[args.command](cfg, args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        _error_json(type(exc).__name__, message=str(exc))
        return 1
    return 0


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())

"""Benchmark harness: error-vs-sparsity sweeps with per-point alpha tuning,
the image-mean-gap metric, and aligned multi-system comparison reports.

Every sweep trial is sample -> render -> solve at beta = 0; alpha is picked
per sparsity point by a golden-section search on a held-out trial, so each
system gets its best case and comparisons stay fair.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .fista import LassoProblem, SolverOptions, solve
from .imaging import ImagingSystem, relative_error, render, sample_object
from .linop import ConvMeasurement, ConvMeasurementSpec, LinearOperator, operator_norm
from .util import derive_seed, run_tasks

_HELD_TAG = 31
_TRIAL_TAG = 37
_GAP_TAG = 41

_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ObjectDistribution:
    """Sparsity plus value model for Monte-Carlo object draws."""

    sparsity: float
    kind: str
    value_range: tuple = (0.8, 1.2)


@dataclass
class SweepConfig:
    system: object = None        # ImagingSystem or bare LinearOperator
    sparsities: tuple = (0.05,)
    trials: int = 20
    noise_fraction: float = 0.05
    object_kind: str = "unphysical"
    value_range: tuple = (0.8, 1.2)
    seed: int = 0
    system_id: str = "system"
    alpha_search_iters: int = 25
    solver_tol: float = 1e-7
    solver_max_iters: int = 20000
    threads: int = 1

    def __post_init__(self):
        self.sparsities = tuple(float(s) for s in self.sparsities)
        if not self.sparsities:
            raise ConfigurationError("need at least one sparsity")
        for s in self.sparsities:
            if not 0.0 < s <= 1.0:
                raise ConfigurationError(f"sparsity {s} outside (0, 1]")
        if any(b <= a for a, b in zip(self.sparsities, self.sparsities[1:])):
            raise ConfigurationError("sparsities must be strictly increasing")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if self.noise_fraction < 0:
            raise ConfigurationError("noise_fraction must be >= 0")


@dataclass
class SweepResult:
    system_id: str
    sparsities: tuple
    mean_rel_rmse: list
    std_rel_rmse: list          # sample std (ddof=1); SE = std / sqrt(trials)
    alphas: list
    failures: list              # non-converged solve count per point
    trials: int
    seed: int
    noise_fraction: float
    object_kind: str

    def rows(self) -> list:
        return [{
            "sparsity": s,
            "system_id": self.system_id,
            "mean_rel_rmse": self.mean_rel_rmse[i],
            "std": self.std_rel_rmse[i],
            "trials": self.trials,
            "alpha": self.alphas[i],
        } for i, s in enumerate(self.sparsities)]


@dataclass
class GapReport:
    gap: float
    g_phys_mean: float
    g_unphys_mean: float
    x_phys_mean: float
    x_unphys_mean: float
    phys: ObjectDistribution
    unphys: ObjectDistribution
    trials: int
    seed: int


def _resolve(system):
    """(operator, object dims) for either an ImagingSystem or a bare operator."""
    if system is None:
        raise ConfigurationError("sweep config has no system under test")
    if isinstance(system, ImagingSystem):
        return system.G, system.object_shape
    if isinstance(system, LinearOperator):
        return system, system.in_dims
    raise ConfigurationError(f"unsupported system type {type(system).__name__}")


def _as_render_target(G):
    # render() only touches .G; wrap bare operators in the metadata shell
    return ImagingSystem(G=G, object_shape=G.in_dims, sensor_shape=G.out_dims,
                         shots=1)


def _golden_min(f, lo: float, hi: float, iters: int):
    """Golden-section minimization on [lo, hi]; returns (x_best, f_best)
    over all evaluated points."""
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    best = (c, fc) if fc <= fd else (d, fd)
    for _ in range(iters):
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _INV_PHI * (hi - lo)
            fc = f(c)
            if fc < best[1]:
                best = (c, fc)
        else:
            lo, c, fc = c, d, fd
            d = lo + _INV_PHI * (hi - lo)
            fd = f(d)
            if fd < best[1]:
                best = (d, fd)
    return best


def select_alpha(G, dims, sparsity: float, config: SweepConfig,
                 held_seed: int, opts: SolverOptions) -> float:
    """Best l1 weight for one held-out trial, by golden-section search on
    log alpha over [1e-6 * alpha_max, alpha_max]."""
    sample = sample_object(dims, sparsity, config.object_kind, held_seed,
                           config.value_range)
    img = render(_as_render_target(G), sample.u, config.noise_fraction,
                 held_seed)
    alpha_max = 2.0 * float(np.abs(G.adjoint(img.y)).max())
    if not alpha_max > 0:
        raise ValidationError("held-out measurement is identically zero")
    warm = {"u": None}

    def objective(log_alpha):
        problem = LassoProblem(G=G, y=img.y, alpha=float(np.exp(log_alpha)),
                               beta=0.0)
        solution = solve(problem, opts, warm_start=warm["u"])
        warm["u"] = solution.u_est
        return relative_error(sample.u, solution.u_est)

    la, _ = _golden_min(objective, float(np.log(1e-6 * alpha_max)),
                        float(np.log(alpha_max)), config.alpha_search_iters)
    return float(np.exp(la))


def sparsity_sweep(config: SweepConfig) -> SweepResult:
    """Mean/std relative RMSE per sparsity over fresh trials, at the alpha the
    held-out search picked for that point. Non-converged solves still score
    (their iterate is what a user would get) but are counted as failures."""
    G, dims = _resolve(config.system)
    lip = 2.0 * operator_norm(G, seed=0)
    opts = SolverOptions(max_iters=config.solver_max_iters,
                         tol=config.solver_tol, lipschitz=lip)
    target = _as_render_target(G)

    means, stds, alphas, failures = [], [], [], []
    for pi, sparsity in enumerate(config.sparsities):
        held = derive_seed(config.seed, _HELD_TAG, pi)
        alpha = select_alpha(G, dims, sparsity, config, held, opts)

        def trial(seed):
            sample = sample_object(dims, sparsity, config.object_kind, seed,
                                   config.value_range)
            img = render(target, sample.u, config.noise_fraction, seed)
            solution = solve(LassoProblem(G=G, y=img.y, alpha=alpha, beta=0.0),
                             opts)
            return (relative_error(sample.u, solution.u_est),
                    0 if solution.converged else 1)

        seeds = [derive_seed(config.seed, _TRIAL_TAG, pi, t)
                 for t in range(config.trials)]
        outcomes = run_tasks(trial, seeds, config.threads)
        errors = np.array([e for e, _ in outcomes])
        means.append(float(errors.mean()))
        stds.append(float(errors.std(ddof=1)) if len(errors) > 1 else 0.0)
        alphas.append(alpha)
        failures.append(int(sum(f for _, f in outcomes)))
    return SweepResult(system_id=config.system_id,
                       sparsities=config.sparsities,
                       mean_rel_rmse=means, std_rel_rmse=stds, alphas=alphas,
                       failures=failures, trials=config.trials,
                       seed=config.seed,
                       noise_fraction=config.noise_fraction,
                       object_kind=config.object_kind)


def image_mean_gap(G: LinearOperator, gaussian_baseline: LinearOperator,
                   phys_dist: ObjectDistribution,
                   unphys_dist: ObjectDistribution,
                   trials: int = 100, seed: int = 0) -> GapReport:
    """(<|Gu|_1>_phys / <|Gu|_1>_unphys) * (<|Xu|_1>_unphys / <|Xu|_1>_phys).

    The four averages share one seed sequence, so a physical/unphysical pair
    differs only in its sign draws and G = X cancels exactly.
    """
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    if G.in_size != gaussian_baseline.in_size:
        raise ConfigurationError(
            f"G takes {G.in_size} values, baseline takes "
            f"{gaussian_baseline.in_size}")
    dims = G.in_dims
    g_phys = g_unphys = x_phys = x_unphys = 0.0
    for t in range(trials):
        s = derive_seed(seed, _GAP_TAG, t)
        u_p = sample_object(dims, phys_dist.sparsity, phys_dist.kind, s,
                            phys_dist.value_range).u
        u_n = sample_object(dims, unphys_dist.sparsity, unphys_dist.kind, s,
                            unphys_dist.value_range).u
        g_phys += float(np.abs(G.forward(u_p)).sum())
        g_unphys += float(np.abs(G.forward(u_n)).sum())
        x_phys += float(np.abs(gaussian_baseline.forward(u_p)).sum())
        x_unphys += float(np.abs(gaussian_baseline.forward(u_n)).sum())
    g_phys, g_unphys = g_phys / trials, g_unphys / trials
    x_phys, x_unphys = x_phys / trials, x_unphys / trials
    if g_unphys == 0.0 or x_phys == 0.0:
        raise ValidationError("gap denominator is zero")
    gap = (g_phys * x_unphys) / (g_unphys * x_phys)
    assert gap > 0
    return GapReport(gap=gap, g_phys_mean=g_phys, g_unphys_mean=g_unphys,
                     x_phys_mean=x_phys, x_unphys_mean=x_unphys,
                     phys=phys_dist, unphys=unphys_dist, trials=trials,
                     seed=seed)


def single_shot_system(system: ImagingSystem, state: int = 0) -> ImagingSystem:
    """Drop every material state's rows except one."""
    if not isinstance(system.G, ConvMeasurement):
        raise ConfigurationError("single-shot reduction needs a PSF system")
    stack = system.G.spec.psf_stack
    if not 0 <= state < stack.shape[0]:
        raise ConfigurationError(f"state {state} outside 0..{stack.shape[0]-1}")
    spec = ConvMeasurementSpec(psf_stack=stack[state:state + 1],
                               object_shape=system.object_shape,
                               sensor_shape=system.sensor_shape)
    return ImagingSystem(G=ConvMeasurement(spec),
                         object_shape=system.object_shape,
                         sensor_shape=system.sensor_shape, shots=1)


@dataclass
class CompareReport:
    rows: list
    results: dict               # system_id -> SweepResult
    summary: dict
    csv_path: str | None = None
    json_path: str | None = None


_CSV_COLUMNS = ["sparsity", "system_id", "mean_rel_rmse", "std", "trials",
                "alpha"]


def _config_echo(config: SweepConfig, system_ids: list) -> dict:
    echo = {k: v for k, v in dataclasses.asdict(config).items()
            if k not in ("system", "system_id")}
    echo["systems"] = list(system_ids)
    return echo


def compare_report(systems, config: SweepConfig, out_dir: str | None = None,
                   include_single_shot: bool = False) -> CompareReport:
    """Run the same sweep over several systems and align the results.

    `systems` is a sequence of (system_id, system) pairs sharing object
    dims. With include_single_shot, each multi-shot PSF system also gets a
    reduced single-state entry (id suffix "_single"). Matched seeds mean
    trial t sees the same object through every system.
    """
    items = [(str(sid), sys_) for sid, sys_ in systems]
    if not items:
        raise ConfigurationError("no systems to compare")
    if include_single_shot:
        for sid, sys_ in list(items):
            if isinstance(sys_, ImagingSystem) and sys_.shots > 1:
                items.append((f"{sid}_single", single_shot_system(sys_)))
    sizes = {int(_resolve(s)[0].in_size) for _, s in items}
    if len(sizes) != 1:
        raise ConfigurationError(f"systems disagree on object size: {sizes}")

    results = {}
    rows = []
    for sid, sys_ in items:
        res = sparsity_sweep(dataclasses.replace(config, system=sys_,
                                                 system_id=sid))
        results[sid] = res
        rows.extend(res.rows())

    echo = _config_echo(config, [sid for sid, _ in items])
    digest = hashlib.sha256(
        json.dumps(echo, sort_keys=True).encode()).hexdigest()
    summary = {
        "config": echo,
        "input_hash": digest,
        "results": {sid: {
            "sparsities": list(res.sparsities),
            "mean_rel_rmse": res.mean_rel_rmse,
            "std": res.std_rel_rmse,
            "alphas": res.alphas,
            "failures": res.failures,
        } for sid, res in results.items()},
    }

    csv_path = json_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "compare.csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        json_path = os.path.join(out_dir, "summary.json")
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2)
    return CompareReport(rows=rows, results=results, summary=summary,
                         csv_path=csv_path, json_path=json_path)

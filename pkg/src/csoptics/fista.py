"""Matrix-free FISTA for the L1 + ridge reconstruction problem.

Minimizes  ||G x - y||_2^2 + alpha ||x||_1 + beta ||x||_2^2  with the ridge
term folded into the smooth part, so the prox step stays an exact
soft-threshold. One forward and one adjoint apply per iteration: G of the
momentum point is a linear combination of stored G x values, and the
objective comes along for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedRegularizerError, ValidationError
from .linop import LinearOperator, operator_norm
from .util import write_jsonl

_TINY = 1e-30


@dataclass
class LassoProblem:
    G: LinearOperator
    y: np.ndarray
    alpha: float
    beta: float = 0.0
    psi_kind: str = "identity"  # solver accepts identity only; tv reserved

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be >= 0")
        if self.y.size != self.G.out_size:
            raise ValidationError(
                f"y has length {self.y.size}, operator output is {self.G.out_size}")


@dataclass
class SolverOptions:
    max_iters: int = 20000
    tol: float = 1e-7           # relative iterate change
    check_every: int = 1        # cadence of trace records
    restart: bool = True        # monotone restart on objective increase
    lipschitz: float | None = None  # override for the gradient Lipschitz bound of ||Gx-y||^2
    power_iters: int = 50
    record_objective: bool = False
    trace_path: str | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValidationError("tol must be > 0")


@dataclass
class LassoSolution:
    u_est: np.ndarray
    iterations: int
    converged: bool
    final_objective: float
    step_size: float
    objective_trace: np.ndarray | None = None


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    """Elementwise sign(v) * max(|v| - t, 0)."""
    if t < 0:
        raise ValidationError("threshold must be >= 0")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def objective(problem: LassoProblem, x: np.ndarray, gx: np.ndarray | None = None) -> float:
    if gx is None:
        gx = problem.G.forward(x)
    r = gx - problem.y
    return float(r @ r + problem.alpha * np.abs(x).sum() + problem.beta * (x @ x))


def solve(problem: LassoProblem, opts: SolverOptions | None = None,
          warm_start: np.ndarray | None = None) -> LassoSolution:
    """Run FISTA with monotone restart.

    Step size is 1 / (L_G + 2 beta) where L_G bounds the gradient Lipschitz
    constant of ||Gx - y||^2, i.e. 2 ||G||_2^2, estimated by power iteration
    (with its built-in safety factor) unless opts.lipschitz overrides it.
    """
    if opts is None:
        opts = SolverOptions()
    if problem.psi_kind != "identity":
        raise UnsupportedRegularizerError(
            f"solver supports psi_kind='identity' only, got {problem.psi_kind!r}")
    if not np.all(np.isfinite(problem.y)):
        raise ValidationError("y contains non-finite values")

    G, y, alpha, beta = problem.G, problem.y, problem.alpha, problem.beta
    if opts.lipschitz is not None:
        lip_g = float(opts.lipschitz)
    else:
        lip_g = 2.0 * operator_norm(G, iters=opts.power_iters, seed=0)
    denom = lip_g + 2.0 * beta
    if denom <= 0.0:
        raise ValidationError("zero curvature: operator and beta are both zero")
    h = 1.0 / denom

    if warm_start is not None:
        x = np.asarray(warm_start, dtype=np.float64).ravel().copy()
        if x.size != G.in_size:
            raise ValidationError("warm start has wrong length")
    else:
        x = np.zeros(G.in_size)
    gx = G.forward(x)
    obj = objective(problem, x, gx)
    z, gz = x, gx
    t = 1.0
    trace = [] if (opts.record_objective or opts.trace_path) else None

    iterations = 0
    converged = False
    for k in range(1, opts.max_iters + 1):
        iterations = k
        grad = 2.0 * G.adjoint(gz - y) + 2.0 * beta * z
        x_new = soft_threshold(z - h * grad, h * alpha)
        gx_new = G.forward(x_new)
        obj_new = objective(problem, x_new, gx_new)
        if opts.restart and obj_new > obj:
            # momentum overshoot: drop back to a plain proximal-gradient step
            # from x, which cannot increase the objective at this step size
            grad = 2.0 * G.adjoint(gx - y) + 2.0 * beta * x
            x_new = soft_threshold(x - h * grad, h * alpha)
            gx_new = G.forward(x_new)
            obj_new = objective(problem, x_new, gx_new)
            t = 1.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        gamma = (t - 1.0) / t_new
        z = x_new + gamma * (x_new - x)
        gz = (1.0 + gamma) * gx_new - gamma * gx
        rel_change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), _TINY)
        if trace is not None and (k % opts.check_every == 0 or k == opts.max_iters):
            trace.append((k, obj_new, rel_change))
        x, gx, obj, t = x_new, gx_new, obj_new, t_new
        if rel_change <= opts.tol:
            converged = True
            break

    if opts.trace_path:
        write_jsonl(opts.trace_path,
                    ({"iter": int(k), "objective": o, "rel_change": rc}
                     for k, o, rc in trace))
    obj_arr = np.array([o for _, o, _ in trace]) if trace is not None else None
    return LassoSolution(u_est=x, iterations=iterations, converged=converged,
                         final_objective=obj, step_size=h, objective_trace=obj_arr)


def kkt_residual(problem: LassoProblem, x: np.ndarray) -> tuple[float, float]:
    """Optimality residuals of x for the identity-regularized problem.

    With g = 2 G'(Gx - y) + 2 beta x:
    interior_max = max over the support of |g_j + alpha sign(x_j)|,
    exterior_max = max off the support of max(|g_j| - alpha, 0).
    """
    if problem.psi_kind != "identity":
        raise UnsupportedRegularizerError("kkt_residual supports identity regularization only")
    x = np.asarray(x, dtype=np.float64).ravel()
    g = 2.0 * problem.G.adjoint(problem.G.forward(x) - problem.y) + 2.0 * problem.beta * x
    on = x != 0
    interior = float(np.max(np.abs(g[on] + problem.alpha * np.sign(x[on])))) if on.any() else 0.0
    off = ~on
    exterior = float(np.max(np.maximum(np.abs(g[off]) - problem.alpha, 0.0))) if off.any() else 0.0
    return interior, exterior

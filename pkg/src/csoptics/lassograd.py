"""Sensitivity analysis of a converged sparse reconstruction.

On a fixed support the reconstruction solves a smooth quadratic, so its
derivatives with respect to the measurement operator, the l1 and l2 weights,
and the data follow from one linear-system adjoint solve:

    (P_S G' G P_S' + beta I) z = P_S G' y - (alpha/2) P_S Psi' s

where P_S projects onto the support subspace of Psi u. The same operator,
being symmetric, serves the adjoint solve for lambda. Where the support
changes these are subgradients; callers treat them as descent directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (CgConvergenceError, ConfigurationError, NotConvergedError,
                     UnsupportedRegularizerError, ValidationError)
from .fista import LassoProblem, LassoSolution
from .linop import IdentityOperator, LinearOperator, TvGradient


@dataclass
class SupportData:
    indices: np.ndarray   # strictly increasing positions in Psi u
    signs: np.ndarray     # sign of (Psi u) on those positions, in {-1, +1}
    psi_kind: str

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp).ravel()
        self.signs = np.asarray(self.signs, dtype=np.float64).ravel()
        if self.indices.size != self.signs.size:
            raise ValidationError("indices and signs must have equal length")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValidationError("support indices must be strictly increasing")
        if self.signs.size and not np.all(np.abs(self.signs) == 1.0):
            raise ValidationError("signs must be -1 or +1")


@dataclass
class AdjointResult:
    grad_psf: np.ndarray | None
    grad_alpha: float
    grad_beta: float
    grad_y: np.ndarray
    cg_iterations: int
    cg_residual: float


def extract_support(u_est: np.ndarray, psi: LinearOperator | None = None,
                    rel_threshold: float = 1e-6) -> SupportData:
    """Support of Psi u_est read off with a relative magnitude threshold.

    scale-invariant: entries above rel_threshold * max|Psi u| count as nonzero
    """
    if not 0.0 < rel_threshold < 1.0:
        raise ValidationError("rel_threshold must lie in (0, 1)")
    u_est = np.asarray(u_est, dtype=np.float64).ravel()
    if psi is None or isinstance(psi, IdentityOperator):
        w = u_est
        kind = "identity"
    elif isinstance(psi, TvGradient):
        w = psi.forward(u_est)
        kind = "tv"
    else:
        raise UnsupportedRegularizerError(f"unsupported regularization operator {type(psi).__name__}")
    peak = np.abs(w).max() if w.size else 0.0
    if peak == 0.0:
        return SupportData(np.empty(0, dtype=np.intp), np.empty(0), kind)
    idx = np.flatnonzero(np.abs(w) > rel_threshold * peak)
    return SupportData(idx, np.sign(w[idx]), kind)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


class SupportProjector:
    """Matrix-free P_S with apply (full -> reduced) and adjoint (reduced -> full).

    l1: restriction to the support indices.
    tv: pixels joined by zero-difference edges (periodic wraparound included)
    form regions; reduced coordinate r is the region sum over sqrt(region size).
    """

    def __init__(self, psi_kind: str, shape: tuple[int, ...],
                 indices: np.ndarray | None = None,
                 labels: np.ndarray | None = None,
                 region_sizes: np.ndarray | None = None):
        self.psi_kind = psi_kind
        self.shape = shape
        self.n = int(np.prod(shape))
        if psi_kind == "l1":
            self.indices = indices
            self.rank = int(indices.size)
        elif psi_kind == "tv":
            self.labels = labels
            self.region_sizes = region_sizes
            self._scale = np.sqrt(region_sizes.astype(np.float64))
            self.rank = int(region_sizes.size)
        else:
            raise UnsupportedRegularizerError(f"unknown projector kind {psi_kind!r}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.n:
            raise ValidationError(f"expected length {self.n}, got {x.size}")
        if self.psi_kind == "l1":
            return x[self.indices]
        sums = np.bincount(self.labels, weights=x, minlength=self.rank)
        return sums / self._scale

    def adjoint(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64).ravel()
        if lam.size != self.rank:
            raise ValidationError(f"expected length {self.rank}, got {lam.size}")
        if self.psi_kind == "l1":
            out = np.zeros(self.n)
            out[self.indices] = lam
            return out
        return (lam / self._scale)[self.labels]

    def full(self, x: np.ndarray) -> np.ndarray:
        """P x with P = P_S' P_S (orthogonal projector on the full space)."""
        return self.adjoint(self.apply(x))


def build_projector(sd: SupportData, dims) -> SupportProjector:
    shape = (int(dims),) if np.isscalar(dims) else tuple(int(d) for d in dims)
    n = int(np.prod(shape))
    if sd.psi_kind == "identity":
        if sd.indices.size and sd.indices[-1] >= n:
            raise ConfigurationError("support index out of range")
        return SupportProjector("l1", shape, indices=sd.indices)
    if sd.psi_kind != "tv":
        raise UnsupportedRegularizerError(f"unknown psi_kind {sd.psi_kind!r}")

    ndim = len(shape)
    nedges = ndim * n
    if sd.indices.size and sd.indices[-1] >= nedges:
        raise ConfigurationError("edge index out of range")
    nonzero = np.zeros(nedges, dtype=bool)
    nonzero[sd.indices] = True
    flat = np.arange(n).reshape(shape)
    uf = _UnionFind(n)
    # edge blocks stacked last axis first, matching the tv gradient operator
    for block, ax in enumerate(reversed(range(ndim))):
        nbr = np.roll(flat, -1, axis=ax).ravel()
        zero_edges = np.flatnonzero(~nonzero[block * n:(block + 1) * n])
        for q in zero_edges:
            uf.union(int(q), int(nbr[q]))
    roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.intp, count=n)
    uniq, labels = np.unique(roots, return_inverse=True)
    sizes = np.bincount(labels, minlength=uniq.size)
    return SupportProjector("tv", shape, labels=labels, region_sizes=sizes)


def _kkt_operator(G: LinearOperator, beta: float, proj: SupportProjector):
    def apply_a(v):
        full = proj.adjoint(v)
        return proj.apply(G.adjoint(G.forward(full))) + beta * v
    return apply_a


def solve_kkt_adjoint(G: LinearOperator, beta: float, proj: SupportProjector,
                      rhs: np.ndarray, tol: float = 1e-10,
                      max_iters: int | None = None) -> tuple[np.ndarray, int, float]:
    """Conjugate-gradient solve of (P_S G'G P_S' + beta I) lam = rhs.

    Returns (lam, iterations, residual_norm). Raises CgConvergenceError when
    the relative residual does not reach tol within max_iters.
    """
    rhs = np.asarray(rhs, dtype=np.float64).ravel()
    if rhs.size != proj.rank:
        raise ValidationError(f"rhs length {rhs.size} != projector rank {proj.rank}")
    if not np.all(np.isfinite(rhs)):
        raise ValidationError("rhs contains non-finite values")
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0 or proj.rank == 0:
        return np.zeros(proj.rank), 0, 0.0
    if max_iters is None:
        max_iters = 10 * proj.rank
    apply_a = _kkt_operator(G, beta, proj)
    x = np.zeros(proj.rank)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    res = bnorm
    for k in range(1, max_iters + 1):
        ap = apply_a(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            raise CgConvergenceError(
                f"KKT operator lost positive definiteness (p'Ap = {denom:.3e})",
                residual=res / bnorm)
        step = rs / denom
        x += step * p
        r -= step * ap
        res = float(np.linalg.norm(r))
        if res <= tol * bnorm:
            return x, k, res
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise CgConvergenceError(
        f"CG did not reach tol {tol:g} in {max_iters} iterations "
        f"(relative residual {res / bnorm:.3e})", residual=res / bnorm)


def lasso_vjp(problem: LassoProblem, solution: LassoSolution,
              dL_duest: np.ndarray, tol: float = 1e-10,
              rel_threshold: float = 1e-6) -> AdjointResult:
    """Backpropagate a loss cotangent through the argmin of the reconstruction.

    Gradient with respect to the measurement operator is delivered through its
    parameter VJP when it has one (convolutional operators expose psf_vjp);
    otherwise grad_psf is None. The caller owns the extra term that arises
    when y itself was rendered through the same operator.
    """
    if problem.psi_kind != "identity":
        raise UnsupportedRegularizerError("lasso_vjp supports psi_kind='identity' only")
    if not solution.converged:
        raise NotConvergedError("refusing gradients of a non-converged solution")
    dL_duest = np.asarray(dL_duest, dtype=np.float64).ravel()
    if dL_duest.size != problem.G.in_size:
        raise ValidationError("cotangent length does not match object length")

    G = problem.G
    u = solution.u_est
    has_psf = hasattr(G, "psf_vjp")
    sd = extract_support(u, None, rel_threshold)
    if sd.indices.size == 0:
        grad_psf = np.zeros_like(G.spec.psf_stack) if has_psf else None
        return AdjointResult(grad_psf=grad_psf, grad_alpha=0.0, grad_beta=0.0,
                             grad_y=np.zeros(G.out_size), cg_iterations=0,
                             cg_residual=0.0)

    proj = build_projector(sd, (G.in_size,))
    rhs = proj.apply(dL_duest)
    lam, iters, res = solve_kkt_adjoint(G, problem.beta, proj, rhs, tol=tol)
    lam_full = proj.adjoint(lam)

    grad_alpha = -0.5 * float(lam_full[sd.indices] @ sd.signs)
    grad_beta = -float(lam_full @ u)
    g_lam = G.forward(lam_full)
    residual = problem.y - G.forward(u)
    grad_psf = None
    if has_psf:
        grad_psf = G.psf_vjp(lam_full, residual) + G.psf_vjp(u, -g_lam)
    return AdjointResult(grad_psf=grad_psf, grad_alpha=grad_alpha,
                         grad_beta=grad_beta, grad_y=g_lam,
                         cg_iterations=iters, cg_residual=res)


def kkt_system_residual(problem: LassoProblem, solution: LassoSolution,
                        rel_threshold: float = 1e-6) -> float:
    """Relative residual ||A z - b|| / ||b|| of the support-restricted
    optimality system at the converged solution, z = P_S u_est.

    Independent consistency check between the iterative solver and the
    linear system the sensitivities are built on.
    """
    if problem.psi_kind != "identity":
        raise UnsupportedRegularizerError("identity regularization only")
    u = solution.u_est
    sd = extract_support(u, None, rel_threshold)
    if sd.indices.size == 0:
        return 0.0
    proj = build_projector(sd, (problem.G.in_size,))
    apply_a = _kkt_operator(problem.G, problem.beta, proj)
    z = proj.apply(u)
    s_full = np.zeros(problem.G.in_size)
    s_full[sd.indices] = sd.signs
    b = proj.apply(problem.G.adjoint(problem.y)) - 0.5 * problem.alpha * proj.apply(s_full)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return float(np.linalg.norm(apply_a(z)))
    return float(np.linalg.norm(apply_a(z) - b) / bnorm)

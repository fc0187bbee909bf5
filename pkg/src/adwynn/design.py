"""Designs, information matrices, and the locally D-optimal oracle.

A design is a finitely supported probability measure on the
experimental region.  Its information matrix at a parameter value is
the weighted sum of regressor outer products; the sensitivity function
d(x) = f' M^{-1} f drives both the sequential point selection and the
equivalence-theorem certificate (a design is D-optimal on the grid iff
max d equals the parameter dimension p).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, SingularMatrixError
from .model import ModelSpec

Array = np.ndarray

WEIGHT_SUM_TOL = 1e-12
PD_FLOOR = 1e-12
MERGE_TOL = 1e-12
PRUNE_TOL = 1e-8


@dataclass(frozen=True)
class Design:
    """Finitely supported probability measure: support points and weights."""

    support: Array
    weights: Array

    def __post_init__(self):
        pts = np.asarray(self.support, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DomainError("design support must be a nonempty (s, k) array")
        if w.shape != (pts.shape[0],):
            raise DomainError("weights must match the number of support points")
        if np.any(w <= 0.0):
            raise DomainError("design weights must be positive")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise DomainError(f"design weights sum to {w.sum()!r}, expected 1")
        diffs = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 0.0:
            raise DomainError("support points must be distinct")
        pts = pts.copy()
        w = w.copy()
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "support", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.support.shape[0]

    def to_jsonable(self) -> dict:
        return {
            "support": [list(map(float, row)) for row in self.support],
            "weights": [float(w) for w in self.weights],
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "Design":
        return Design(np.asarray(obj["support"], dtype=float), np.asarray(obj["weights"], dtype=float))


def design_from_counts(points: Array, counts: Array) -> Design:
    """Empirical design with weights counts/n; counts must be positive ints."""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    return Design(points, counts / n)


# --------------------------------------------------------------------------
# Information-matrix algebra
# --------------------------------------------------------------------------


def check_info_matrix(M: Array, sym_tol: float = 1e-12, eig_floor: float = -1e-10) -> None:
    """Validate symmetry and nonnegative definiteness; raises DomainError."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("information matrix must be square")
    if np.max(np.abs(M - M.T)) > sym_tol:
        raise DomainError("information matrix is not symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eigs[0] < eig_floor:
        raise DomainError(f"information matrix has eigenvalue {eigs[0]:.3e} < 0")


def info_matrix(design: Design, theta: Array, model: ModelSpec) -> Array:
    """M = sum over support of weight * f f'."""
    F = np.asarray(model.f(design.support, np.asarray(theta, dtype=float)), dtype=float)
    M = (F * design.weights[:, None]).T @ F
    return 0.5 * (M + M.T)


def add_point(design: Design, x, n: int) -> Design:
    """Empirical-measure update: the (n+1)-st observation lands at x.

    Existing support points within MERGE_TOL (Euclidean) absorb the new
    mass; otherwise x joins the support.  When the weights are exact
    multiplicities over n (the declared use), the update goes through
    integer counts so the new weights equal multiplicities over n+1
    exactly; otherwise the convex-combination form is used.
    """
    if n <= 0:
        raise DomainError("add_point requires the current sample size n >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (design.support.shape[1],):
        raise DomainError("new point dimension does not match the support")
    d = np.sqrt(((design.support - x) ** 2).sum(axis=1))
    hit = int(np.argmin(d))
    merged = d[hit] <= MERGE_TOL

    counts = np.rint(design.weights * n)
    empirical = counts.sum() == n and np.max(np.abs(design.weights * n - counts)) <= 1e-9
    if empirical:
        if merged:
            w = counts.copy()
            w[hit] += 1.0
            return Design(design.support, w / (n + 1.0))
        support = np.vstack([design.support, x[None, :]])
        return Design(support, np.concatenate([counts, [1.0]]) / (n + 1.0))

    new_w = design.weights * (n / (n + 1.0))
    if merged:
        w = new_w.copy()
        w[hit] += 1.0 / (n + 1.0)
        return Design(design.support, w)
    support = np.vstack([design.support, x[None, :]])
    weights = np.concatenate([new_w, [1.0 / (n + 1.0)]])
    return Design(support, weights)


def rank_one_update(M: Array, f: Array, n: int) -> Array:
    """Fixed-parameter information update for one added observation."""
    if n <= 0:
        raise DomainError("rank_one_update requires n >= 1")
    M = np.asarray(M, dtype=float)
    f = np.asarray(f, dtype=float)
    return (n / (n + 1.0)) * M + np.outer(f, f) / (n + 1.0)


def min_eigenvalue(M: Array) -> float:
    return float(np.linalg.eigvalsh(np.asarray(M, dtype=float))[0])


def pd_inverse(M: Array, floor: float = PD_FLOOR) -> Array:
    """Inverse via symmetric eigendecomposition; fails fast below the floor."""
    M = np.asarray(M, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(M)
    if eigvals[0] <= floor:
        raise SingularMatrixError("matrix not positive definite", float(eigvals[0]))
    return (eigvecs / eigvals) @ eigvecs.T


def sensitivity(x, M: Array, theta: Array, model: ModelSpec, floor: float = PD_FLOOR) -> float:
    """d(x) = f(x, theta)' M^{-1} f(x, theta)."""
    Minv = pd_inverse(M, floor)
    f = np.asarray(model.f(np.atleast_1d(np.asarray(x, dtype=float)), np.asarray(theta, dtype=float)), dtype=float)
    return float(f @ Minv @ f)


def sensitivity_profile(
    points: Array, M: Array, theta: Array, model: ModelSpec, floor: float = PD_FLOOR
) -> Array:
    """Vectorized sensitivity over a point array, shape (m,)."""
    Minv = pd_inverse(M, floor)
    F = np.asarray(model.f(np.atleast_2d(np.asarray(points, dtype=float)), np.asarray(theta, dtype=float)), dtype=float)
    return np.einsum("ij,jk,ik->i", F, Minv, F)


def log_det(M: Array, floor: float = PD_FLOOR) -> float:
    """Log determinant through the symmetric eigendecomposition."""
    eigvals = np.linalg.eigvalsh(np.asarray(M, dtype=float))
    if eigvals[0] <= floor:
        raise SingularMatrixError("log_det needs a positive definite matrix", float(eigvals[0]))
    return float(np.log(eigvals).sum())


# --------------------------------------------------------------------------
# Locally D-optimal oracle
# --------------------------------------------------------------------------


def equivalence_gap(design: Design, theta: Array, model: ModelSpec, grid: Array) -> float:
    """max over the grid of d(x) minus p; zero certifies grid optimality."""
    M = info_matrix(design, theta, model)
    d = sensitivity_profile(np.atleast_2d(grid), M, theta, model)
    return float(d.max() - model.p)


def solve_locally_d_optimal(
    model: ModelSpec,
    theta: Array,
    grid: Array,
    tol: float = 1e-5,
    max_iterations: int = 100000,
    prune_tol: float = PRUNE_TOL,
) -> Design:
    """Locally D-optimal design on the scan grid at a fixed parameter.

    Multiplicative weight iteration w <- w * d/p, which is monotone in
    the log determinant; convergence is certified by the equivalence
    gap max d - p <= tol * p.  Support points whose final weight falls
    below ``prune_tol`` are removed and the gap is re-certified.

    For p = 1 the optimum is the pointwise maximizer of f^2 and is
    returned directly with an exactly zero gap.
    """
    theta = np.asarray(theta, dtype=float)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    m, _ = grid.shape
    F = np.asarray(model.f(grid, theta), dtype=float)
    p = model.p

    if p == 1:
        vals = F[:, 0] ** 2
        best = int(np.argmax(vals))
        if vals[best] <= 0.0:
            raise SingularMatrixError("all regressors vanish on the grid", 0.0)
        return Design(grid[best : best + 1], np.array([1.0]))

    w = np.full(m, 1.0 / m)
    gap = np.inf
    for _ in range(max_iterations):
        M = (F * w[:, None]).T @ F
        try:
            Minv = pd_inverse(M)
        except SingularMatrixError as exc:
            raise SingularMatrixError(
                "grid does not support a positive definite information matrix", exc.min_eigenvalue
            ) from exc
        d = np.einsum("ij,jk,ik->i", F, Minv, F)
        gap = float(d.max() - p)
        if gap <= tol * p:
            break
        w = w * d / p
        w = w / w.sum()
    else:
        raise ConvergenceError(
            f"multiplicative iteration did not reach tol*p = {tol * p:.3e} "
            f"in {max_iterations} iterations",
            gap,
        )

    keep = w >= prune_tol
    w = w[keep] / w[keep].sum()
    design = Design(grid[keep], w)
    final_gap = equivalence_gap(design, theta, model, grid)
    if final_gap > tol * p:
        raise ConvergenceError("pruning broke the equivalence certificate", final_gap)
    return design


def d_efficiency(design: Design, reference: Design, theta: Array, model: ModelSpec) -> float:
    """(det M(design) / det M(reference))^(1/p)."""
    ld = log_det(info_matrix(design, theta, model))
    ld_ref = log_det(info_matrix(reference, theta, model))
    return float(np.exp((ld - ld_ref) / model.p))

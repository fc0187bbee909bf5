"""Monte Carlo verification and design-mass diagnostics.

The two study entry points simulate independent adaptive runs and
summarize them:

- ``consistency_study`` tracks quantiles of the estimation error at
  checkpoints; strong consistency shows up as stochastically shrinking
  error.
- ``normality_study`` standardizes the estimation error as
  T_n = sqrt(n) / sigma * M^{1/2}(design_n, theta_hat) (theta_hat - theta_bar)
  and compares it against the standard normal coordinate-wise, its
  squared norm against chi-square, and counts 95% ellipsoid coverage.

The design-mass diagnostics quantify how the adaptive point sequence
spreads: no small window keeps more than 1/p + eps of the mass past a
burn-in, and the mass eventually splits into p well-separated clusters.
The probability machinery (normal and chi-square CDFs, KS distances)
is self-contained so reports carry raw distances, not table lookups.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .adaptive import Scenario, Trajectory, simulate_trajectory
from .design import (
    Design,
    d_efficiency,
    info_matrix,
    solve_locally_d_optimal,
)
from .errors import DomainError, SingularMatrixError, StudyError
from .estimator import DataBatch, LSFit, fit_ls
from .model import Box, DesignSpace, FiniteSet, ModelSpec, ParameterSpace
from .noise import make_rng, mix_seed

Array = np.ndarray

QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


# --------------------------------------------------------------------------
# Probability utilities
# --------------------------------------------------------------------------


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x).

    Series expansion for x < a + 1, continued fraction (modified Lentz)
    for the complement otherwise.
    """
    if x < 0 or a <= 0:
        raise DomainError("gamma_p requires x >= 0 and a > 0")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(a)
    if x < a + 1.0:
        term = 1.0 / a
        total = term
        ap = a
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + a * math.log(x) - lg)
    # continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    q = math.exp(-x + a * math.log(x) - lg) * h
    return 1.0 - q


def chi2_cdf(dim: int, x: float) -> float:
    """CDF of the chi-square distribution with ``dim`` degrees of freedom."""
    if x <= 0:
        return 0.0
    return _gamma_p(dim / 2.0, x / 2.0)


def chi2_quantile(dim: int, level: float, tol: float = 1e-12) -> float:
    """Quantile by bisection on the implemented CDF."""
    if not 0.0 < level < 1.0:
        raise DomainError("quantile level must be in (0, 1)")
    lo, hi = 0.0, float(dim)
    while chi2_cdf(dim, hi) < level:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(dim, mid) < level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ks_distance(sample: Array, cdf: Callable[[float], float]) -> float:
    """Exact sup distance between the empirical CDF and ``cdf``."""
    s = np.sort(np.asarray(sample, dtype=float))
    n = s.size
    if n == 0:
        raise DomainError("KS distance needs a nonempty sample")
    F = np.array([cdf(v) for v in s])
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))


def matrix_sqrt(M: Array) -> Array:
    """Unique nonnegative-definite symmetric square root."""
    M = np.asarray(M, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(M)
    if eigvals[0] < -1e-10:
        raise SingularMatrixError("matrix square root needs a PSD matrix", float(eigvals[0]))
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * root) @ eigvecs.T


def normality_stat(
    fit: LSFit,
    design: Design,
    theta_bar: Array,
    sigma: float,
    n: int,
    model: ModelSpec,
) -> Array:
    """Standardized estimation error sqrt(n)/sigma * M^{1/2} (theta_hat - theta_bar)."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    M = info_matrix(design, fit.theta_hat, model)
    root = matrix_sqrt(M)
    delta = np.asarray(fit.theta_hat, dtype=float) - np.asarray(theta_bar, dtype=float)
    return (math.sqrt(n) / sigma) * (root @ delta)


def parameter_discrepancy(
    trajectory: Trajectory, n: int, theta, theta_bar, model: ModelSpec
) -> float:
    """Mean squared mean-response difference along the first n design points."""
    if n < 1 or n > trajectory.n:
        raise DomainError("n outside the trajectory")
    pts = trajectory.points[:n]
    mu_a = np.asarray(model.mu(pts, np.asarray(theta, dtype=float)), dtype=float)
    mu_b = np.asarray(model.mu(pts, np.asarray(theta_bar, dtype=float)), dtype=float)
    return float(((mu_a - mu_b) ** 2).sum() / n)


# --------------------------------------------------------------------------
# Regressor-range constants and window calibration
# --------------------------------------------------------------------------


def sample_unit_directions(p: int, count: int, seed: int = 0) -> Array:
    """Unit vectors: the signed coordinate axes plus seeded random ones."""
    axes = np.vstack([np.eye(p), -np.eye(p)])
    if p == 1 or count <= 2 * p:
        return axes[: max(count, 2)]
    rng = make_rng(seed)
    extra = rng.standard_normal((count - 2 * p, p))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.vstack([axes, extra])


def compute_gamma_kappa(
    model: ModelSpec,
    space: ParameterSpace,
    grid: Array,
    theta_sample: Array,
    direction_sample: Array,
) -> tuple[float, float]:
    """Sampled regressor range constants.

    gamma approximates the largest regressor norm over the region and
    parameter space; kappa the smallest (over directions and
    parameters) of the best squared projection achievable by some grid
    point.  A kappa at zero flags a spanning failure.
    """
    directions = np.atleast_2d(np.asarray(direction_sample, dtype=float))
    if directions.shape[0] == 0:
        raise DomainError("direction sample must be nonempty")
    thetas = np.atleast_2d(np.asarray(theta_sample, dtype=float))
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    F_all = np.stack([np.asarray(model.f(grid, th), dtype=float) for th in thetas])
    gamma = float(np.sqrt((F_all**2).sum(axis=-1)).max())
    proj = np.einsum("smp,dp->smd", F_all, directions) ** 2
    kappa = float(proj.max(axis=1).min())
    return gamma, kappa


@dataclass(frozen=True)
class WindowCalibration:
    """Numerically calibrated window diameter for the mass-bound check."""

    d: float
    eta: float
    threshold: float
    gamma: float
    kappa: float


def calibrate_window_diameter(
    model: ModelSpec,
    space: ParameterSpace,
    grid: Array,
    theta_sample: Array,
    epsilon: float,
    direction_sample: Optional[Array] = None,
) -> WindowCalibration:
    """Largest window diameter certified by the sampled regressor modulus.

    The selection rule never revisits a window of diameter d when the
    regressor varies by at most eta*kappa/gamma inside it and the
    window already holds slightly more than 1/p of the mass, with
    eta = 1 - (1 + p*epsilon/2)^(-1/2).  The returned d is the largest
    grid-pair distance below which the sampled regressor variation
    stays under that threshold.
    """
    p = model.p
    if p < 2:
        raise DomainError("the window mass bound applies only for p >= 2")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    if direction_sample is None:
        direction_sample = sample_unit_directions(p, 2 * p + 32, seed=1)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    thetas = np.atleast_2d(np.asarray(theta_sample, dtype=float))
    gamma, kappa = compute_gamma_kappa(model, space, grid, thetas, direction_sample)
    eta = 1.0 - 1.0 / math.sqrt(1.0 + p * epsilon / 2.0)
    threshold = eta * kappa / gamma

    diff = grid[:, None, :] - grid[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    fvar = np.zeros_like(dist)
    for th in thetas:
        F = np.asarray(model.f(grid, th), dtype=float)
        fd = np.sqrt(((F[:, None, :] - F[None, :, :]) ** 2).sum(axis=-1))
        np.maximum(fvar, fd, out=fvar)
    violating = fvar > threshold
    np.fill_diagonal(violating, False)
    if not violating.any():
        d = float(dist.max())
    else:
        d = 0.999 * float(dist[violating].min())
    return WindowCalibration(d=d, eta=eta, threshold=threshold, gamma=gamma, kappa=kappa)


# --------------------------------------------------------------------------
# Window mass and cluster extraction
# --------------------------------------------------------------------------


def _space_from_echo(echo: dict) -> Optional[DesignSpace]:
    if not echo:
        return None
    if echo.get("kind") == "box":
        return Box(echo["lower"], echo["upper"], tuple(echo["grid_resolution"]))
    if echo.get("kind") == "finite":
        return FiniteSet(np.asarray(echo["points"], dtype=float))
    return None


def window_mass(trajectory: Trajectory, n: int, d: float) -> float:
    """Largest empirical mass held by any window of diameter <= d at stage n.

    One-dimensional regions use exact sliding intervals anchored at the
    observed points; higher dimensions scan balls of radius d/2 around
    the region's grid points.
    """
    if d <= 0:
        raise DomainError("window diameter must be positive")
    if n < 1 or n > trajectory.n:
        raise DomainError("n outside the trajectory")
    pts = trajectory.points[:n]
    if pts.shape[1] == 1:
        xs = np.sort(pts[:, 0])
        counts = np.searchsorted(xs, xs + d, side="right") - np.arange(n)
        return float(counts.max() / n)
    space = _space_from_echo(trajectory.design_space_echo)
    centers = space.grid() if space is not None else pts
    d2 = ((pts[None, :, :] - centers[:, None, :]) ** 2).sum(axis=-1)
    counts = (d2 <= (d / 2.0) ** 2).sum(axis=1)
    return float(counts.max() / n)


def window_mass_curve(trajectory: Trajectory, d: float, n_from: int = 1) -> dict[int, float]:
    """window_mass for every stage n in [n_from, n]; 1-D fast path."""
    pts = trajectory.points
    total = trajectory.n
    if pts.shape[1] == 1:
        out: dict[int, float] = {}
        for n in range(max(1, n_from), total + 1):
            xs = np.sort(pts[:n, 0])
            counts = np.searchsorted(xs, xs + d, side="right") - np.arange(n)
            out[n] = float(counts.max() / n)
        return out
    return {n: window_mass(trajectory, n, d) for n in range(max(1, n_from), total + 1)}


@dataclass(frozen=True)
class ClusterInfo:
    cell_index: tuple[int, ...]
    mass: float
    count: int
    point_min: tuple[float, ...]
    point_max: tuple[float, ...]


@dataclass(frozen=True)
class MassDiagnostics:
    """Cluster structure of an empirical design, plus optional mass curve."""

    n: int
    cell_diameter: float
    window_diameter: float
    requested: int
    found: int
    clusters: tuple[ClusterInfo, ...]
    separations: tuple[float, ...]
    pi0: Optional[float]
    excluded_mass: float
    window_masses: Optional[dict[int, float]] = None
    n0: Optional[int] = None

    @property
    def complete(self) -> bool:
        return self.found >= self.requested

    def to_jsonable(self) -> dict:
        return {
            "schema": "adwynn.mass_diagnostics.v1",
            "n": self.n,
            "cell_diameter": self.cell_diameter,
            "window_diameter": self.window_diameter,
            "requested_clusters": self.requested,
            "found_clusters": self.found,
            "clusters": [
                {
                    "cell_index": list(c.cell_index),
                    "mass": c.mass,
                    "count": c.count,
                    "point_min": list(c.point_min),
                    "point_max": list(c.point_max),
                }
                for c in self.clusters
            ],
            "separations": list(self.separations),
            "pi0": self.pi0,
            "excluded_mass": self.excluded_mass,
            "window_masses": None
            if self.window_masses is None
            else {str(k): v for k, v in sorted(self.window_masses.items())},
            "n0": self.n0,
        }


def _cells_for_space(space: DesignSpace, cell_diameter: float):
    """Cell assignment function and cell count for a covering by small cells."""
    if isinstance(space, FiniteSet):
        pts = space.points

        def assign(x: Array) -> tuple[int, ...]:
            d2 = ((pts - x) ** 2).sum(axis=1)
            return (int(np.argmin(d2)),)

        return assign
    k = space.dimension
    width_target = cell_diameter / math.sqrt(k)
    counts = [
        max(1, int(math.ceil((space.upper[j] - space.lower[j]) / width_target)))
        for j in range(k)
    ]
    widths = [(space.upper[j] - space.lower[j]) / counts[j] for j in range(k)]

    def assign(x: Array) -> tuple[int, ...]:
        idx = []
        for j in range(k):
            i = int((x[j] - space.lower[j]) / widths[j])
            idx.append(min(max(i, 0), counts[j] - 1))
        return tuple(idx)

    return assign


def extract_clusters(trajectory: Trajectory, n: int, cell_diameter: float) -> MassDiagnostics:
    """Greedy extraction of p separated mass clusters at stage n.

    Cover the region by cells of diameter <= cell_diameter, repeatedly
    take the cell holding the most not-yet-excluded mass, then exclude
    everything within cell_diameter of the points taken.  Separations
    are reported as achieved point-set distances.  Finding fewer than p
    clusters is reported, not raised; it usually means n is too small
    or the cells too large.
    """
    p = trajectory.p
    if n < p:
        raise DomainError("need at least p observations to extract p clusters")
    if cell_diameter <= 0:
        raise DomainError("cell_diameter must be positive")
    pts = trajectory.points[:n]
    space = _space_from_echo(trajectory.design_space_echo)
    if space is None:
        space = Box(pts.min(axis=0) - 1e-9, pts.max(axis=0) + 1e-9, (2,) * pts.shape[1])
    assign = _cells_for_space(space, cell_diameter)
    cell_ids = [assign(x) for x in pts]

    excluded = np.zeros(n, dtype=bool)
    clusters: list[ClusterInfo] = []
    member_sets: list[Array] = []
    for _ in range(p):
        masses: dict[tuple[int, ...], int] = {}
        for i in range(n):
            if not excluded[i]:
                masses[cell_ids[i]] = masses.get(cell_ids[i], 0) + 1
        if not masses:
            break
        best_cell = max(sorted(masses), key=lambda c: masses[c])
        members = np.array(
            [i for i in range(n) if cell_ids[i] == best_cell and not excluded[i]]
        )
        member_pts = pts[members]
        clusters.append(
            ClusterInfo(
                cell_index=best_cell,
                mass=len(members) / n,
                count=len(members),
                point_min=tuple(float(v) for v in member_pts.min(axis=0)),
                point_max=tuple(float(v) for v in member_pts.max(axis=0)),
            )
        )
        member_sets.append(member_pts)
        d2 = ((pts[:, None, :] - member_pts[None, :, :]) ** 2).sum(axis=-1).min(axis=1)
        excluded |= d2 <= cell_diameter**2

    separations = []
    for i in range(len(member_sets)):
        for j in range(i + 1, len(member_sets)):
            d2 = ((member_sets[i][:, None, :] - member_sets[j][None, :, :]) ** 2).sum(axis=-1)
            separations.append(float(np.sqrt(d2.min())))
    return MassDiagnostics(
        n=n,
        cell_diameter=cell_diameter,
        window_diameter=3.0 * cell_diameter,
        requested=p,
        found=len(clusters),
        clusters=tuple(clusters),
        separations=tuple(separations),
        pi0=min((c.mass for c in clusters), default=None) if len(clusters) >= p else None,
        excluded_mass=float(excluded.sum()) / n - sum(c.mass for c in clusters),
    )


# --------------------------------------------------------------------------
# Monte Carlo engine
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MCReport:
    """Replicate-level summary of a Monte Carlo study."""

    replicates: int
    checkpoints: tuple[int, ...]
    master_seed: int
    quantile_levels: tuple[float, ...]
    error_samples: dict[int, Array]
    error_quantiles: dict[int, tuple[float, ...]]
    t_known: dict[int, Optional[Array]]
    t_plugin: dict[int, Array]
    ks_known: dict[int, Optional[tuple[float, ...]]]
    ks_plugin: dict[int, tuple[float, ...]]
    ks_mstar: dict[int, Optional[tuple[float, ...]]]
    ks_chi2: dict[int, Optional[float]]
    coverage95: dict[int, Optional[float]]
    defficiency_samples: dict[int, Array]
    defficiency_quantiles: dict[int, tuple[float, ...]]
    failed: tuple[int, ...]
    failure_messages: tuple[str, ...]
    normality_skipped: bool
    sigma_known: Optional[float]
    kept_paths: tuple[Trajectory, ...] = ()

    def to_jsonable(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "schema": "adwynn.mc_report.v1",
            "replicates": self.replicates,
            "checkpoints": list(self.checkpoints),
            "master_seed": self.master_seed,
            "quantile_levels": list(self.quantile_levels),
            "sigma_known": self.sigma_known,
            "normality_skipped": self.normality_skipped,
            "failed_replicates": list(self.failed),
            "failure_messages": list(self.failure_messages),
            "per_checkpoint": {
                str(n): {
                    "error_quantiles": list(self.error_quantiles[n]),
                    "error_samples": arr(self.error_samples[n]),
                    "t_known": arr(self.t_known[n]),
                    "t_plugin": arr(self.t_plugin[n]),
                    "ks_known": arr(self.ks_known[n]),
                    "ks_plugin": arr(self.ks_plugin[n]),
                    "ks_mstar": arr(self.ks_mstar[n]),
                    "ks_chi2": self.ks_chi2[n],
                    "coverage95": self.coverage95[n],
                    "defficiency_quantiles": list(self.defficiency_quantiles[n]),
                    "defficiency_samples": arr(self.defficiency_samples[n]),
                }
                for n in self.checkpoints
            },
        }

    def csv_rows(self) -> tuple[list[str], list[list[str]]]:
        p = self.t_plugin[self.checkpoints[0]].shape[1]
        header = (
            ["replicate", "n", "failed", "error_norm"]
            + [f"t_known{j}" for j in range(p)]
            + [f"t_plugin{j}" for j in range(p)]
            + ["defficiency"]
        )
        rows = []
        failed = set(self.failed)
        alive = [r for r in range(self.replicates) if r not in failed]
        for n in self.checkpoints:
            for pos, r in enumerate(alive):
                t_k = self.t_known[n]
                rows.append(
                    [repr(r), repr(n), "0", repr(float(self.error_samples[n][pos]))]
                    + [repr(float(v)) for v in (t_k[pos] if t_k is not None else [math.nan] * p)]
                    + [repr(float(v)) for v in self.t_plugin[n][pos]]
                    + [repr(float(self.defficiency_samples[n][pos]))]
                )
            for r in sorted(failed):
                rows.append([repr(r), repr(n), "1"] + ["nan"] * (2 * p + 2))
        return header, rows


def _replicate_worker(args) -> dict:
    (scenario, master_seed, index, checkpoints, sigma_known, reference, keep_path) = args
    seed = mix_seed(master_seed, index)
    try:
        config = replace(scenario.config, n_max=max(checkpoints))
        traj = simulate_trajectory(replace(scenario, config=config), seed)
        out: dict = {"index": index, "failed": None, "checkpoints": {}}
        for n in checkpoints:
            if n < traj.n_start:
                raise DomainError(
                    f"checkpoint {n} precedes the starting design size {traj.n_start}"
                )
            warm = traj.estimates[n - traj.n_start]
            fit = fit_ls(
                DataBatch(traj.points[:n], traj.responses[:n]),
                scenario.model,
                scenario.parameter_space,
                scenario.config.fit,
                warm_start=warm,
            )
            design_n = empirical_design(traj.points[:n])
            err = float(np.linalg.norm(fit.theta_hat - scenario.theta_bar))
            t_known = None
            if sigma_known is not None:
                t_known = normality_stat(
                    fit, design_n, scenario.theta_bar, sigma_known, n, scenario.model
                )
            sigma_hat = math.sqrt(max(fit.sigma2_hat, 1e-300))
            t_plugin = normality_stat(
                fit, design_n, scenario.theta_bar, sigma_hat, n, scenario.model
            )
            u_mstar = None
            if reference is not None and sigma_known is not None:
                Mstar_root = matrix_sqrt(
                    info_matrix(reference, scenario.theta_bar, scenario.model)
                )
                delta = fit.theta_hat - scenario.theta_bar
                u_mstar = (math.sqrt(n) / sigma_known) * (Mstar_root @ delta)
            d_eff = (
                d_efficiency(design_n, reference, scenario.theta_bar, scenario.model)
                if reference is not None
                else math.nan
            )
            out["checkpoints"][n] = {
                "error": err,
                "t_known": None if t_known is None else t_known.tolist(),
                "t_plugin": t_plugin.tolist(),
                "u_mstar": None if u_mstar is None else u_mstar.tolist(),
                "defficiency": d_eff,
            }
        if keep_path:
            out["trajectory"] = traj.to_jsonable()
        return out
    except Exception as exc:  # noqa: BLE001 - a replicate must never kill the study
        return {"index": index, "failed": f"{type(exc).__name__}: {exc}"}


def empirical_design(points: Array) -> Design:
    """Design with weights equal to exact multiplicities over n."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    uniq, counts = np.unique(pts, axis=0, return_counts=True)
    return Design(uniq, counts / pts.shape[0])


def run_study(
    scenario: Scenario,
    replicates: int,
    checkpoints: Sequence[int],
    seed: int,
    workers: int = 1,
    keep_paths: int = 0,
    reference_tol: float = 1e-5,
    max_failure_fraction: float = 0.01,
) -> MCReport:
    """Simulate independent replicates and reduce them into an MCReport.

    Replicates are seeded from the master seed by index, so the report
    does not depend on the worker count.  Reduction is ordered by
    replicate index.  If more than ``max_failure_fraction`` of the
    replicates fail the study raises StudyError.
    """
    checkpoints = tuple(sorted(int(n) for n in checkpoints))
    if not checkpoints:
        raise DomainError("at least one checkpoint is required")
    if replicates < 1:
        raise DomainError("need at least one replicate")
    sigma2 = scenario.noise.limit_variance()
    # a zero limiting variance (noiseless runs) admits no standardization
    sigma_known = None if not sigma2 else math.sqrt(sigma2)
    grid = scenario.design_space.grid()
    reference = solve_locally_d_optimal(
        scenario.model, scenario.theta_bar, grid, tol=reference_tol
    )
    args = [
        (scenario, int(seed), r, checkpoints, sigma_known, reference, r < keep_paths)
        for r in range(replicates)
    ]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_worker, args, chunksize=4))
    else:
        results = [_replicate_worker(a) for a in args]
    results.sort(key=lambda r: r["index"])

    failed = [r["index"] for r in results if r["failed"] is not None]
    messages = [r["failed"] for r in results if r["failed"] is not None]
    alive = [r for r in results if r["failed"] is None]
    if len(failed) > max_failure_fraction * replicates:
        raise StudyError(
            f"{len(failed)} of {replicates} replicates failed: {messages[:5]}", failed
        )
    if not alive:
        raise StudyError("all replicates failed", failed)

    p = scenario.model.p
    report: dict = {
        "error_samples": {},
        "error_quantiles": {},
        "t_known": {},
        "t_plugin": {},
        "ks_known": {},
        "ks_plugin": {},
        "ks_mstar": {},
        "ks_chi2": {},
        "coverage95": {},
        "defficiency_samples": {},
        "defficiency_quantiles": {},
    }
    r_alive = len(alive)
    normality_skipped = r_alive < 2
    chi_crit = chi2_quantile(p, 0.95)
    for n in checkpoints:
        errs = np.array([r["checkpoints"][n]["error"] for r in alive])
        report["error_samples"][n] = errs
        report["error_quantiles"][n] = tuple(
            float(np.quantile(errs, q)) for q in QUANTILE_LEVELS
        )
        t_plugin = np.array([r["checkpoints"][n]["t_plugin"] for r in alive])
        report["t_plugin"][n] = t_plugin
        d_eff = np.array([r["checkpoints"][n]["defficiency"] for r in alive])
        report["defficiency_samples"][n] = d_eff
        report["defficiency_quantiles"][n] = tuple(
            float(np.quantile(d_eff, q)) for q in QUANTILE_LEVELS
        )
        if sigma_known is not None:
            t_known = np.array([r["checkpoints"][n]["t_known"] for r in alive])
            u_mstar = np.array([r["checkpoints"][n]["u_mstar"] for r in alive])
            report["t_known"][n] = t_known
            if normality_skipped:
                report["ks_known"][n] = None
                report["ks_plugin"][n] = None
                report["ks_mstar"][n] = None
                report["ks_chi2"][n] = None
                report["coverage95"][n] = None
            else:
                report["ks_known"][n] = tuple(
                    ks_distance(t_known[:, j], normal_cdf) for j in range(p)
                )
                report["ks_plugin"][n] = tuple(
                    ks_distance(t_plugin[:, j], normal_cdf) for j in range(p)
                )
                report["ks_mstar"][n] = tuple(
                    ks_distance(u_mstar[:, j], normal_cdf) for j in range(p)
                )
                norms2 = (t_known**2).sum(axis=1)
                report["ks_chi2"][n] = ks_distance(norms2, lambda v: chi2_cdf(p, v))
                report["coverage95"][n] = float((norms2 <= chi_crit).mean())
        else:
            report["t_known"][n] = None
            report["ks_known"][n] = None
            report["ks_mstar"][n] = None
            report["ks_chi2"][n] = None
            report["coverage95"][n] = None
            if normality_skipped:
                report["ks_plugin"][n] = None
            else:
                report["ks_plugin"][n] = tuple(
                    ks_distance(t_plugin[:, j], normal_cdf) for j in range(p)
                )

    kept = tuple(
        Trajectory.from_jsonable(r["trajectory"]) for r in alive if "trajectory" in r
    )
    return MCReport(
        replicates=replicates,
        checkpoints=checkpoints,
        master_seed=int(seed),
        quantile_levels=QUANTILE_LEVELS,
        failed=tuple(failed),
        failure_messages=tuple(messages),
        normality_skipped=normality_skipped,
        sigma_known=sigma_known,
        kept_paths=kept,
        **report,
    )


def consistency_study(
    scenario: Scenario,
    replicates: int,
    checkpoints: Sequence[int],
    seed: int,
    workers: int = 1,
    keep_paths: int = 0,
) -> MCReport:
    """Error quantiles of the least-squares estimate at the checkpoints."""
    return run_study(scenario, replicates, checkpoints, seed, workers, keep_paths)


def normality_study(
    scenario: Scenario,
    replicates: int,
    n_final: int,
    seed: int,
    workers: int = 1,
    keep_paths: int = 0,
) -> MCReport:
    """Distributional checks of the standardized error at a single stage.

    Requires an interior true parameter and noise whose conditional
    variance settles to a limit; both are hypotheses of the normality
    result, not implementation limits.
    """
    if scenario.noise.limit_variance() is None:
        raise DomainError("normality study needs noise with a limiting variance")
    if scenario.parameter_space.on_boundary(scenario.theta_bar, tol=1e-12):
        raise DomainError("normality study needs an interior true parameter")
    return run_study(scenario, replicates, [n_final], seed, workers, keep_paths)

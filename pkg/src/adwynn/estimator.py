"""Least-squares estimation over the compact parameter box.

The estimator is the global minimizer of the sum of squared residuals
over the box, approximated by a coarse full-factorial scan refined with
a box-projected, step-halving Gauss-Newton descent.  A purely local
solver would not implement the estimator the asymptotic guarantees are
about, hence the mandatory grid phase.

``SequentialLS`` keeps the grid objective incrementally updated so the
adaptive loop can refit after every observation at O(grid) cost per
step instead of O(grid * n).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BoundaryWarning, DomainError, FitFailureError
from .model import DesignSpace, ModelSpec, ParameterSpace

Array = np.ndarray


@dataclass(frozen=True)
class DataBatch:
    """Paired design points and responses."""

    xs: Array
    ys: Array

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 2 or xs.shape[0] == 0:
            raise DomainError("data points must form a nonempty (n, k) array")
        if ys.shape != (xs.shape[0],):
            raise DomainError("responses must match the number of points")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise DomainError("data must be finite")
        xs = xs.copy()
        ys = ys.copy()
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    def validate_in_space(self, space: DesignSpace) -> None:
        for x in self.xs:
            if not space.contains(x):
                raise DomainError(f"data point {x.tolist()} outside the design space")


@dataclass(frozen=True)
class LSFit:
    """Result of a least-squares fit.

    ``grid_minimum`` is the winner of the coarse scan before local
    refinement; ``grid_tie`` flags a non-unique scan minimum, which
    typically means the data under-determine the parameter.
    """

    theta_hat: Array
    sse_value: float
    sigma2_hat: float
    converged: bool
    grid_minimum: Array
    grid_tie: bool = False


@dataclass(frozen=True)
class FitConfig:
    grid_points_per_axis: int = 15
    max_iterations: int = 200
    step_tol: float = 1e-10
    max_halvings: int = 40


def sse(data: DataBatch, theta, model: ModelSpec) -> float:
    """Sum of squared residuals at theta."""
    theta = np.asarray(theta, dtype=float)
    r = data.ys - np.asarray(model.mu(data.xs, theta), dtype=float)
    return float(r @ r)


def sse_gradient(
    data: DataBatch,
    theta,
    model: ModelSpec,
    space: ParameterSpace | None = None,
) -> Array:
    """Gradient of the residual sum of squares: -2 * sum of r_i * f_i.

    Valid on the interior of the parameter box; when ``space`` is given
    and theta touches its boundary a BoundaryWarning is emitted (the
    stationarity interpretation breaks down there).
    """
    if not model.gradient_is_mu_gradient:
        raise DomainError("sse_gradient needs f to be the parameter gradient of mu")
    theta = np.asarray(theta, dtype=float)
    if space is not None and space.on_boundary(theta):
        warnings.warn("theta lies on the parameter-box boundary", BoundaryWarning)
    r = data.ys - np.asarray(model.mu(data.xs, theta), dtype=float)
    F = np.asarray(model.f(data.xs, theta), dtype=float)
    return -2.0 * (F.T @ r)


def _sse_arrays(xs: Array, ys: Array, model: ModelSpec, theta: Array) -> float:
    r = ys - np.asarray(model.mu(xs, theta), dtype=float)
    return float(r @ r)


def _grid_sse(xs: Array, ys: Array, model: ModelSpec, theta_grid: Array) -> Array:
    """Objective over the full parameter grid, vectorized; (G,) array."""
    mu = np.asarray(model.mu(xs[None, :, :], theta_grid[:, None, :]), dtype=float)
    resid = ys[None, :] - mu
    out = (resid**2).sum(axis=1)
    out[~np.isfinite(out)] = np.inf
    return out


def _gauss_newton(
    xs: Array,
    ys: Array,
    model: ModelSpec,
    space: ParameterSpace,
    theta0: Array,
    config: FitConfig,
    trace: list | None = None,
) -> tuple[Array, float, bool]:
    """Box-projected damped Gauss-Newton descent from theta0.

    Accepts only strictly decreasing steps (step-halving line search),
    so the objective along the accepted iterates is monotone.
    """
    theta = space.project(theta0)
    value = _sse_arrays(xs, ys, model, theta)
    if trace is not None:
        trace.append((theta.copy(), value))
    converged = True
    for _ in range(config.max_iterations):
        r = ys - np.asarray(model.mu(xs, theta), dtype=float)
        F = np.asarray(model.f(xs, theta), dtype=float)
        g = F.T @ r
        G = F.T @ F
        try:
            step = np.linalg.solve(G, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(G, g, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        alpha = 1.0
        accepted = None
        for _ in range(config.max_halvings):
            cand = space.project(theta + alpha * step)
            cand_value = _sse_arrays(xs, ys, model, cand)
            if cand_value < value:
                accepted = (cand, cand_value)
                break
            alpha *= 0.5
        if accepted is None:
            break
        moved = float(np.linalg.norm(accepted[0] - theta))
        theta, value = accepted
        if trace is not None:
            trace.append((theta.copy(), value))
        if moved < config.step_tol:
            break
    else:
        converged = False
    return theta, value, converged


def fit_ls(
    data: DataBatch,
    model: ModelSpec,
    space: ParameterSpace,
    config: FitConfig = FitConfig(),
    warm_start: Array | None = None,
    trace: list | None = None,
) -> LSFit:
    """Global-then-local least squares over the parameter box.

    The coarse phase scans a full-factorial grid (ties broken toward
    the lexicographically smallest grid index); the winner seeds the
    local descent.  A warm start, when given, seeds one extra descent
    and the better endpoint wins.
    """
    theta_grid = space.sample_grid(config.grid_points_per_axis)
    values = _grid_sse(data.xs, data.ys, model, theta_grid)
    if not np.any(np.isfinite(values)):
        raise FitFailureError("objective is non-finite on the whole parameter grid")
    g_idx = int(np.argmin(values))
    g_min = float(values[g_idx])
    tie_tol = 1e-9 * (1.0 + abs(g_min))
    grid_tie = bool(np.sum(values <= g_min + tie_tol) > 1)
    grid_minimum = theta_grid[g_idx].copy()

    theta, value, converged = _gauss_newton(
        data.xs, data.ys, model, space, grid_minimum, config, trace
    )
    if warm_start is not None:
        theta_w, value_w, conv_w = _gauss_newton(
            data.xs, data.ys, model, space, np.asarray(warm_start, dtype=float), config
        )
        if value_w < value:
            theta, value, converged = theta_w, value_w, conv_w
    return LSFit(
        theta_hat=theta,
        sse_value=value,
        sigma2_hat=value / data.n,
        converged=converged,
        grid_minimum=grid_minimum,
        grid_tie=grid_tie,
    )


class SequentialLS:
    """Incrementally updated least squares for the adaptive loop.

    The coarse-grid objective is maintained as a running sum, so each
    refit costs O(grid) for the scan plus one descent over the full
    data.  The descent is seeded by whichever of the scan winner and
    the previous estimate currently has the smaller objective.
    """

    def __init__(self, model: ModelSpec, space: ParameterSpace, config: FitConfig = FitConfig()):
        self.model = model
        self.space = space
        self.config = config
        self.theta_grid = space.sample_grid(config.grid_points_per_axis)
        self.grid_sse = np.zeros(self.theta_grid.shape[0])
        self._xs = np.empty((16, 0), dtype=float)
        self._ys = np.empty(16, dtype=float)
        self._n = 0
        self.previous: Array | None = None

    @property
    def n(self) -> int:
        return self._n

    def data_arrays(self) -> tuple[Array, Array]:
        return self._xs[: self._n], self._ys[: self._n]

    def update(self, x, y: float) -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self._xs.shape[1] == 0:
            self._xs = np.empty((16, x.size), dtype=float)
        if self._n == self._xs.shape[0]:
            grown_x = np.empty((2 * self._n, self._xs.shape[1]), dtype=float)
            grown_y = np.empty(2 * self._n, dtype=float)
            grown_x[: self._n] = self._xs[: self._n]
            grown_y[: self._n] = self._ys[: self._n]
            self._xs, self._ys = grown_x, grown_y
        self._xs[self._n] = x
        self._ys[self._n] = y
        self._n += 1
        mu = np.asarray(self.model.mu(x, self.theta_grid), dtype=float)
        contrib = (y - mu) ** 2
        contrib[~np.isfinite(contrib)] = np.inf
        self.grid_sse += contrib

    def estimate(self) -> LSFit:
        if self._n == 0:
            raise FitFailureError("no data to fit")
        if not np.any(np.isfinite(self.grid_sse)):
            raise FitFailureError("objective is non-finite on the whole parameter grid")
        xs, ys = self.data_arrays()
        g_idx = int(np.argmin(self.grid_sse))
        g_min = float(self.grid_sse[g_idx])
        tie_tol = 1e-9 * (1.0 + abs(g_min))
        grid_tie = bool(np.sum(self.grid_sse <= g_min + tie_tol) > 1)
        grid_minimum = self.theta_grid[g_idx].copy()

        seed = grid_minimum
        if self.previous is not None and _sse_arrays(xs, ys, self.model, self.previous) < g_min:
            seed = self.previous
        theta, value, converged = _gauss_newton(
            xs, ys, self.model, self.space, seed, self.config
        )
        self.previous = theta
        return LSFit(
            theta_hat=theta,
            sse_value=value,
            sigma2_hat=value / self._n,
            converged=converged,
            grid_minimum=grid_minimum,
            grid_tie=grid_tie,
        )

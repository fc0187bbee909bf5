"""The adaptive sequential design loop.

Each iteration evaluates the sensitivity function at the current
parameter estimate, takes an observation at its maximizer over the scan
grid, refreshes the estimate, and updates the empirical design.  A
starting design certified positive definite across a parameter sample
makes every later information matrix positive definite by induction,
since each update is a convex combination with a rank-one term.

The estimate entering the argmax may come from any adaptive estimator;
the default refits least squares after every observation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .design import Design, design_from_counts
from .errors import (
    AcquisitionError,
    DomainError,
    InitializationError,
    SingularMatrixError,
)
from .estimator import DataBatch, FitConfig, LSFit, SequentialLS, fit_ls
from .model import Box, DesignSpace, ModelSpec, ParameterSpace
from .noise import ErrorProcess, ErrorSpec, make_rng, next_error

Array = np.ndarray

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_COMBO_CAP = 200000


# --------------------------------------------------------------------------
# Configuration, sources, estimators
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WynnConfig:
    """Settings for one adaptive run.

    ``n_max`` counts total observations including the starting design.
    ``refresh_every`` > 1 re-estimates only every k-th step, a speed
    knob that deviates from the per-step refresh of the default.
    """

    n_max: int
    pd_floor: float = 1e-8
    polish: bool = False
    refresh_every: int = 1
    theta_check_points_per_axis: int = 5
    fit: FitConfig = field(default_factory=FitConfig)
    estimator: str = "ls"

    def __post_init__(self):
        if self.n_max < 1:
            raise DomainError("n_max must be >= 1")
        if self.refresh_every < 1:
            raise DomainError("refresh_every must be >= 1")
        if self.pd_floor <= 0:
            raise DomainError("pd_floor must be positive")

    def to_jsonable(self) -> dict:
        return {
            "n_max": self.n_max,
            "pd_floor": self.pd_floor,
            "polish": self.polish,
            "refresh_every": self.refresh_every,
            "theta_check_points_per_axis": self.theta_check_points_per_axis,
            "fit": {
                "grid_points_per_axis": self.fit.grid_points_per_axis,
                "max_iterations": self.fit.max_iterations,
                "step_tol": self.fit.step_tol,
                "max_halvings": self.fit.max_halvings,
            },
            "estimator": self.estimator,
        }


class ResponseSource(Protocol):
    def observe(self, x: Array, step: int) -> float: ...


class SimulatedSource:
    """Responses from the model at a hidden true parameter plus noise."""

    def __init__(
        self,
        model: ModelSpec,
        theta_bar: Array,
        noise: ErrorSpec,
        rng: np.random.Generator,
    ):
        self._model = model
        self._theta_bar = np.asarray(theta_bar, dtype=float)
        self._process = ErrorProcess(noise)
        self._rng = rng

    def observe(self, x: Array, step: int) -> float:
        e = next_error(self._process, self._rng)
        return float(self._model.mu(np.atleast_1d(x), self._theta_bar)) + e


class ReplaySource:
    """Responses replayed from a fixed list, in order."""

    def __init__(self, values):
        self._values = [float(v) for v in values]
        self._cursor = 0

    def observe(self, x: Array, step: int) -> float:
        if self._cursor >= len(self._values):
            raise AcquisitionError(f"replay source exhausted after {self._cursor} responses")
        y = self._values[self._cursor]
        self._cursor += 1
        return y


class AdaptiveEstimator(Protocol):
    def update(self, x: Array, y: float) -> None: ...
    def estimate(self) -> Array: ...


class LSAdaptiveEstimator:
    """Default estimator: incremental least squares, refit on demand."""

    def __init__(self, model: ModelSpec, space: ParameterSpace, config: FitConfig):
        self._seq = SequentialLS(model, space, config)
        self.last_fit: Optional[LSFit] = None

    def update(self, x: Array, y: float) -> None:
        self._seq.update(x, y)

    def estimate(self) -> Array:
        fit = self._seq.estimate()
        self.last_fit = fit
        return fit.theta_hat


# --------------------------------------------------------------------------
# Initial design
# --------------------------------------------------------------------------


def _best_start_tuple(F_center: Array, p: int) -> list[int]:
    """Indices of the p-tuple maximizing |det| of stacked regressors.

    Exhaustive when the number of combinations is small enough,
    otherwise greedy volume maximization (largest row first, then the
    row with the largest component orthogonal to the current span).
    """
    m = F_center.shape[0]
    if p == 1:
        return [int(np.argmax(np.abs(F_center[:, 0])))]
    if p == 2:
        dets = np.abs(
            F_center[:, None, 0] * F_center[None, :, 1]
            - F_center[:, None, 1] * F_center[None, :, 0]
        )
        i, j = np.unravel_index(int(np.argmax(dets)), dets.shape)
        return [int(i), int(j)]
    if math.comb(m, p) <= _COMBO_CAP:
        best, best_val = None, -1.0
        for combo in itertools.combinations(range(m), p):
            val = abs(np.linalg.det(F_center[list(combo)]))
            if val > best_val:
                best, best_val = list(combo), val
        return best
    chosen = [int(np.argmax((F_center**2).sum(axis=1)))]
    basis = F_center[chosen[0]][None, :] / np.linalg.norm(F_center[chosen[0]])
    for _ in range(p - 1):
        resid = F_center - (F_center @ basis.T) @ basis
        idx = int(np.argmax((resid**2).sum(axis=1)))
        chosen.append(idx)
        v = resid[idx]
        basis = np.vstack([basis, v / np.linalg.norm(v)])
    return chosen


def build_initial_design(
    model: ModelSpec,
    space: ParameterSpace,
    grid: Array,
    theta_check_sample: Array,
    pd_floor: float = 1e-8,
) -> Array:
    """Starting points whose uniform design is positive definite.

    Certification is numeric: the smallest eigenvalue of the averaged
    information matrix must clear ``pd_floor`` for every parameter in
    ``theta_check_sample``.  Construction is greedy; for p = 1 the
    start point maximizes the worst-case squared regressor directly.
    Points are added until the floor is cleared or the addition budget
    10 * p * len(sample) runs out.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    theta_check_sample = np.atleast_2d(np.asarray(theta_check_sample, dtype=float))
    m = grid.shape[0]
    p = model.p
    if m < p:
        raise InitializationError(f"grid has {m} points, fewer than p = {p}")

    F_sample = np.stack(
        [np.asarray(model.f(grid, th), dtype=float) for th in theta_check_sample]
    )  # (S, m, p)

    if p == 1:
        worst_sq = (F_sample[:, :, 0] ** 2).min(axis=0)
        chosen = [int(np.argmax(worst_sq))]
    else:
        F_center = np.asarray(model.f(grid, space.center()), dtype=float)
        chosen = _best_start_tuple(F_center, p)

    outer = np.einsum("smi,smj->smij", F_sample, F_sample)  # (S, m, p, p)
    B = outer[:, chosen, :, :].sum(axis=1)  # (S, p, p)

    def certified(B_now: Array, count: int) -> float:
        eigs = np.linalg.eigvalsh(B_now / count)
        return float(eigs[:, 0].min())

    budget = 10 * p * theta_check_sample.shape[0]
    while certified(B, len(chosen)) <= pd_floor:
        if len(chosen) - p >= budget:
            raise InitializationError(
                f"could not clear pd_floor {pd_floor:.1e} after {len(chosen)} points; "
                f"worst-case min eigenvalue {certified(B, len(chosen)):.3e}; "
                "the scan grid or the parameter sample is probably too coarse"
            )
        cand = (B[:, None, :, :] + outer) / (len(chosen) + 1.0)  # (S, m, p, p)
        lam = np.linalg.eigvalsh(cand)[..., 0]  # (S, m)
        worst = lam.min(axis=0)  # (m,)
        chosen.append(int(np.argmax(worst)))
        B = B + outer[:, chosen[-1], :, :]
    return grid[chosen].copy()


# --------------------------------------------------------------------------
# Run state and trajectory records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    """One iteration: state at stage n and the transition to n + 1."""

    n: int
    x_next: tuple[float, ...]
    theta: tuple[float, ...]
    logdet: float
    max_d: float
    y_next: float


class WynnState:
    """Mutable single-run state; one writer per run."""

    def __init__(
        self,
        model: ModelSpec,
        design_space: DesignSpace,
        parameter_space: ParameterSpace,
        config: WynnConfig,
        estimator: AdaptiveEstimator,
    ):
        self.model = model
        self.design_space = design_space
        self.parameter_space = parameter_space
        self.config = config
        self.estimator = estimator
        self.grid = design_space.grid()
        k = self.grid.shape[1]
        self.xs = np.empty((64, k), dtype=float)
        self.ys = np.empty(64, dtype=float)
        self.n = 0
        self._support = np.empty((64, k), dtype=float)
        self._counts = np.zeros(64, dtype=np.int64)
        self._n_support = 0
        self._index: dict[bytes, int] = {}
        self.theta: Optional[Array] = None
        self.M: Optional[Array] = None
        self.records: list[StepRecord] = []
        self.estimates: list[Array] = []
        self.n_start = 0
        self._steps_since_refresh = 0

    # -- bookkeeping ---------------------------------------------------

    def _append(self, x: Array, y: float) -> None:
        if self.n == self.xs.shape[0]:
            self.xs = np.vstack([self.xs, np.empty_like(self.xs)])
            self.ys = np.concatenate([self.ys, np.empty_like(self.ys)])
        self.xs[self.n] = x
        self.ys[self.n] = y
        self.n += 1
        key = x.tobytes()
        idx = self._index.get(key)
        if idx is None:
            # fall back to a tolerance scan; non-grid points may repeat
            # with tiny representation differences
            sup = self._support[: self._n_support]
            if self._n_support:
                d2 = ((sup - x) ** 2).sum(axis=1)
                hit = int(np.argmin(d2))
                if d2[hit] <= 1e-24:
                    idx = hit
        if idx is None:
            if self._n_support == self._support.shape[0]:
                self._support = np.vstack([self._support, np.empty_like(self._support)])
                self._counts = np.concatenate([self._counts, np.zeros_like(self._counts)])
            idx = self._n_support
            self._support[idx] = x
            self._index[key] = idx
            self._n_support += 1
        self._counts[idx] += 1

    def support_arrays(self) -> tuple[Array, Array]:
        return self._support[: self._n_support], self._counts[: self._n_support]

    def design(self) -> Design:
        sup, counts = self.support_arrays()
        return design_from_counts(sup.copy(), counts.copy())

    def weights(self) -> Array:
        sup, counts = self.support_arrays()
        return counts / float(self.n)

    def compute_info(self, theta: Array) -> Array:
        sup, counts = self.support_arrays()
        F = np.asarray(self.model.f(sup, theta), dtype=float)
        M = (F * (counts / float(self.n))[:, None]).T @ F
        return 0.5 * (M + M.T)

    def data_batch(self) -> DataBatch:
        return DataBatch(self.xs[: self.n].copy(), self.ys[: self.n].copy())

    def _refresh(self, force: bool = False) -> None:
        self._steps_since_refresh += 1
        if force or self._steps_since_refresh >= self.config.refresh_every:
            self.theta = self.estimator.estimate()
            self._steps_since_refresh = 0
        self.estimates.append(np.asarray(self.theta, dtype=float).copy())
        self.M = self.compute_info(self.theta)


def _eigh_checked(M: Array, floor: float) -> tuple[Array, float]:
    eigvals, eigvecs = np.linalg.eigh(M)
    if eigvals[0] <= floor:
        raise SingularMatrixError(
            "information matrix fell below the positive-definiteness floor",
            float(eigvals[0]),
        )
    Minv = (eigvecs / eigvals) @ eigvecs.T
    return Minv, float(np.log(eigvals).sum())


def _polish_point(state: WynnState, x0: Array, Minv: Array, d0: float) -> tuple[Array, float]:
    """Golden-section sweep per axis around a grid argmax (Box spaces)."""
    space = state.design_space
    if not isinstance(space, Box):
        return x0, d0
    model, theta = state.model, state.theta

    def d_at(x: Array) -> float:
        f = np.asarray(model.f(x, theta), dtype=float)
        return float(f @ Minv @ f)

    best_x, best_d = x0.copy(), d0
    for axis in range(space.dimension):
        h = (space.upper[axis] - space.lower[axis]) / (space.grid_resolution[axis] - 1)
        lo = max(space.lower[axis], best_x[axis] - h)
        hi = min(space.upper[axis], best_x[axis] + h)
        a, b = lo, hi
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        xc, xd = best_x.copy(), best_x.copy()
        for _ in range(40):
            xc[axis], xd[axis] = c, d
            if d_at(xc) > d_at(xd):
                b, d = d, c
                c = b - _GOLDEN * (b - a)
            else:
                a, c = c, d
                d = a + _GOLDEN * (b - a)
        mid = best_x.copy()
        mid[axis] = 0.5 * (a + b)
        val = d_at(mid)
        if val > best_d:
            best_x, best_d = mid, val
    return best_x, best_d


def wynn_step(state: WynnState, response_source: ResponseSource) -> WynnState:
    """One iteration: argmax the sensitivity, observe, refit, update."""
    if state.theta is None or state.M is None:
        raise DomainError("state is not initialized")
    Minv, logdet = _eigh_checked(state.M, state.config.pd_floor)
    F_grid = np.asarray(state.model.f(state.grid, state.theta), dtype=float)
    d = np.einsum("ij,jk,ik->i", F_grid, Minv, F_grid)
    idx = int(np.argmax(d))
    x_next = state.grid[idx].copy()
    max_d = float(d[idx])
    if state.config.polish:
        x_next, max_d = _polish_point(state, x_next, Minv, max_d)

    n_before = state.n
    theta_before = np.asarray(state.theta, dtype=float).copy()
    y_next = response_source.observe(x_next, n_before + 1)

    state._append(x_next, float(y_next))
    state.estimator.update(x_next, float(y_next))
    state._refresh()
    state.records.append(
        StepRecord(
            n=n_before,
            x_next=tuple(float(v) for v in x_next),
            theta=tuple(float(v) for v in theta_before),
            logdet=logdet,
            max_d=max_d,
            y_next=float(y_next),
        )
    )
    return state


@dataclass(frozen=True)
class Trajectory:
    """Complete record of one adaptive run."""

    model_name: str
    seed: int
    config_echo: dict
    n_start: int
    points: Array
    responses: Array
    estimates: Array
    records: tuple[StepRecord, ...]
    final_fit: Optional[LSFit]
    design_space_echo: dict
    parameter_space_echo: dict

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def p(self) -> int:
        if self.estimates.ndim == 2 and self.estimates.shape[1]:
            return self.estimates.shape[1]
        if self.records:
            return len(self.records[0].theta)
        lower = self.parameter_space_echo.get("lower")
        return len(lower) if lower else 1

    def design_points(self, n: Optional[int] = None) -> Array:
        return self.points[: (self.n if n is None else n)]

    def to_jsonable(self) -> dict:
        return {
            "schema": "adwynn.trajectory.v1",
            "model": self.model_name,
            "seed": self.seed,
            "config": self.config_echo,
            "design_space": self.design_space_echo,
            "parameter_space": self.parameter_space_echo,
            "n_start": self.n_start,
            "points": [list(map(float, row)) for row in self.points],
            "responses": [float(v) for v in self.responses],
            "estimates": [list(map(float, row)) for row in self.estimates],
            "records": [
                {
                    "n": r.n,
                    "x_next": list(r.x_next),
                    "theta": list(r.theta),
                    "logdet": r.logdet,
                    "max_d": r.max_d,
                    "y_next": r.y_next,
                }
                for r in self.records
            ],
            "final_fit": None
            if self.final_fit is None
            else {
                "theta_hat": [float(v) for v in self.final_fit.theta_hat],
                "sse_value": self.final_fit.sse_value,
                "sigma2_hat": self.final_fit.sigma2_hat,
                "converged": self.final_fit.converged,
                "grid_minimum": [float(v) for v in self.final_fit.grid_minimum],
                "grid_tie": self.final_fit.grid_tie,
            },
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "Trajectory":
        fit = obj.get("final_fit")
        final_fit = (
            None
            if fit is None
            else LSFit(
                theta_hat=np.asarray(fit["theta_hat"], dtype=float),
                sse_value=float(fit["sse_value"]),
                sigma2_hat=float(fit["sigma2_hat"]),
                converged=bool(fit["converged"]),
                grid_minimum=np.asarray(fit["grid_minimum"], dtype=float),
                grid_tie=bool(fit["grid_tie"]),
            )
        )
        points = np.asarray(obj["points"], dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        estimates = np.asarray(obj["estimates"], dtype=float)
        if estimates.size == 0:
            estimates = np.zeros((0, 1))
        return Trajectory(
            model_name=obj["model"],
            seed=int(obj["seed"]),
            config_echo=obj["config"],
            n_start=int(obj["n_start"]),
            points=points,
            responses=np.asarray(obj["responses"], dtype=float),
            estimates=estimates,
            records=tuple(
                StepRecord(
                    n=int(r["n"]),
                    x_next=tuple(float(v) for v in r["x_next"]),
                    theta=tuple(float(v) for v in r["theta"]),
                    logdet=float(r["logdet"]),
                    max_d=float(r["max_d"]),
                    y_next=float(r["y_next"]),
                )
                for r in obj["records"]
            ),
            final_fit=final_fit,
            design_space_echo=obj.get("design_space", {}),
            parameter_space_echo=obj.get("parameter_space", {}),
        )

    def csv_rows(self) -> tuple[list[str], list[list[str]]]:
        k = self.points.shape[1] if self.points.ndim == 2 and self.points.shape[1] else 1
        if self.estimates.ndim == 2 and self.estimates.shape[1]:
            p = self.estimates.shape[1]
        elif self.records:
            p = len(self.records[0].theta)
        else:
            p = 1
        header = (
            ["n"]
            + [f"x{j}" for j in range(k)]
            + ["y"]
            + [f"theta{j}" for j in range(p)]
            + ["logdet", "max_d"]
        )
        rows = []
        for r in self.records:
            rows.append(
                [repr(r.n)]
                + [repr(v) for v in r.x_next]
                + [repr(r.y_next)]
                + [repr(v) for v in r.theta]
                + [repr(r.logdet), repr(r.max_d)]
            )
        return header, rows


def _space_echo(space: DesignSpace) -> dict:
    if isinstance(space, Box):
        return {
            "kind": "box",
            "lower": [float(v) for v in space.lower],
            "upper": [float(v) for v in space.upper],
            "grid_resolution": list(space.grid_resolution),
        }
    return {"kind": "finite", "points": [list(map(float, row)) for row in space.points]}


def initialize_state(
    model: ModelSpec,
    design_space: DesignSpace,
    parameter_space: ParameterSpace,
    config: WynnConfig,
    response_source: ResponseSource,
    estimator: Optional[AdaptiveEstimator] = None,
) -> WynnState:
    """Build the starting design, take its observations, and fit once."""
    if estimator is None:
        if config.estimator != "ls":
            raise DomainError(
                f"unknown estimator selector {config.estimator!r}; pass an "
                "estimator object for custom adaptive estimators"
            )
        estimator = LSAdaptiveEstimator(model, parameter_space, config.fit)
    state = WynnState(model, design_space, parameter_space, config, estimator)
    theta_sample = parameter_space.sample_grid(config.theta_check_points_per_axis)
    initial = build_initial_design(
        model, parameter_space, state.grid, theta_sample, config.pd_floor
    )
    if config.n_max < initial.shape[0]:
        raise DomainError(
            f"n_max = {config.n_max} is below the starting design size {initial.shape[0]}"
        )
    for i, x in enumerate(initial):
        y = response_source.observe(x, i + 1)
        state._append(np.asarray(x, dtype=float), float(y))
        state.estimator.update(np.asarray(x, dtype=float), float(y))
    state.n_start = state.n
    state._refresh(force=True)
    return state


def run(
    model: ModelSpec,
    design_space: DesignSpace,
    parameter_space: ParameterSpace,
    config: WynnConfig,
    response_source: ResponseSource,
    seed: int,
    estimator: Optional[AdaptiveEstimator] = None,
) -> Trajectory:
    """Execute initialization plus n_max - n_start iterations."""
    state = initialize_state(
        model, design_space, parameter_space, config, response_source, estimator
    )
    while state.n < config.n_max:
        wynn_step(state, response_source)
    final_fit = fit_ls(
        state.data_batch(), model, parameter_space, config.fit, warm_start=state.theta
    )
    return Trajectory(
        model_name=model.name,
        seed=int(seed),
        config_echo=config.to_jsonable(),
        n_start=state.n_start,
        points=state.xs[: state.n].copy(),
        responses=state.ys[: state.n].copy(),
        estimates=np.asarray(state.estimates, dtype=float),
        records=tuple(state.records),
        final_fit=final_fit,
        design_space_echo=_space_echo(design_space),
        parameter_space_echo={
            "lower": [float(v) for v in parameter_space.lower],
            "upper": [float(v) for v in parameter_space.upper],
        },
    )


# --------------------------------------------------------------------------
# Simulation scenarios
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """A fully specified simulated experiment."""

    model: ModelSpec
    design_space: DesignSpace
    parameter_space: ParameterSpace
    theta_bar: Array
    noise: ErrorSpec
    config: WynnConfig

    def __post_init__(self):
        theta = np.asarray(self.theta_bar, dtype=float)
        if not self.parameter_space.contains(theta):
            raise DomainError("theta_bar must lie in the parameter space")
        object.__setattr__(self, "theta_bar", theta)


def simulate_trajectory(scenario: Scenario, seed: int) -> Trajectory:
    """Deterministic adaptive run under the scenario's noise at the seed."""
    source = SimulatedSource(
        scenario.model, scenario.theta_bar, scenario.noise, make_rng(seed)
    )
    return run(
        scenario.model,
        scenario.design_space,
        scenario.parameter_space,
        scenario.config,
        source,
        seed,
    )

"""Regression models on compact design and parameter boxes.

A model is a mean response ``mu(x, theta)`` together with a regressor
family ``f(x, theta)`` in R^p whose outer products form the elementary
information matrices.  Design spaces are either finite point sets or
axis-aligned boxes equipped with a scan grid; parameter spaces are
compact boxes.  The module also provides numeric falsification checks
for the structural conditions the asymptotic theory relies on: the
regressor image spanning R^p, and identifiability of the parameter from
responses at p distinct points.

Evaluator convention: ``mu`` and ``f`` broadcast over leading axes of
both arguments, i.e. ``mu(x[(m, k)], theta[(p,)]) -> (m,)`` and
``mu(x[(k,)], theta[(G, p)]) -> (G,)``.  ``f`` appends the parameter
axis last: ``f(x[(m, k)], theta[(p,)]) -> (m, p)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError

Array = np.ndarray

_CONTAINS_TOL = 1e-9


def _freeze(a: Array) -> Array:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def as_point(x, k: int) -> Array:
    """Normalize a point to a (k,) float array; scalars allowed when k == 1."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (k,):
        raise DomainError(f"expected a point in R^{k}, got shape {arr.shape}")
    return arr


def as_theta(theta, p: int) -> Array:
    arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if arr.shape != (p,):
        raise DomainError(f"expected a parameter in R^{p}, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# Spaces
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteSet:
    """Finite experimental region: a list of distinct points in R^k."""

    points: Array

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DomainError("FiniteSet needs a nonempty (m, k) point array")
        if not np.all(np.isfinite(pts)):
            raise DomainError("FiniteSet points must be finite")
        diffs = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diffs**2).sum(axis=-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 0.0:
            raise DomainError("FiniteSet points must be pairwise distinct")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def grid(self) -> Array:
        """Scan grid; for a finite set this is the set itself."""
        return self.points

    def contains(self, x, tol: float = _CONTAINS_TOL) -> bool:
        x = as_point(x, self.dimension)
        d = np.sqrt(((self.points - x) ** 2).sum(axis=1))
        return bool(d.min() <= tol)

    def diameter(self) -> float:
        diffs = self.points[:, None, :] - self.points[None, :, :]
        return float(np.sqrt((diffs**2).sum(axis=-1)).max())


@dataclass(frozen=True)
class Box:
    """Axis-aligned box region with a per-axis scan-grid resolution."""

    lower: Array
    upper: Array
    grid_resolution: tuple[int, ...]

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise DomainError("Box bounds must be matching nonempty vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("Box bounds must be finite")
        if not np.all(lo < hi):
            raise DomainError("Box requires lower[j] < upper[j] for all axes")
        res = tuple(int(r) for r in np.atleast_1d(self.grid_resolution))
        if len(res) == 1 and lo.size > 1:
            res = res * lo.size
        if len(res) != lo.size or any(r < 2 for r in res):
            raise DomainError("grid resolution must be >= 2 per axis")
        object.__setattr__(self, "lower", _freeze(lo))
        object.__setattr__(self, "upper", _freeze(hi))
        object.__setattr__(self, "grid_resolution", res)

    @property
    def dimension(self) -> int:
        return self.lower.size

    def grid(self) -> Array:
        """Full-factorial scan grid, lexicographic in the axis coordinates."""
        axes = [
            np.linspace(self.lower[j], self.upper[j], self.grid_resolution[j])
            for j in range(self.dimension)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def contains(self, x, tol: float = _CONTAINS_TOL) -> bool:
        x = as_point(x, self.dimension)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def diameter(self) -> float:
        return float(np.sqrt(((self.upper - self.lower) ** 2).sum()))


DesignSpace = Union[FiniteSet, Box]


@dataclass(frozen=True)
class ParameterSpace:
    """Compact parameter box in R^p."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise DomainError("parameter bounds must be matching nonempty vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("parameter bounds must be finite")
        if not np.all(lo <= hi):
            raise DomainError("parameter box requires lower[j] <= upper[j]")
        object.__setattr__(self, "lower", _freeze(lo))
        object.__setattr__(self, "upper", _freeze(hi))

    @property
    def p(self) -> int:
        return self.lower.size

    def center(self) -> Array:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol: float = _CONTAINS_TOL) -> bool:
        theta = as_theta(theta, self.p)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def on_boundary(self, theta, tol: float = 1e-12) -> bool:
        theta = as_theta(theta, self.p)
        return bool(
            np.any(np.abs(theta - self.lower) <= tol)
            or np.any(np.abs(theta - self.upper) <= tol)
        )

    def project(self, theta) -> Array:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def sample_grid(self, points_per_axis: int = 5) -> Array:
        """Deterministic full-factorial sample, (points_per_axis**p, p)."""
        axes = [
            np.linspace(self.lower[j], self.upper[j], points_per_axis)
            for j in range(self.p)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def sample_uniform(self, count: int, rng: np.random.Generator) -> Array:
        return rng.uniform(self.lower, self.upper, size=(count, self.p))


# --------------------------------------------------------------------------
# Model specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """A mean response with its regressor family.

    ``gradient_is_mu_gradient`` asserts that ``f`` is the parameter
    gradient of ``mu``; all built-in models satisfy this and the
    normality statistics require it.
    """

    name: str
    p: int
    mu: Callable[[Array, Array], Array]
    f: Callable[[Array, Array], Array]
    hessian: Optional[Callable[[Array, Array], Array]] = None
    gradient_is_mu_gradient: bool = True

    def __post_init__(self):
        if self.p < 1:
            raise DomainError("parameter dimension must be >= 1")


def eval_mu(
    model: ModelSpec,
    x,
    theta,
    design_space: Optional[DesignSpace] = None,
    parameter_space: Optional[ParameterSpace] = None,
) -> float:
    """Mean response at a single point/parameter, with optional domain checks."""
    k = design_space.dimension if design_space is not None else np.atleast_1d(np.asarray(x)).size
    x = as_point(x, k)
    theta = as_theta(theta, model.p)
    if design_space is not None and not design_space.contains(x):
        raise DomainError(f"point {x.tolist()} outside the design space")
    if parameter_space is not None and not parameter_space.contains(theta):
        raise DomainError(f"parameter {theta.tolist()} outside the parameter space")
    value = float(np.asarray(model.mu(x, theta)))
    if not np.isfinite(value):
        raise DomainError(f"mu({x.tolist()}, {theta.tolist()}) is not finite")
    return value


def eval_f(
    model: ModelSpec,
    x,
    theta,
    design_space: Optional[DesignSpace] = None,
    parameter_space: Optional[ParameterSpace] = None,
) -> Array:
    """Regressor vector at a single point/parameter, with optional domain checks."""
    k = design_space.dimension if design_space is not None else np.atleast_1d(np.asarray(x)).size
    x = as_point(x, k)
    theta = as_theta(theta, model.p)
    if design_space is not None and not design_space.contains(x):
        raise DomainError(f"point {x.tolist()} outside the design space")
    if parameter_space is not None and not parameter_space.contains(theta):
        raise DomainError(f"parameter {theta.tolist()} outside the parameter space")
    vec = np.asarray(model.f(x, theta), dtype=float)
    if vec.shape != (model.p,):
        raise DomainError(f"f returned shape {vec.shape}, expected ({model.p},)")
    if not np.all(np.isfinite(vec)):
        raise DomainError(f"f({x.tolist()}, {theta.tolist()}) is not finite")
    return vec


# --------------------------------------------------------------------------
# Structural-condition checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpanReport:
    """Per-parameter smallest singular values of the stacked regressor matrix."""

    min_singular_values: tuple[float, ...]
    floor: float
    passed: bool


def check_span(
    model: ModelSpec,
    theta_sample: Array,
    grid: Array,
    floor: float = 1e-8,
) -> SpanReport:
    """Check that {f(x, theta) : x in grid} spans R^p for each sampled theta.

    Report-only: the smallest singular value of the (m, p) regressor
    matrix is compared against ``floor`` for every sampled parameter.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    theta_sample = np.atleast_2d(np.asarray(theta_sample, dtype=float))
    if grid.shape[0] < model.p:
        raise DomainError("span check needs at least p grid points")
    smallest = []
    for theta in theta_sample:
        F = np.asarray(model.f(grid, theta), dtype=float)
        svals = np.linalg.svd(F, compute_uv=False)
        smallest.append(float(svals[-1]))
    passed = all(s > floor for s in smallest)
    return SpanReport(tuple(smallest), floor, passed)


@dataclass(frozen=True)
class SIReport:
    """Sampled falsification of saturated identifiability.

    ``min_discrepancy`` is the smallest sum of squared mean-response
    differences over all sampled (theta, theta') pairs and p-tuples of
    distinct points.  A positive minimum cannot prove identifiability;
    a zero exposes a violation.
    """

    min_discrepancy: float
    floor: float
    passed: bool
    worst_pair: int
    worst_tuple: int


def check_si_numeric(
    model: ModelSpec,
    theta_pairs: Sequence[tuple[Array, Array]],
    point_tuples: Array,
    floor: float = 1e-12,
) -> SIReport:
    pairs_a = np.stack([as_theta(a, model.p) for a, _ in theta_pairs])
    pairs_b = np.stack([as_theta(b, model.p) for _, b in theta_pairs])
    tuples = np.asarray(point_tuples, dtype=float)
    if tuples.ndim == 2:
        tuples = tuples[..., None]
    # (n_pairs, n_tuples, arity) responses under each parameter of the pair
    xa = tuples[None, :, :, :]
    ta = pairs_a[:, None, None, :]
    tb = pairs_b[:, None, None, :]
    mu_a = np.asarray(model.mu(xa, ta), dtype=float)
    mu_b = np.asarray(model.mu(xa, tb), dtype=float)
    disc = ((mu_a - mu_b) ** 2).sum(axis=-1)
    flat = int(np.argmin(disc))
    worst_pair, worst_tuple = np.unravel_index(flat, disc.shape)
    min_disc = float(disc[worst_pair, worst_tuple])
    return SIReport(min_disc, floor, min_disc > floor, int(worst_pair), int(worst_tuple))


def sample_parameter_pairs(
    space: ParameterSpace,
    count: int,
    min_separation: float,
    rng: np.random.Generator,
    max_draws: int = 100000,
) -> list[tuple[Array, Array]]:
    """Uniform parameter pairs with separation >= min_separation."""
    pairs: list[tuple[Array, Array]] = []
    draws = 0
    while len(pairs) < count and draws < max_draws:
        a = rng.uniform(space.lower, space.upper)
        b = rng.uniform(space.lower, space.upper)
        draws += 1
        if np.linalg.norm(a - b) >= min_separation:
            pairs.append((a, b))
    if len(pairs) < count:
        raise DomainError("could not sample enough separated parameter pairs")
    return pairs


def sample_point_tuples(
    grid: Array,
    arity: int,
    count: int,
    rng: np.random.Generator,
) -> Array:
    """Tuples of pairwise-distinct grid points, shape (count, arity, k)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    m = grid.shape[0]
    if m < arity:
        raise DomainError("grid smaller than the requested tuple arity")
    idx = np.stack([rng.choice(m, size=arity, replace=False) for _ in range(count)])
    return grid[idx]


def check_finiteness(
    model: ModelSpec,
    design_space: DesignSpace,
    parameter_space: ParameterSpace,
    points_per_axis: int = 5,
) -> bool:
    """Evaluate mu and f over the scan grid x a parameter sample; all finite."""
    grid = design_space.grid()
    thetas = parameter_space.sample_grid(points_per_axis)
    for theta in thetas:
        mu = np.asarray(model.mu(grid, theta), dtype=float)
        F = np.asarray(model.f(grid, theta), dtype=float)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(F))):
            return False
    return True


def gradient_matches_mu(
    model: ModelSpec,
    design_space: DesignSpace,
    parameter_space: ParameterSpace,
    rel_tol: float = 1e-5,
    points_per_axis: int = 4,
    shrink: float = 0.2,
) -> float:
    """Worst relative deviation of f from central differences of mu.

    Parameters are sampled on an interior sub-box (shrunk by ``shrink``
    per axis) so that central steps stay inside the space.
    """
    lo = parameter_space.lower + shrink * (parameter_space.upper - parameter_space.lower)
    hi = parameter_space.upper - shrink * (parameter_space.upper - parameter_space.lower)
    inner = ParameterSpace(lo, np.maximum(hi, lo + 1e-12))
    thetas = inner.sample_grid(points_per_axis)
    grid = design_space.grid()
    sample = grid[:: max(1, grid.shape[0] // 12)]
    worst = 0.0
    for theta in thetas:
        for x in sample:
            g = np.asarray(model.f(x, theta), dtype=float)
            fd = np.empty_like(g)
            for j in range(model.p):
                h = 1e-6 * max(1.0, abs(theta[j]))
                tp = theta.copy()
                tm = theta.copy()
                tp[j] += h
                tm[j] -= h
                fd[j] = (float(model.mu(x, tp)) - float(model.mu(x, tm))) / (2 * h)
            scale = max(1.0, float(np.max(np.abs(g))))
            worst = max(worst, float(np.max(np.abs(g - fd))) / scale)
    if worst > rel_tol:
        raise DomainError(
            f"model {model.name}: f deviates from the mu gradient by {worst:.2e}"
        )
    return worst


# --------------------------------------------------------------------------
# Built-in catalog
# --------------------------------------------------------------------------


def _mm_mu(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    return th[..., 0] * x0 / (th[..., 1] + x0)


def _mm_f(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    den = th[..., 1] + x0
    g1, g2 = np.broadcast_arrays(x0 / den, -th[..., 0] * x0 / den**2)
    return np.stack([g1, g2], axis=-1)


def _mm_hessian(x, theta):
    x0 = float(np.asarray(x, dtype=float).reshape(-1)[0])
    t1, t2 = (float(v) for v in np.asarray(theta, dtype=float).reshape(-1))
    d = t2 + x0
    h12 = -x0 / d**2
    h22 = 2.0 * t1 * x0 / d**3
    return np.array([[0.0, h12], [h12, h22]])


def _expdecay_mu(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    return th[..., 0] * np.exp(-th[..., 1] * x0)


def _expdecay_f(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    e = np.exp(-th[..., 1] * x0)
    g1, g2 = np.broadcast_arrays(e, -th[..., 0] * x0 * e)
    return np.stack([g1, g2], axis=-1)


def _expdecay_hessian(x, theta):
    x0 = float(np.asarray(x, dtype=float).reshape(-1)[0])
    t1, t2 = (float(v) for v in np.asarray(theta, dtype=float).reshape(-1))
    e = np.exp(-t2 * x0)
    return np.array([[0.0, -x0 * e], [-x0 * e, t1 * x0 * x0 * e]])


def _poly_mu(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    p = th.shape[-1]
    out = np.zeros(np.broadcast_shapes(x0.shape, th[..., 0].shape))
    for j in range(p - 1, -1, -1):
        out = out * x0 + th[..., j]
    return out


def _poly_f(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    p = th.shape[-1]
    base = np.zeros(np.broadcast_shapes(x0.shape, th[..., 0].shape))
    return np.stack([base + x0**j for j in range(p)], axis=-1)


def _poly_hessian(x, theta):
    p = np.asarray(theta, dtype=float).reshape(-1).size
    return np.zeros((p, p))


def _exp1_mu(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    return np.exp(-th[..., 0] * x0)


def _exp1_f(x, theta):
    x0 = np.asarray(x, dtype=float)[..., 0]
    th = np.asarray(theta, dtype=float)
    g = -x0 * np.exp(-th[..., 0] * x0)
    return np.asarray(g)[..., None]


def _exp1_hessian(x, theta):
    x0 = float(np.asarray(x, dtype=float).reshape(-1)[0])
    t = float(np.asarray(theta, dtype=float).reshape(-1)[0])
    return np.array([[x0 * x0 * np.exp(-t * x0)]])


@dataclass(frozen=True)
class ModelBundle:
    """A model together with its documented default spaces."""

    model: ModelSpec
    design_space: DesignSpace
    parameter_space: ParameterSpace


def michaelis_menten(
    x_bounds: tuple[float, float] = (0.1, 3.0),
    grid_resolution: int = 201,
    theta_bounds: Sequence[tuple[float, float]] = ((0.2, 3.0), (0.2, 3.0)),
) -> ModelBundle:
    """Saturating response t1*x/(t2+x); identifiable from 2 points when t1 > 0."""
    model = ModelSpec("michaelis_menten", 2, _mm_mu, _mm_f, _mm_hessian)
    lo = [b[0] for b in theta_bounds]
    hi = [b[1] for b in theta_bounds]
    return ModelBundle(
        model,
        Box([x_bounds[0]], [x_bounds[1]], (grid_resolution,)),
        ParameterSpace(lo, hi),
    )


def exponential_decay(
    x_bounds: tuple[float, float] = (0.0, 2.0),
    grid_resolution: int = 201,
    theta_bounds: Sequence[tuple[float, float]] = ((0.5, 2.5), (0.5, 2.5)),
) -> ModelBundle:
    """Two-parameter decay t1*exp(-t2*x); identifiable when t1 > 0."""
    model = ModelSpec("exponential_decay", 2, _expdecay_mu, _expdecay_f, _expdecay_hessian)
    lo = [b[0] for b in theta_bounds]
    hi = [b[1] for b in theta_bounds]
    return ModelBundle(
        model,
        Box([x_bounds[0]], [x_bounds[1]], (grid_resolution,)),
        ParameterSpace(lo, hi),
    )


def polynomial(
    degree: int = 1,
    x_bounds: tuple[float, float] = (-1.0, 1.0),
    grid_resolution: int = 201,
    coef_bound: float = 2.0,
) -> ModelBundle:
    """Polynomial of the given degree; p = degree + 1 coefficients.

    Linear in the parameter, so the regressors (1, x, ..., x^degree) do
    not depend on theta and identifiability is interpolation uniqueness.
    """
    if degree < 0:
        raise DomainError("polynomial degree must be >= 0")
    p = degree + 1
    model = ModelSpec(f"polynomial_deg{degree}", p, _poly_mu, _poly_f, _poly_hessian)
    return ModelBundle(
        model,
        Box([x_bounds[0]], [x_bounds[1]], (grid_resolution,)),
        ParameterSpace([-coef_bound] * p, [coef_bound] * p),
    )


def one_param_exponential(
    x_bounds: tuple[float, float] = (0.5, 2.0),
    grid_resolution: int = 151,
    theta_bounds: tuple[float, float] = (0.5, 2.0),
) -> ModelBundle:
    """exp(-t*x) with a single rate parameter; exercises the p = 1 paths.

    The region is bounded away from x = 0, where the response would be
    constant in the parameter and identifiability would fail.
    """
    model = ModelSpec("one_param_exponential", 1, _exp1_mu, _exp1_f, _exp1_hessian)
    return ModelBundle(
        model,
        Box([x_bounds[0]], [x_bounds[1]], (grid_resolution,)),
        ParameterSpace([theta_bounds[0]], [theta_bounds[1]]),
    )


BUILTIN_MODELS: dict[str, Callable[..., ModelBundle]] = {
    "michaelis_menten": michaelis_menten,
    "exponential_decay": exponential_decay,
    "polynomial": polynomial,
    "one_param_exponential": one_param_exponential,
}


def builtin_bundle(name: str, **kwargs) -> ModelBundle:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        known = ", ".join(sorted(BUILTIN_MODELS))
        raise DomainError(f"unknown model {name!r}; known models: {known}") from None
    return factory(**kwargs)

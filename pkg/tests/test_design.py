from __future__ import annotations

import math

import numpy as np
import pytest

from adwynn.design import (
    Design,
    add_point,
    d_efficiency,
    design_from_counts,
    equivalence_gap,
    info_matrix,
    log_det,
    pd_inverse,
    rank_one_update,
    sensitivity,
    sensitivity_profile,
    solve_locally_d_optimal,
)
from adwynn.errors import ConvergenceError, DomainError, SingularMatrixError


def _random_design(grid, rng, size=5):
    idx = rng.choice(grid.shape[0], size=size, replace=False)
    w = rng.uniform(0.2, 1.0, size=size)
    return Design(grid[idx], w / w.sum())


# ---------------------------------------------------------------- Design type


def test_design_validation():
    with pytest.raises(DomainError):
        Design(np.array([[0.0]]), np.array([0.5]))  # weights must sum to 1
    with pytest.raises(DomainError):
        Design(np.array([[0.0], [0.0]]), np.array([0.5, 0.5]))  # duplicates
    with pytest.raises(DomainError):
        Design(np.array([[0.0], [1.0]]), np.array([1.5, -0.5]))  # negative weight


def test_design_json_roundtrip():
    d = Design(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]))
    d2 = Design.from_jsonable(d.to_jsonable())
    assert np.array_equal(d.support, d2.support)
    assert np.array_equal(d.weights, d2.weights)


# ---------------------------------------------------------------- info matrix


def test_info_matrix_rank_one(poly1_bundle):
    # single point at x = 2 has regressor (1, 2)
    d = Design(np.array([[2.0]]), np.array([1.0]))
    M = info_matrix(d, np.zeros(2), poly1_bundle.model)
    assert np.allclose(M, [[1.0, 2.0], [2.0, 4.0]], atol=1e-15)


def test_info_matrix_identity(poly1_bundle):
    d = Design(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    M = info_matrix(d, np.zeros(2), poly1_bundle.model)
    assert np.allclose(M, np.eye(2), atol=1e-15)


def test_info_matrix_against_fsum_oracle(mm_bundle, rng):
    grid = mm_bundle.design_space.grid()
    design = _random_design(grid, rng)
    theta = np.array([1.0, 1.0])
    M = info_matrix(design, theta, mm_bundle.model)
    # independent summation per entry in extended precision
    for a in range(2):
        for b in range(2):
            terms = []
            for x, w in zip(design.support, design.weights):
                f = np.asarray(mm_bundle.model.f(x, theta))
                terms.append(w * f[a] * f[b])
            assert M[a, b] == pytest.approx(math.fsum(terms), abs=1e-14)


def test_info_matrix_linear_in_weights(mm_bundle, rng):
    grid = mm_bundle.design_space.grid()
    theta = np.array([0.8, 1.7])
    d1 = _random_design(grid, rng, size=4)
    d2 = _random_design(grid, rng, size=6)
    alpha = 0.3
    support = np.vstack([d1.support, d2.support])
    weights = np.concatenate([alpha * d1.weights, (1 - alpha) * d2.weights])
    uniq, inverse = np.unique(support, axis=0, return_inverse=True)
    merged = np.zeros(uniq.shape[0])
    np.add.at(merged, inverse, weights)
    mix = Design(uniq, merged)
    M_mix = info_matrix(mix, theta, mm_bundle.model)
    M_lin = alpha * info_matrix(d1, theta, mm_bundle.model) + (1 - alpha) * info_matrix(
        d2, theta, mm_bundle.model
    )
    assert np.max(np.abs(M_mix - M_lin)) <= 1e-12


# ---------------------------------------------------------------- add_point


def test_add_point_basic():
    d = Design(np.array([[0.0]]), np.array([1.0]))
    d2 = add_point(d, [1.0], n=1)
    assert np.allclose(sorted(d2.weights), [0.5, 0.5])


def test_add_point_merges_existing():
    d = Design(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    d3 = add_point(d, [0.0], n=2)
    w = {float(x): float(wt) for x, wt in zip(d3.support.ravel(), d3.weights)}
    assert w[0.0] == pytest.approx(2.0 / 3.0)
    assert w[1.0] == pytest.approx(1.0 / 3.0)


def test_add_point_rejects_bad_n():
    d = Design(np.array([[0.0]]), np.array([1.0]))
    with pytest.raises(DomainError):
        add_point(d, [1.0], n=0)


def test_add_point_thousand_updates_exact(rng):
    # weights must equal multiplicity/n exactly, verified by recount
    points = rng.choice(np.linspace(0.0, 1.0, 11), size=1001)
    design = Design(np.array([[points[0]]]), np.array([1.0]))
    for n, x in enumerate(points[1:], start=1):
        design = add_point(design, [x], n=n)
    total = 1001
    counts = {}
    for x in points:
        counts[float(x)] = counts.get(float(x), 0) + 1
    for x, w in zip(design.support.ravel(), design.weights):
        assert w == counts[float(x)] / total  # bitwise: count/n exactly


# ---------------------------------------------------------------- rank-one update


def test_rank_one_shrink_only():
    M = rank_one_update(np.eye(2), np.zeros(2), n=1)
    assert np.allclose(M, 0.5 * np.eye(2))


def test_rank_one_from_zero():
    for n in (1, 3, 10):
        M = rank_one_update(np.zeros((2, 2)), np.array([1.0, 1.0]), n=n)
        assert np.allclose(M, np.ones((2, 2)) / (n + 1))


def test_rank_one_matches_recompute(mm_bundle, rng):
    grid = mm_bundle.design_space.grid()
    theta = np.array([1.3, 0.9])
    idx = rng.choice(grid.shape[0], size=202, replace=True)
    pts = grid[idx]
    start = pts[:2]
    M = info_matrix(design_from_counts(np.unique(start, axis=0),
                                       np.unique(start, axis=0, return_counts=True)[1]),
                    theta, mm_bundle.model)
    worst = 0.0
    for n in range(2, 202):
        f = np.asarray(mm_bundle.model.f(pts[n], theta))
        M = rank_one_update(M, f, n)
        uniq, counts = np.unique(pts[: n + 1], axis=0, return_counts=True)
        M_scratch = info_matrix(design_from_counts(uniq, counts), theta, mm_bundle.model)
        worst = max(worst, float(np.max(np.abs(M - M_scratch))))
    assert worst <= 1e-10


# ---------------------------------------------------------------- sensitivity


def test_sensitivity_identity(poly1_bundle):
    d = sensitivity([1.0], np.eye(2), np.zeros(2), poly1_bundle.model)
    assert d == pytest.approx(2.0)


def test_sensitivity_at_optimal_design(poly1_bundle):
    des = Design(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    M = info_matrix(des, np.zeros(2), poly1_bundle.model)
    assert sensitivity([1.0], M, np.zeros(2), poly1_bundle.model) == pytest.approx(2.0)


def test_sensitivity_three_point_design(poly1_bundle):
    # M = diag(1, 2/3) so d(x) = 1 + 1.5 x^2 from the explicit 2x2 inverse
    des = Design(np.array([[-1.0], [0.0], [1.0]]), np.full(3, 1.0 / 3.0))
    M = info_matrix(des, np.zeros(2), poly1_bundle.model)
    assert sensitivity([1.0], M, np.zeros(2), poly1_bundle.model) == pytest.approx(2.5)
    xs = np.linspace(-1, 1, 9)[:, None]
    prof = sensitivity_profile(xs, M, np.zeros(2), poly1_bundle.model)
    assert np.allclose(prof, 1.0 + 1.5 * xs.ravel() ** 2, atol=1e-12)


def test_sensitivity_singular_matrix_error(poly1_bundle):
    with pytest.raises(SingularMatrixError) as exc:
        sensitivity([1.0], np.zeros((2, 2)), np.zeros(2), poly1_bundle.model)
    assert exc.value.min_eigenvalue <= 0.0


def test_weighted_average_sensitivity_equals_p(mm_bundle, rng):
    grid = mm_bundle.design_space.grid()
    theta = np.array([1.0, 1.0])
    for _ in range(10):
        des = _random_design(grid, rng, size=6)
        M = info_matrix(des, theta, mm_bundle.model)
        d = sensitivity_profile(des.support, M, theta, mm_bundle.model)
        assert float(des.weights @ d) == pytest.approx(2.0, abs=1e-8)


# ---------------------------------------------------------------- log det


def test_log_det_examples():
    assert log_det(np.eye(2)) == pytest.approx(0.0)
    assert log_det(np.diag([2.0, 8.0])) == pytest.approx(np.log(16.0))
    with pytest.raises(SingularMatrixError):
        log_det(np.diag([1.0, 0.0]))


def test_log_det_eigenvalue_product_oracle(rng):
    A = rng.standard_normal((4, 4))
    M = A.T @ A + 0.5 * np.eye(4)
    eigs = np.linalg.eigvalsh(M)
    assert log_det(M) == pytest.approx(float(np.log(np.prod(eigs))), abs=1e-10)


def test_pd_inverse_floor():
    with pytest.raises(SingularMatrixError):
        pd_inverse(np.diag([1.0, 1e-13]))
    Minv = pd_inverse(np.diag([2.0, 4.0]))
    assert np.allclose(Minv, np.diag([0.5, 0.25]))


# ---------------------------------------------------------------- oracle


def test_oracle_polynomial_brute_force(poly1_bundle):
    grid = poly1_bundle.design_space.grid()
    theta = np.zeros(2)
    des = solve_locally_d_optimal(poly1_bundle.model, theta, grid, tol=1e-6)
    # brute force over two-point designs on a grid subsample with endpoints
    idx = np.unique(np.r_[0 : grid.shape[0] : 4, grid.shape[0] - 1])
    best = -np.inf
    best_pair = None
    for i in idx:
        for j in idx[idx > i]:
            for w in np.linspace(0.05, 0.95, 19):
                det = w * (1 - w) * (grid[j, 0] - grid[i, 0]) ** 2
                if det > best:
                    best, best_pair = det, (grid[i, 0], grid[j, 0], w)
    assert best_pair[:2] == (-1.0, 1.0)
    assert best_pair[2] == pytest.approx(0.5)
    ld = log_det(info_matrix(des, theta, poly1_bundle.model))
    assert ld >= np.log(best) - 1e-4
    w = {round(float(x), 6): float(wt) for x, wt in zip(des.support.ravel(), des.weights)}
    assert w.get(-1.0, 0.0) == pytest.approx(0.5, abs=1e-3)
    assert w.get(1.0, 0.0) == pytest.approx(0.5, abs=1e-3)
    assert equivalence_gap(des, theta, poly1_bundle.model, grid) <= 2e-6


def test_oracle_p1_is_pointwise_max(exp1_bundle):
    grid = exp1_bundle.design_space.grid()
    theta = np.array([1.0])
    des = solve_locally_d_optimal(exp1_bundle.model, theta, grid, tol=1e-6)
    assert des.size == 1
    F = np.asarray(exp1_bundle.model.f(grid, theta))
    assert des.support[0, 0] == grid[int(np.argmax(F[:, 0] ** 2)), 0]
    assert equivalence_gap(des, theta, exp1_bundle.model, grid) == pytest.approx(0.0, abs=1e-15)


def test_oracle_michaelis_menten_certificate(mm_bundle):
    grid = mm_bundle.design_space.grid()
    theta = np.array([1.0, 1.0])
    des = solve_locally_d_optimal(mm_bundle.model, theta, grid, tol=1e-4)
    gap = equivalence_gap(des, theta, mm_bundle.model, grid)
    assert gap <= 1e-4 * 2
    # max sensitivity over the grid stays below p * (1 + tol)
    M = info_matrix(des, theta, mm_bundle.model)
    prof = sensitivity_profile(grid, M, theta, mm_bundle.model)
    assert prof.max() <= 2.0 * (1 + 1e-4)
    # one support point sits at the upper end of the region
    assert np.any(np.isclose(des.support.ravel(), 3.0))


def test_oracle_unattainable_tolerance(mm_bundle):
    grid = mm_bundle.design_space.grid()
    with pytest.raises(ConvergenceError) as exc:
        solve_locally_d_optimal(
            mm_bundle.model, np.array([1.0, 1.0]), grid, tol=0.0, max_iterations=200
        )
    assert exc.value.gap > 0


# ---------------------------------------------------------------- efficiency


def test_defficiency_identity(poly1_bundle):
    des = Design(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    assert d_efficiency(des, des, np.zeros(2), poly1_bundle.model) == pytest.approx(1.0)


def test_defficiency_strictly_suboptimal(poly1_bundle):
    ref = Design(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    worse = Design(np.array([[-1.0], [0.99]]), np.array([0.5, 0.5]))
    assert d_efficiency(worse, ref, np.zeros(2), poly1_bundle.model) < 1.0


def test_defficiency_never_exceeds_one_against_exact_optimum(poly1_bundle, rng):
    # {-1, 1} at weights (1/2, 1/2) is the exact optimum on this region
    ref = Design(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    grid = poly1_bundle.design_space.grid()
    for _ in range(25):
        des = _random_design(grid, rng, size=int(rng.integers(2, 8)))
        try:
            eff = d_efficiency(des, ref, np.zeros(2), poly1_bundle.model)
        except SingularMatrixError:
            continue
        assert 0.0 < eff <= 1.0 + 1e-9
